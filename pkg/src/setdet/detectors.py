"""Four set-prediction detectors over the synthetic feature pyramid.

``detr``          encoder over one pyramid level, decoder over N learned queries
``encoder_only``  encoder over one pyramid level, one prediction per cell,
                  boxes regressed around the cell centre
``tsp_fcos``      objectness-selected features of interest (FoIs) from all
                  levels, encoder, per-token head around the FoI position
``tsp_rcnn``      anchor-free proposals, 2x2 bilinear RoI features, encoder,
                  per-token head refining the proposal box

All variants produce a :class:`PredictionSet` per scene and are trained
through the same matching and loss code.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import transformer as T
from .errors import ConfigError, ContractViolation
from .losses import LossConfig, PredictionSet, assigned_loss, focal_terms, giou_nodes
from .matching import (
    INF_COST,
    Matching,
    PaddedGroundTruth,
    cost_matrix,
    default_level_bounds,
    fcos_admissibility,
    hungarian,
    level_of_distance,
    rcnn_admissibility,
    restricted_match,
)
from .geometry import pairwise_iou
from .posenc import pe_boxes, pe_points

VARIANTS = ("detr", "encoder_only", "tsp_fcos", "tsp_rcnn")
MATCHERS = ("unrestricted", "restricted", "distilled", "independent")
TSP_VARIANTS = ("tsp_fcos", "tsp_rcnn")


@dataclass(frozen=True)
class DetectorConfig:
    variant: str = "detr"
    n_classes: int = 3
    feature_dim: int = 12
    levels: tuple = (16, 8, 4)
    encoder: T.EncoderConfig = T.EncoderConfig()
    decoder_layers: int = 3
    n_queries: int = 25
    k: int = 64
    # pyramid level used by the DETR variants; -1 is the coarsest
    detr_level: int = -1
    input_drop: float = 0.7
    pe_scale: float = 1.0
    head_hidden: int = 0
    proposal_hidden: int = 32
    # IoU above which lower-scored RPN proposals are suppressed; 0 disables
    rpn_nms: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractViolation(f"unknown variant {self.variant!r}")
        if self.k <= 0 or self.n_queries <= 0:
            raise ContractViolation("k and n_queries must be positive")
        if not 0.0 <= self.input_drop < 1.0:
            raise ConfigError("input_drop must lie in [0, 1)")

    @property
    def d_model(self):
        return self.encoder.d_model

    @property
    def level_bounds(self):
        return default_level_bounds(len(self.levels))

    @property
    def detr_grid(self):
        return self.levels[self.detr_level]


@dataclass
class FeaturePoint:
    position: tuple
    level: int
    feature: np.ndarray
    objectness_score: float
    index: int = -1


@dataclass
class Proposal:
    box: tuple
    objectness: float
    feature: np.ndarray
    index: int = -1


@dataclass
class DetectorOutput:
    """One scene's predictions plus what the encoder saw.

    ``source`` gives, per prediction, a stable id of the token it came
    from (query index or flat pyramid position), used to track matching
    instability across epochs. ``selected`` holds the FoIs or proposals.
    """

    predictions: PredictionSet
    source: np.ndarray
    selected: list = field(default_factory=list)
    positions: np.ndarray = None
    levels: np.ndarray = None
    proposals: np.ndarray = None


@dataclass
class BatchOutput:
    outputs: list
    maps: list
    aux_loss: ad.Node = None

    def __len__(self):
        return len(self.outputs)

    def __getitem__(self, i):
        return self.outputs[i]


class MLP(T.Module):
    def __init__(self, d_in, hidden, d_out, rng):
        self.lin1 = T.Linear(d_in, hidden, rng)
        self.lin2 = T.Linear(hidden, d_out, rng)

    def __call__(self, x):
        return self.lin2(ad.relu(self.lin1(x)))


class Detector(T.Module):
    def __init__(self, cfg, rng):
        self.cfg = cfg
        d, F = cfg.d_model, cfg.feature_dim
        self.encoder = T.Encoder(cfg.encoder, rng)
        self.head = T.DetectionHead(d, cfg.n_classes, rng, cfg.head_hidden or None)
        if cfg.variant == "tsp_rcnn":
            self.rpn = MLP(F, cfg.proposal_hidden, 5, rng)
            self.roi_proj = T.Linear(4 * F, d, rng)
        else:
            self.in_proj = T.Linear(F, d, rng)
        if cfg.variant == "tsp_fcos":
            self.foi_head = MLP(F, cfg.proposal_hidden, 1, rng)
            self.aux = MLP(F, d, d, rng)
        if cfg.variant == "detr":
            self.query_pos = T.param(rng.normal(0.0, 1.0, (cfg.n_queries, d)))
            self.decoder = T.Decoder(replace(cfg.encoder, layers=cfg.decoder_layers), rng)

    def transformer_parameters(self):
        names = ("encoder.", "decoder.", "query_pos")
        return [p for k, p in self.named_parameters().items() if k.startswith(names)]


# ----------------------------------------------------------------- selection

def _top_k(scores, k):
    """Indices of the ``k`` highest scores; ties keep scan order."""
    return np.argsort(-np.asarray(scores), kind="stable")[:k]


def _top_k_nms(scores, boxes, k, iou):
    """Greedy proposal suppression in score order, stopping at ``k`` kept.

    Falls back to plain top-k when ``iou`` is 0. Fewer than ``k`` indices
    come back only if every position was examined.
    """
    order = _top_k(scores, len(scores))
    if iou <= 0:
        return order[:k]
    overlap = pairwise_iou(boxes[order], boxes[order]) > iou
    alive = np.ones(len(order), bool)
    keep = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(order[i])
        if len(keep) == k:
            break
        alive &= ~overlap[i]
    return np.array(keep, dtype=np.int64)


def foi_select(pyramid, classifier, k):
    """Top-``k`` pyramid positions by objectness score."""
    feats, pos, lv = pyramid.flat()
    if k <= 0:
        raise ContractViolation("k must be positive")
    if k > len(feats):
        raise ContractViolation(f"k={k} exceeds {len(feats)} positions")
    scores = ad.sigmoid(classifier(feats)).value.reshape(-1)
    idx = _top_k(scores, k)
    return [FeaturePoint(tuple(pos[i]), int(lv[i]), feats[i], float(scores[i]), int(i)) for i in idx]


def roi_select(pyramid, rpn, k, nms=0.0):
    """Top-``k`` anchor-free proposals, one per pyramid position.

    With ``nms`` > 0 a proposal overlapping a higher-scored kept one by
    more than that IoU is skipped, as in a Faster R-CNN region proposal
    network.
    """
    feats, pos, lv = pyramid.flat()
    if k <= 0:
        raise ContractViolation("k must be positive")
    if k > len(feats):
        raise ContractViolation(f"k={k} exceeds {len(feats)} positions")
    out = rpn(feats).value
    scores = 1.0 / (1.0 + np.exp(-out[:, 0]))
    boxes = T.decode_box_reference(out[:, 1:], pos).value
    idx = _top_k_nms(scores, boxes, k, nms)
    return [Proposal(tuple(boxes[i]), float(scores[i]), feats[i], int(i)) for i in idx]


def _bilinear(grid, x, y):
    """Sample a (g, g, F) grid of cell-centred features at continuous points."""
    g = grid.shape[0]
    u = np.clip(np.asarray(x) * g - 0.5, 0.0, g - 1.0)
    v = np.clip(np.asarray(y) * g - 0.5, 0.0, g - 1.0)
    c0, r0 = np.floor(u).astype(int), np.floor(v).astype(int)
    c1, r1 = np.minimum(c0 + 1, g - 1), np.minimum(r0 + 1, g - 1)
    fu, fv = (u - c0)[..., None], (v - r0)[..., None]
    top = grid[r0, c0] * (1 - fu) + grid[r0, c1] * fu
    bot = grid[r1, c0] * (1 - fu) + grid[r1, c1] * fu
    return top * (1 - fv) + bot * fv


def roi_level(boxes, bounds):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return level_of_distance(0.5 * np.maximum(boxes[:, 2], boxes[:, 3]), bounds)


def roi_samples(features, boxes, bounds):
    """2x2 bilinear samples inside each box on its size-matched level.

    Returns ``(K, 4 * F)``; samples sit at the centres of the four box
    quadrants, so a zero-size box samples its centre four times.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    levels = roi_level(boxes, bounds)
    frac = np.array([0.25, 0.75])
    out = np.zeros((len(boxes), 4, features[0].shape[-1]))
    for lv in np.unique(levels):
        sel = levels == lv
        b = boxes[sel]
        x0, y0 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2
        xs = x0[:, None] + b[:, 2:3] * frac  # (K, 2)
        ys = y0[:, None] + b[:, 3:4] * frac
        px = np.repeat(xs[:, None, :], 2, axis=1).reshape(-1, 4)
        py = np.repeat(ys[:, :, None], 2, axis=2).reshape(-1, 4)
        out[sel] = _bilinear(features[lv], px, py)
    return out.reshape(len(boxes), -1)


def roi_feature(pyramid, box, proj=None, bounds=None):
    """One proposal's pooled feature, projected by ``proj`` when given."""
    bounds = bounds or default_level_bounds(len(pyramid.features))
    flat = roi_samples(pyramid.features, [box], bounds)
    return flat[0] if proj is None else proj(flat).value[0]


def input_dropout(n, rate, rng, min_keep=1):
    """Boolean keep-mask: each token kept with probability ``1 - rate``.

    When fewer than ``min_keep`` survive, the lowest-index dropped tokens
    are restored, so the result is deterministic given ``rng``.
    """
    if rate <= 0.0:
        return np.ones(n, dtype=bool)
    keep = rng.random(n) >= rate
    short = min(min_keep, n) - int(keep.sum())
    if short > 0:
        dropped = np.nonzero(~keep)[0]
        keep[dropped[:short]] = True
    return keep


# ------------------------------------------------------------------- forward

@dataclass
class Sample:
    """A scene with its flattened pyramid, ready for batching."""

    scene: object
    features: np.ndarray
    positions: np.ndarray
    levels: np.ndarray
    grids: list

    @classmethod
    def from_pyramid(cls, pyr):
        f, p, lv = pyr.flat()
        return cls(pyr.scene, f, p, lv, pyr.features)

    @property
    def gts(self):
        return PaddedGroundTruth(self.scene.boxes, self.scene.labels, len(self.scene.objects))


def _level_tokens(samples, cfg):
    grid = [s.grids[cfg.detr_level] for s in samples]
    g = cfg.detr_grid
    feats = np.stack([x.reshape(g * g, -1) for x in grid])
    lv = cfg.detr_level % len(cfg.levels)
    offsets = sum(n * n for n in cfg.levels[:lv])
    pos = samples[0].positions[offsets:offsets + g * g]
    return feats, pos, offsets


def _pad_select(indices, n_rows):
    """Pad ragged index lists into ``(B, L)`` plus a validity mask."""
    width = max(len(i) for i in indices)
    idx = np.zeros((n_rows, width), dtype=np.int64)
    mask = np.zeros((n_rows, width), dtype=bool)
    for b, sel in enumerate(indices):
        idx[b, :len(sel)] = sel
        idx[b, len(sel):] = sel[0]
        mask[b, :len(sel)] = True
    return idx, mask


def _split_predictions(logits, boxes, mask):
    """Per-scene PredictionSets from padded (B, L, .) nodes."""
    out = []
    for b in range(mask.shape[0]):
        rows = np.nonzero(mask[b])[0]
        if rows.size == mask.shape[1]:
            out.append(PredictionSet(logits[b], boxes[b]))
        else:
            out.append(PredictionSet(logits[b][rows], boxes[b][rows]))
    return out


def _fcos_targets(samples, cfg):
    targets = np.zeros((len(samples), samples[0].features.shape[0]), dtype=bool)
    assigned = np.full(targets.shape, -1, dtype=np.int64)
    for b, s in enumerate(samples):
        gts = s.gts
        if gts.m == 0:
            continue
        allowed = fcos_admissibility(s.positions, s.levels, gts, cfg.level_bounds).allowed
        targets[b] = allowed.any(1)
        area = np.where(allowed, (gts.boxes[:, 2] * gts.boxes[:, 3])[None], np.inf)
        assigned[b] = np.where(targets[b], area.argmin(1), -1)
    return targets, assigned


def _objectness_loss(logit, targets, alpha=0.25, gamma=2.0):
    p = ad.sigmoid(logit)
    p_t = p * targets + (1.0 - p) * (~targets)
    return focal_terms(p_t, targets, alpha, gamma).sum() * (1.0 / max(1, int(targets.sum())))


def forward(model, samples, mode="eval", rng=None):
    """Run one variant on a batch of samples; ``mode`` is train or eval."""
    if mode not in ("train", "eval"):
        raise ContractViolation(f"mode must be train or eval, not {mode!r}")
    cfg = model.cfg
    fn = {"detr": _forward_detr, "encoder_only": _forward_encoder_only,
          "tsp_fcos": _forward_tsp_fcos, "tsp_rcnn": _forward_tsp_rcnn}.get(cfg.variant)
    if fn is None:
        raise ContractViolation(f"unknown variant {cfg.variant!r}")
    return fn(model, samples, mode == "train", rng)


def _forward_detr(model, samples, training, rng):
    cfg = model.cfg
    feats, pos, offset = _level_tokens(samples, cfg)
    pe = pe_points(pos, cfg.d_model, cfg.pe_scale)
    memory, enc_maps = model.encoder(model.in_proj(feats), pe)
    tgt, dec_maps = model.decoder(model.query_pos, memory, pe)
    logits, raw = model.head(tgt)
    boxes = ad.sigmoid(raw)
    src = np.arange(cfg.n_queries)
    outs = [DetectorOutput(PredictionSet(logits[b], boxes[b]), src) for b in range(len(samples))]
    return BatchOutput(outs, enc_maps + dec_maps)


def _forward_encoder_only(model, samples, training, rng):
    cfg = model.cfg
    feats, pos, offset = _level_tokens(samples, cfg)
    pe = pe_points(pos, cfg.d_model, cfg.pe_scale)
    memory, maps = model.encoder(model.in_proj(feats), pe)
    logits, raw = model.head(memory)
    boxes = T.decode_box_reference(raw, pos)
    src = offset + np.arange(len(pos))
    outs = [DetectorOutput(PredictionSet(logits[b], boxes[b]), src, positions=pos)
            for b in range(len(samples))]
    return BatchOutput(outs, maps)


def _keep_lists(selected, samples, cfg, training, rng):
    if not training or cfg.input_drop <= 0:
        return selected
    out = []
    for sel, s in zip(selected, samples):
        keep = input_dropout(len(sel), cfg.input_drop, rng, min_keep=max(1, len(s.scene.objects)))
        out.append(sel[keep])
    return out


def _forward_tsp_fcos(model, samples, training, rng):
    cfg = model.cfg
    P = samples[0].features.shape[0]
    if cfg.k > P:
        raise ContractViolation(f"k={cfg.k} exceeds {P} positions")
    all_feats = np.stack([s.features for s in samples])
    score_logit = model.foi_head(all_feats).reshape(len(samples), P)
    aux = None
    if training:
        targets, _ = _fcos_targets(samples, cfg)
        aux = _objectness_loss(score_logit, targets)
    scores = score_logit.value
    selected = [_top_k(scores[b], cfg.k) for b in range(len(samples))]
    kept = _keep_lists(selected, samples, cfg, training, rng)
    idx, mask = _pad_select(kept, len(samples))
    rows = np.arange(len(samples))[:, None]
    f = all_feats[rows, idx]
    pos = np.stack([s.positions for s in samples])[rows, idx]
    lv = np.stack([s.levels for s in samples])[rows, idx]
    x = model.in_proj(f) + model.aux(f)
    pe = pe_points(pos.reshape(-1, 2), cfg.d_model, cfg.pe_scale).reshape(*pos.shape[:2], -1)
    memory, maps = model.encoder(x, pe, mask if not mask.all() else None)
    logits, raw = model.head(memory)
    boxes = T.decode_box_reference(raw, pos)
    preds = _split_predictions(logits, boxes, mask)
    outs = []
    for b, p in enumerate(preds):
        n = int(mask[b].sum())
        fois = [FeaturePoint(tuple(pos[b, j]), int(lv[b, j]), f[b, j], float(scores[b, idx[b, j]]), int(idx[b, j]))
                for j in range(n)] if not training else []
        outs.append(DetectorOutput(p, idx[b, :n], fois, pos[b, :n], lv[b, :n]))
    return BatchOutput(outs, maps, aux)


def _rpn_loss(rpn_out, proposals, samples, cfg):
    targets, assigned = _fcos_targets(samples, cfg)
    loss = _objectness_loss(rpn_out[:, :, 0], targets)
    b_idx, p_idx = np.nonzero(targets)
    if b_idx.size:
        gt = np.stack([samples[b].scene.boxes[assigned[b, p]] for b, p in zip(b_idx, p_idx)])
        pb = proposals[b_idx, p_idx]
        norm = 1.0 / b_idx.size
        loss = loss + ad.abs_(pb - gt).sum() * norm + (1.0 - giou_nodes(pb, gt)).sum() * (2.0 * norm)
    return loss


def _forward_tsp_rcnn(model, samples, training, rng):
    cfg = model.cfg
    P = samples[0].features.shape[0]
    if cfg.k > P:
        raise ContractViolation(f"k={cfg.k} exceeds {P} positions")
    B = len(samples)
    all_feats = np.stack([s.features for s in samples])
    all_pos = np.stack([s.positions for s in samples])
    rpn_out = model.rpn(all_feats)
    proposals = T.decode_box_reference(rpn_out[:, :, 1:], all_pos)
    aux = _rpn_loss(rpn_out, proposals, samples, cfg) if training else None
    scores = rpn_out.value[:, :, 0]
    selected = [_top_k_nms(scores[b], proposals.value[b], cfg.k, cfg.rpn_nms) for b in range(B)]
    kept = _keep_lists(selected, samples, cfg, training, rng)
    idx, mask = _pad_select(kept, B)
    rows = np.arange(B)[:, None]
    prop = proposals.value[rows, idx]  # detached: no gradient into the proposal head
    bounds = cfg.level_bounds
    roi = np.stack([roi_samples(s.grids, prop[b], bounds) for b, s in enumerate(samples)])
    x = model.roi_proj(roi)
    pe = pe_boxes(prop.reshape(-1, 4), cfg.d_model, cfg.pe_scale).reshape(*prop.shape[:2], -1)
    memory, maps = model.encoder(x, pe, mask if not mask.all() else None)
    logits, raw = model.head(memory)
    boxes = T.decode_box_reference(raw, prop)
    preds = _split_predictions(logits, boxes, mask)
    outs = []
    for b, p in enumerate(preds):
        n = int(mask[b].sum())
        props = [Proposal(tuple(prop[b, j]), float(1 / (1 + np.exp(-scores[b, idx[b, j]]))), roi[b, j],
                          int(idx[b, j])) for j in range(n)] if not training else []
        outs.append(DetectorOutput(p, idx[b, :n], props, proposals=prop[b, :n]))
    return BatchOutput(outs, maps, aux)


# ------------------------------------------------------------------ matching

def admissibility(output, gts, cfg):
    if cfg.variant == "tsp_rcnn":
        return rcnn_admissibility(output.proposals, gts)
    if cfg.variant in ("tsp_fcos",):
        return fcos_admissibility(output.positions, output.levels, gts, cfg.level_bounds)
    if cfg.variant == "encoder_only":
        lv = np.full(len(output.positions), cfg.detr_level % len(cfg.levels))
        return fcos_admissibility(output.positions, lv, gts, cfg.level_bounds)
    raise ConfigError(f"{cfg.variant} has no admissibility rule")


def independent_pairs(output, gts, cfg):
    """Per-token assignment without a bijection: each token takes its best
    admissible object (highest IoU for proposals, smallest box for points)."""
    allowed = admissibility(output, gts, cfg).allowed
    if gts.m == 0:
        return []
    if cfg.variant == "tsp_rcnn":
        score = np.where(allowed, pairwise_iou(output.proposals, gts.boxes), -np.inf)
        best = score.argmax(1)
    else:
        area = np.where(allowed, (gts.boxes[:, 2] * gts.boxes[:, 3])[None], np.inf)
        best = area.argmin(1)
    rows = np.nonzero(allowed.any(1))[0]
    return [(int(best[p]), int(p)) for p in rows]


def match_output(output, gts, matcher, cfg, loss_cfg=LossConfig(), teacher=None):
    """Assignment for one scene; returns (pairs, matching or None)."""
    preds = output.predictions
    padded = gts.with_n(len(preds))
    if matcher == "unrestricted":
        m = hungarian(cost_matrix(preds, padded, loss_cfg.weights))
    elif matcher == "restricted":
        mask = admissibility(output, padded, cfg)
        m = restricted_match(preds, padded, mask, loss_cfg.weights, fallback=True)
    elif matcher == "distilled":
        if teacher is None:
            raise ConfigError("distilled matching needs teacher assignments")
        m = teacher
        if m.n != len(preds):
            raise ContractViolation("teacher and student predict different set sizes")
    elif matcher == "independent":
        return independent_pairs(output, padded, cfg), None
    else:
        raise ConfigError(f"unknown matcher {matcher!r}")
    return m.pairs(padded.m), m


def batch_loss(batch, samples, pairs_list, loss_cfg=LossConfig()):
    """Summed set loss over the batch, divided by the batch size.

    Per-scene predictions and objects are stacked with offsets so one
    :func:`assigned_loss` call covers the whole batch.
    """
    logits, boxes, gt_boxes, gt_labels, pairs = [], [], [], [], []
    n_off = g_off = 0
    for out, s, pr in zip(batch.outputs, samples, pairs_list):
        logits.append(out.predictions.logits)
        boxes.append(out.predictions.boxes)
        gt_boxes.append(s.scene.boxes)
        gt_labels.append(s.scene.labels)
        pairs.extend((g + g_off, p + n_off) for g, p in pr)
        n_off += len(out.predictions)
        g_off += len(s.scene.objects)
    preds = PredictionSet(ad.concat(logits, axis=0), ad.concat(boxes, axis=0))
    gts = PaddedGroundTruth(np.concatenate(gt_boxes), np.concatenate(gt_labels), n_off)
    rep = assigned_loss(preds, gts, pairs, loss_cfg)
    scale = 1.0 / len(samples)
    rep.total = rep.total * scale
    rep.class_term = rep.class_term * scale
    rep.box_l1_term = rep.box_l1_term * scale
    rep.box_giou_term = rep.box_giou_term * scale
    return rep


# ----------------------------------------------------------------- optimizer

class AdamW:
    """Adam with decoupled weight decay and global gradient-norm clipping."""

    def __init__(self, params, lr=1e-3, weight_decay=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.wd, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.value = p.value * (1 - self.lr * self.wd) - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params, lr=1e-2, momentum=0.9, weight_decay=1e-4):
        self.params = list(params)
        self.lr, self.momentum, self.wd = lr, momentum, weight_decay
        self.buf = [np.zeros_like(p.value) for p in self.params]

    def step(self, grads):
        for p, g, b in zip(self.params, grads, self.buf):
            b *= self.momentum
            b += g + self.wd * p.value
            p.value = p.value - self.lr * b


def clip_grads(grads, max_norm):
    if max_norm is None or max_norm <= 0:
        return grads, float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if norm > max_norm:
        grads = [g * (max_norm / norm) for g in grads]
    return grads, norm


class Optimizer:
    """AdamW for everything, or AdamW for the transformer plus SGD elsewhere."""

    def __init__(self, model, lr=1e-3, weight_decay=1e-4, clip=0.1, split=False, sgd_lr=1e-2):
        self.clip = clip
        if split:
            tr = model.transformer_parameters()
            ids = {id(p) for p in tr}
            rest = [p for p in model.parameters() if id(p) not in ids]
            self.groups = [(AdamW(tr, lr, weight_decay), True), (SGD(rest, sgd_lr), False)]
        else:
            self.groups = [(AdamW(model.parameters(), lr, weight_decay), True)]

    def step(self):
        for opt, clipped in self.groups:
            grads = [p.grad for p in opt.params]
            if clipped:
                grads, _ = clip_grads(grads, self.clip)
            opt.step(grads)
            for p in opt.params:
                p.zero_grad()


@dataclass
class StepResult:
    report: object
    aux_loss: float
    assignments: list


def assignment_sources(output, pairs):
    """Matched token id per real object, in object order."""
    src = np.full(len(pairs), -1, dtype=np.int64)
    for g, p in pairs:
        if g < len(src) and src[g] < 0:
            src[g] = output.source[p]
    return src


def train_step(model, samples, matcher, optimizer, rng, loss_cfg=LossConfig(), teachers=None):
    """Forward, match, loss, backward and update on one batch."""
    cfg = model.cfg
    if matcher == "distilled" and cfg.variant in TSP_VARIANTS and cfg.input_drop > 0:
        raise ConfigError("distilled matching needs a fixed prediction set (set input_drop=0)")
    batch = forward(model, samples, "train", rng)
    pairs_list, sources = [], []
    for b, (out, s) in enumerate(zip(batch.outputs, samples)):
        teacher = None if teachers is None else teachers[b]
        pairs, _ = match_output(out, s.gts, matcher, cfg, loss_cfg, teacher)
        pairs_list.append(pairs)
        sources.append(assignment_sources(out, pairs) if matcher != "independent" else np.array([], np.int64))
    report = batch_loss(batch, samples, pairs_list, loss_cfg)
    total = report.total if batch.aux_loss is None else report.total + batch.aux_loss
    ad.backward(total)
    optimizer.step()
    aux = 0.0 if batch.aux_loss is None else batch.aux_loss.item()
    return StepResult(report, aux, sources)


def detections(output):
    """(scores, labels, boxes) from a prediction set; no-object excluded."""
    probs, boxes = output.predictions.detached()
    cls = probs[:, :-1]
    labels = cls.argmax(1)
    return cls[np.arange(len(cls)), labels], labels, boxes


def teacher_matching(teacher, sample, loss_cfg=LossConfig()):
    """Deterministic teacher prediction matched optimally to the scene."""
    out = forward(teacher, [sample], "eval").outputs[0]
    return hungarian(cost_matrix(out.predictions, sample.gts.with_n(len(out.predictions)), loss_cfg.weights))


def build_model(cfg, seed):
    return Detector(cfg, np.random.default_rng([seed, 17]))


__all__ = [
    "VARIANTS", "MATCHERS", "DetectorConfig", "Detector", "FeaturePoint", "Proposal",
    "DetectorOutput", "BatchOutput", "Sample", "foi_select", "roi_select", "roi_feature",
    "roi_samples", "input_dropout", "forward", "train_step", "match_output", "batch_loss",
    "AdamW", "SGD", "Optimizer", "detections", "teacher_matching", "build_model", "INF_COST",
    "Matching",
]
