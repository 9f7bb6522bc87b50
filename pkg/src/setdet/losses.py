"""Set-prediction losses: focal classification plus L1 and GIoU box terms."""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation
from .geometry import pairwise_giou
from .matching import CostWeights, Matching

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    weights: CostWeights = CostWeights()
    alpha: float = 0.25
    gamma: float = 2.0


@dataclass
class PredictionSet:
    """``N`` predictions: class logits over ``C + 1`` (last is no-object)
    and cxcywh boxes, both as graph nodes."""

    logits: ad.Node
    boxes: ad.Node

    def __len__(self):
        return self.logits.shape[0]

    @property
    def probs(self):
        z = self.logits.value - self.logits.value.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def detached(self):
        return self.probs, self.boxes.value

    def subset(self, idx):
        return PredictionSet(self.logits[idx], self.boxes[idx])


@dataclass
class LossReport:
    total: ad.Node
    class_term: ad.Node
    box_l1_term: ad.Node
    box_giou_term: ad.Node
    matched_pairs: list = field(default_factory=list)

    def values(self):
        return {
            "loss": self.total.item(),
            "loss_cls": self.class_term.item(),
            "loss_l1": self.box_l1_term.item(),
            "loss_giou": self.box_giou_term.item(),
        }


def focal_loss(p, alpha=0.25, gamma=2.0, positive=True):
    """Focal loss of one binary decision; ``p`` is the probability of "object"."""
    p = float(np.clip(p, PROB_EPS, 1.0 - PROB_EPS))
    if positive:
        return -alpha * (1.0 - p) ** gamma * np.log(p)
    return -(1.0 - alpha) * p ** gamma * np.log(1.0 - p)


def box_loss(pred, gt, w_l1=5.0, w_giou=2.0):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    g = pairwise_giou(pred, gt)[0, 0]
    return w_l1 * float(np.abs(pred - gt).sum()) + w_giou * (1.0 - g)


def giou_nodes(pred, gt):
    """Elementwise GIoU between ``(K, 4)`` predicted nodes and target boxes."""
    gt = np.asarray(gt, dtype=np.float64)
    half_w = pred[:, 2] * 0.5
    half_h = pred[:, 3] * 0.5
    px1, px2 = pred[:, 0] - half_w, pred[:, 0] + half_w
    py1, py2 = pred[:, 1] - half_h, pred[:, 1] + half_h
    gx1, gx2 = gt[:, 0] - 0.5 * gt[:, 2], gt[:, 0] + 0.5 * gt[:, 2]
    gy1, gy2 = gt[:, 1] - 0.5 * gt[:, 3], gt[:, 1] + 0.5 * gt[:, 3]

    iw = ad.relu(ad.minimum(px2, gx2) - ad.maximum(px1, gx1))
    ih = ad.relu(ad.minimum(py2, gy2) - ad.maximum(py1, gy1))
    inter = iw * ih
    union = pred[:, 2] * pred[:, 3] + gt[:, 2] * gt[:, 3] - inter
    union = ad.maximum(union, 1e-12)
    ew = ad.maximum(px2, gx2) - ad.minimum(px1, gx1)
    eh = ad.maximum(py2, gy2) - ad.minimum(py1, gy1)
    encl = ad.maximum(ew * eh, 1e-12)
    return inter / union - (encl - union) / encl


def focal_terms(p_target, positive, alpha, gamma):
    """Per-entry focal loss given the probability of each entry's target."""
    p = ad.clip(p_target, PROB_EPS, 1.0 - PROB_EPS)
    w = np.where(positive, alpha, 1.0 - alpha)
    return ad.power(1.0 - p, gamma) * w * -ad.log(p)


def assigned_loss(preds, gts, pairs, cfg=LossConfig()):
    """Loss for an explicit assignment of objects to predictions.

    ``pairs`` holds ``(object index, prediction index)``; predictions not
    named are trained toward no-object. Several predictions may share an
    object (independent assignment); a bijection is not required here.
    """
    n, c1 = preds.logits.shape
    targets = np.full(n, c1 - 1)
    positive = np.zeros(n, dtype=bool)
    gidx = np.array([g for g, _ in pairs], dtype=np.int64)
    pidx = np.array([p for _, p in pairs], dtype=np.int64)
    if len(pairs):
        targets[pidx] = gts.labels[gidx]
        positive[pidx] = True
    probs = ad.softmax(preds.logits, axis=-1)
    p_t = probs[np.arange(n), targets]
    class_term = focal_terms(p_t, positive, cfg.alpha, cfg.gamma).sum() * cfg.weights.cls

    if len(pairs):
        pb = preds.boxes[pidx]
        gb = gts.boxes[gidx]
        l1 = ad.abs_(pb - gb).sum() * cfg.weights.l1
        gi = (1.0 - giou_nodes(pb, gb)).sum() * cfg.weights.giou
    else:
        l1 = ad.Node(0.0)
        gi = ad.Node(0.0)
    total = class_term + l1 + gi
    return LossReport(total, class_term, l1, gi, [(int(g), int(p)) for g, p in pairs])


def hungarian_loss(preds, gts, matching, cfg=LossConfig()):
    """Classification over every slot plus box terms over real objects.

    ``matching`` is held constant; gradients flow only through ``preds``.
    """
    sigma = matching.sigma if isinstance(matching, Matching) else np.asarray(matching)
    n = len(preds)
    if sigma.shape != (n,) or not np.array_equal(np.sort(sigma), np.arange(n)):
        raise ContractViolation("matching is not a bijection over the predictions")
    if gts.n != n:
        raise ContractViolation(f"{gts.n} slots for {n} predictions")
    pairs = [(i, int(sigma[i])) for i in range(gts.m)]
    return assigned_loss(preds, gts, pairs, cfg)
