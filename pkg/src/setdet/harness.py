"""Experiment configuration, training and evaluation loops, sweeps.

A config file is flat ``key = value`` text; every key of
:class:`ExperimentConfig` must appear (except ``teacher`` and ``name``),
and unknown keys are rejected. ``#`` starts a comment.

Run directory layout::

    config.txt      resolved configuration
    log.csv         one row per epoch (columns in LOG_COLUMNS + sparsity)
    checkpoint.npz  final parameters
"""

import dataclasses
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import analysis as A
from . import detectors as D
from . import synth
from .errors import ConfigError
from .losses import LossConfig
from .matching import CostWeights
from .transformer import EncoderConfig, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

EVAL_CHUNK = 50
LOG_COLUMNS = ["epoch", "loss", "loss_cls", "loss_l1", "loss_giou", "loss_aux",
               "AP", "AP50", "AP75", "AP_s", "AP_m", "AP_l", "duplicate_rate", "instability"]
OPTIONAL_KEYS = ("name", "teacher")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "run"
    variant: str = "detr"
    matcher: str = "unrestricted"
    # optimizer
    lr: float = 1e-3
    weight_decay: float = 1e-4
    clip: float = 1.0
    optimizer_split: bool = False
    sgd_lr: float = 1e-2
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    # model
    d_model: int = 32
    layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    d_k: int = 8
    d_v: int = 8
    d_ffn: int = 64
    k: int = 48
    n_queries: int = 25
    detr_level: int = 1
    input_drop: float = 0.7
    pe_scale: float = 1.0
    rpn_nms: float = 0.0
    # loss and matching
    w_cls: float = 1.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    # data
    train_scenes: int = 512
    val_scenes: int = 100
    n_classes: int = 3
    min_objects: int = 1
    max_objects: int = 8
    strata_small: float = 0.4
    strata_medium: float = 0.35
    strata_large: float = 0.25
    noise: float = 0.05
    levels: tuple = (16, 8, 4)
    sparsity_variant: str = "paper"
    teacher: str = ""

    def __post_init__(self):
        if self.variant not in D.VARIANTS:
            raise ConfigError(f"variant must be one of {', '.join(D.VARIANTS)}")
        if self.matcher not in D.MATCHERS:
            raise ConfigError(f"matcher must be one of {', '.join(D.MATCHERS)}")
        if self.matcher == "distilled" and not self.teacher:
            raise ConfigError("matcher=distilled requires a teacher run directory")
        if self.sparsity_variant not in ("paper", "entropy"):
            raise ConfigError("sparsity_variant must be paper or entropy")
        if self.epochs < 1 or self.batch_size < 1 or self.train_scenes < 1 or self.val_scenes < 1:
            raise ConfigError("epochs, batch_size, train_scenes and val_scenes must be positive")
        if self.heads * self.d_k <= 0 or self.d_model % 8:
            raise ConfigError("d_model must be a multiple of 8 for box positional encodings")

    # ------------------------------------------------------------ derived
    def synth_config(self):
        return synth.SynthConfig(
            n_classes=self.n_classes, min_objects=self.min_objects, max_objects=self.max_objects,
            strata=(self.strata_small, self.strata_medium, self.strata_large),
            levels=tuple(self.levels), noise=self.noise)

    def detector_config(self):
        enc = EncoderConfig(self.layers, self.d_model, self.heads, self.d_k, self.d_v, self.d_ffn)
        drop = self.input_drop if self.variant in D.TSP_VARIANTS else 0.0
        return D.DetectorConfig(
            variant=self.variant, n_classes=self.n_classes, feature_dim=self.synth_config().feature_dim,
            levels=tuple(self.levels), encoder=enc, decoder_layers=self.decoder_layers,
            n_queries=self.n_queries, k=self.k, detr_level=self.detr_level, input_drop=drop,
            pe_scale=self.pe_scale, rpn_nms=self.rpn_nms)

    def loss_config(self):
        return LossConfig(CostWeights(self.w_cls, self.w_l1, self.w_giou), self.focal_alpha, self.focal_gamma)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    # ----------------------------------------------------------- text I/O
    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.type is tuple:
                v = ",".join(str(x) for x in v)
            elif f.type is bool:
                v = "true" if v else "false"
            elif f.type is float:
                v = repr(float(v))
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, source="<config>"):
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
            if key in values:
                raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'")
            values[key] = _parse_value(key, val, types[key], f"{source}:{lineno}")
        missing = [k for k in types if k not in values and k not in OPTIONAL_KEYS]
        if missing:
            raise ConfigError(f"{source}: missing key '{missing[0]}'")
        return cls(**values)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err.strerror}") from None
        return cls.from_text(text, str(path))


def _parse_value(key, val, typ, where):
    try:
        if typ is bool:
            if val.lower() not in ("true", "false"):
                raise ValueError
            return val.lower() == "true"
        if typ is tuple:
            return tuple(int(x) for x in val.split(",") if x.strip())
        return typ(val)
    except ValueError:
        raise ConfigError(f"{where}: bad value for '{key}': {val!r}") from None


# ------------------------------------------------------------------ data

def load_samples(cfg, split):
    scfg = cfg.synth_config()
    count = cfg.train_scenes if split == "train" else cfg.val_scenes
    return [D.Sample.from_pyramid(synth.featurize(s, cfg=scfg)) for s in synth.dataset(split, count, scfg)]


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def evaluate(model, samples, sparsity_variant="paper"):
    """AP report, mean duplicate rate and pooled per-layer sparsity."""
    dets, pool = [], A.SparsityPool(sparsity_variant)
    for chunk in _chunks(samples, EVAL_CHUNK):
        batch = D.forward(model, chunk, "eval")
        pool.add(batch.maps)
        dets.extend(D.detections(o) for o in batch.outputs)
    gts = [(s.scene.boxes, s.scene.labels) for s in samples]
    report = A.evaluate_ap(dets, gts, model.cfg.n_classes)
    dup = float(np.mean([A.duplicate_rate(d) for d in dets]))
    return report, dup, pool.report()


def sparsity_columns(sparsity):
    return {f"sparsity_{'enc' if kind == 'self' else 'dec'}{layer}": v for (layer, kind), v in sparsity.items()}


# ---------------------------------------------------------------- training

def build(cfg):
    return D.build_model(cfg.detector_config(), cfg.seed)


def load_run(run_dir):
    cfg = ExperimentConfig.load(os.path.join(run_dir, "config.txt"))
    model = build(cfg)
    meta = load_checkpoint(os.path.join(run_dir, "checkpoint.npz"), model)
    return cfg, model, meta


def teacher_assignments(teacher_dir, samples, cfg):
    tcfg, teacher, _ = load_run(teacher_dir)
    if tcfg.variant != cfg.variant or tcfg.detector_config() != cfg.detector_config():
        raise ConfigError("teacher and student architectures differ")
    loss_cfg = cfg.loss_config()
    return [A.distill_matching(teacher, s, loss_cfg) for s in samples]


def initial_assignments(model, samples, cfg, teachers=None):
    """Per-scene matched token ids before any update, the epoch-0 reference
    for instability. Predictions are taken without input dropout."""
    loss_cfg = cfg.loss_config()
    out = {}
    for start in range(0, len(samples), EVAL_CHUNK):
        chunk = samples[start:start + EVAL_CHUNK]
        batch = D.forward(model, chunk, "eval")
        for j, (o, s) in enumerate(zip(batch.outputs, chunk)):
            teacher = None if teachers is None else teachers[start + j]
            pairs, _ = D.match_output(o, s.gts, cfg.matcher, model.cfg, loss_cfg, teacher)
            out[start + j] = D.assignment_sources(o, pairs)
    return out


def run_train(cfg, out_dir, progress=None):
    """Train per ``cfg`` and write the run directory; returns its path."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write(cfg.to_text())
    train, val = load_samples(cfg, "train"), load_samples(cfg, "val")
    model = build(cfg)
    opt = D.Optimizer(model, cfg.lr, cfg.weight_decay, cfg.clip, cfg.optimizer_split, cfg.sgd_lr)
    rng = np.random.default_rng([cfg.seed, 1])
    loss_cfg = cfg.loss_config()
    teachers = teacher_assignments(cfg.teacher, train, cfg) if cfg.matcher == "distilled" else None

    rows = []
    prev = None if cfg.matcher == "independent" else initial_assignments(model, train, cfg, teachers)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        sums = dict.fromkeys(["loss", "loss_cls", "loss_l1", "loss_giou", "loss_aux"], 0.0)
        current = {}
        steps = 0
        for idx in _chunks(order, cfg.batch_size):
            batch = [train[i] for i in idx]
            tb = None if teachers is None else [teachers[i] for i in idx]
            res = D.train_step(model, batch, cfg.matcher, opt, rng, loss_cfg, tb)
            for k, v in res.report.values().items():
                sums[k] += v
            sums["loss_aux"] += res.aux_loss
            for i, src in zip(idx, res.assignments):
                current[int(i)] = src
            steps += 1
        report, dup, sparsity = evaluate(model, val, cfg.sparsity_variant)
        row = {k: v / steps for k, v in sums.items()}
        row.update(epoch=epoch, duplicate_rate=dup, **report.as_dict())
        row["instability"] = A.pooled_instability(prev, current) if prev is not None else float("nan")
        row.update(sparsity_columns(sparsity))
        rows.append(row)
        prev = current if cfg.matcher != "independent" else None
        if progress:
            progress(cfg, row)
    header = LOG_COLUMNS + sorted(k for k in rows[0] if k.startswith("sparsity_"))
    A.write_csv(os.path.join(out_dir, "log.csv"), header, rows)
    save_checkpoint(os.path.join(out_dir, "checkpoint.npz"), model,
                    {"epochs": cfg.epochs, "AP": rows[-1]["AP"]})
    return out_dir


def run_eval(run_dir, sparsity_variant=None):
    """Re-evaluate a run's checkpoint on its validation split."""
    cfg, model, _ = load_run(run_dir)
    report, dup, sparsity = evaluate(model, load_samples(cfg, "val"), sparsity_variant or cfg.sparsity_variant)
    return report, dup, sparsity


def read_log(run_dir):
    return A.read_csv(os.path.join(run_dir, "log.csv"))


def _train_job(args):
    cfg, out = args
    return run_train(cfg, out)


def run_many(jobs, n_jobs=1):
    """Run ``(cfg, out_dir)`` jobs, reusing complete run directories."""
    todo = [(c, o) for c, o in jobs if not _complete(c, o)]
    if n_jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(n_jobs) as ex:
            list(ex.map(_train_job, todo))
    else:
        for job in todo:
            _train_job(job)
    return [o for _, o in jobs]


def _complete(cfg, out_dir):
    try:
        with open(os.path.join(out_dir, "config.txt")) as fh:
            same = fh.read() == cfg.to_text()
    except OSError:
        return False
    return same and os.path.exists(os.path.join(out_dir, "checkpoint.npz"))


def _unique_names(cfgs):
    names, seen = [], {}
    for c in cfgs:
        n = c.name
        seen[n] = seen.get(n, 0) + 1
        names.append(n if seen[n] == 1 else f"{n}_{seen[n]}")
    return names


def run_compare(cfgs, out_dir, metric="AP", n_jobs=1):
    """Train every config and align their per-epoch ``metric`` curves."""
    os.makedirs(out_dir, exist_ok=True)
    names = _unique_names(cfgs)
    runs = run_many([(c, os.path.join(out_dir, n)) for c, n in zip(cfgs, names)], n_jobs)
    logs = [read_log(r) for r in runs]
    epochs = max(len(lg) for lg in logs)
    rows = []
    for e in range(epochs):
        row = {"epoch": e + 1}
        for n, lg in zip(names, logs):
            row[n] = float(lg[e][metric]) if e < len(lg) else ""
        rows.append(row)
    csv_path = os.path.join(out_dir, "compare.csv")
    A.write_csv(csv_path, ["epoch"] + names, rows)
    plot_curves(os.path.join(out_dir, "compare.png"), rows, names, metric)
    return csv_path


def run_sweep_k(cfg, ks, out_dir, n_jobs=1):
    """Final AP of a TSP variant as a function of the number of selected tokens."""
    if cfg.variant not in D.TSP_VARIANTS:
        raise ConfigError("sweep-k applies to tsp_fcos and tsp_rcnn")
    os.makedirs(out_dir, exist_ok=True)
    jobs = [(cfg.replace(k=int(k), name=f"{cfg.name}_k{k}"), os.path.join(out_dir, f"k{k}")) for k in ks]
    runs = run_many(jobs, n_jobs)
    rows = []
    for k, run in zip(ks, runs):
        last = read_log(run)[-1]
        rows.append({"k": int(k), **{m: float(last[m]) for m in ("AP", "AP50", "AP75", "AP_s", "AP_m", "AP_l")}})
    path = os.path.join(out_dir, "sweep_k.csv")
    A.write_csv(path, ["k", "AP", "AP50", "AP75", "AP_s", "AP_m", "AP_l"], rows)
    plot_curves(os.path.join(out_dir, "sweep_k.png"), [{"epoch": r["k"], "AP": r["AP"]} for r in rows],
                ["AP"], "AP", xlabel="k")
    return path


def analyze_attention(run_dir, variant="paper", out_path=None):
    """Per-layer pooled sparsity of a trained run on its validation split."""
    _, _, sparsity = run_eval(run_dir, variant)
    rows = [{"layer": layer, "kind": kind, "sparsity": v} for (layer, kind), v in sparsity.items()]
    out_path = out_path or os.path.join(run_dir, f"attention_{variant}.csv")
    A.write_csv(out_path, ["layer", "kind", "sparsity"], rows)
    return out_path


def plot_curves(path, rows, names, metric, xlabel="epoch"):
    """Line chart of the given columns; failures are logged, never raised."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 4))
        x = [r["epoch"] for r in rows]
        for n in names:
            ax.plot(x, [r[n] if r[n] != "" else np.nan for r in rows], label=n)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(metric)
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path, dpi=100)
        plt.close(fig)
    except Exception as err:  # plots are a convenience; CSV is the contract
        log.warning("plot %s failed: %s", path, err)
