"""Synthetic scenes and a hand-crafted feature pyramid.

Scenes hold 1..8 labelled boxes in the unit square. ``featurize`` turns a
scene into a multi-level grid of local evidence vectors that stands in for
a CNN backbone: each cell only sees objects overlapping a small window
around it, and box-side offsets are clipped to that window, so a single
cell cannot recover the extent of a large object on its own.

Feature channels per cell (``feature_dim = C + 6 + L``)::

    [0, C)          per-class coverage of the cell window (max over objects)
    [C, C + 4)      clipped offsets (left, top, right, bottom) from the cell
                    centre to the sides of the dominant object, in cells
    C + 4           total coverage of the window
    C + 5           background flag (1 when no object touches the window)
    [C + 6, C+6+L)  level one-hot (noise-free)
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation
from .geometry import Box, LabeledObject

SMALL_AREA = 0.01
LARGE_AREA = 0.09
TRAIN_SEEDS = (0, 10_000)
VAL_SEEDS = (10_000, 10_500)
OFFSET_CLIP = 1.5


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 3
    min_objects: int = 1
    max_objects: int = 8
    # probability of drawing each size stratum (small, medium, large)
    strata: tuple = (0.4, 0.35, 0.25)
    min_area: float = 0.004
    max_area: float = 0.25
    max_aspect: float = 2.0
    levels: tuple = (16, 8, 4)
    noise: float = 0.05
    window: float = 2.0

    def __post_init__(self):
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 0 <= min_objects <= max_objects")
        p = np.asarray(self.strata, dtype=float)
        if p.shape != (3,) or np.any(p < 0) or p.sum() <= 0:
            raise ConfigError("strata must be three nonnegative weights")
        if not 0 < self.min_area < SMALL_AREA or self.max_area < LARGE_AREA and p[2] > 0:
            raise ConfigError("area range must cover the enabled strata")
        if self.n_classes < 1 or not self.levels:
            raise ConfigError("need at least one class and one level")

    @property
    def feature_dim(self):
        return self.n_classes + 6 + len(self.levels)


def size_stratum(area):
    """0 small, 1 medium, 2 large."""
    return 0 if area < SMALL_AREA else (1 if area < LARGE_AREA else 2)


@dataclass
class Scene:
    objects: list
    seed: int = -1
    extent: tuple = (1.0, 1.0)

    def __post_init__(self):
        for obj in self.objects:
            if not obj.box.is_valid():
                raise ContractViolation(f"invalid box {obj.box}")

    @property
    def boxes(self):
        return np.array([o.box for o in self.objects], dtype=np.float64).reshape(-1, 4)

    @property
    def labels(self):
        return np.array([o.category for o in self.objects], dtype=np.int64)

    def to_line(self):
        objs = [[int(o.category), *map(float, o.box)] for o in self.objects]
        return json.dumps({"seed": int(self.seed), "objects": objs})

    @classmethod
    def from_line(cls, line):
        rec = json.loads(line)
        objs = [LabeledObject(Box(*o[1:]), int(o[0])) for o in rec["objects"]]
        return cls(objs, int(rec["seed"]))


@dataclass
class FeaturePyramid:
    """Per level: ``features`` (g, g, F) and cell ``centers`` (g, g, 2) as (x, y)."""

    features: list
    centers: list
    scene: Scene = field(default=None, repr=False)

    @property
    def sizes(self):
        return [f.shape[0] for f in self.features]

    def flat(self):
        """All cells in (level, row, column) scan order.

        Returns features (P, F), positions (P, 2) and level indices (P,).
        """
        feats = np.concatenate([f.reshape(-1, f.shape[-1]) for f in self.features])
        pos = np.concatenate([c.reshape(-1, 2) for c in self.centers])
        lv = np.concatenate([np.full(f.shape[0] * f.shape[1], i) for i, f in enumerate(self.features)])
        return feats, pos, lv


def _sample_box(rng, stratum, cfg):
    lo = (cfg.min_area, SMALL_AREA, LARGE_AREA)[stratum]
    hi = (SMALL_AREA, LARGE_AREA, cfg.max_area)[stratum]
    area = rng.uniform(lo, min(hi, cfg.max_area))
    aspect = np.exp(rng.uniform(-np.log(cfg.max_aspect), np.log(cfg.max_aspect)))
    w = min(np.sqrt(area * aspect), 1.0)
    h = min(area / w, 1.0)
    cx = rng.uniform(w / 2, 1 - w / 2)
    cy = rng.uniform(h / 2, 1 - h / 2)
    return Box(cx, cy, w, h)


def generate_scene(rng, cfg=SynthConfig(), seed=-1):
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    p = np.asarray(cfg.strata, dtype=float)
    p = p / p.sum()
    objects = []
    for _ in range(n):
        cat = int(rng.integers(cfg.n_classes))
        stratum = int(rng.choice(3, p=p))
        objects.append(LabeledObject(_sample_box(rng, stratum, cfg), cat))
    return Scene(objects, seed)


def scene_for_seed(seed, cfg=SynthConfig()):
    return generate_scene(np.random.default_rng(seed), cfg, seed)


def split_seeds(split, count=None):
    lo, hi = {"train": TRAIN_SEEDS, "val": VAL_SEEDS}[split]
    if count is not None:
        if count > hi - lo:
            raise ConfigError(f"{split} split holds only {hi - lo} scenes")
        hi = lo + count
    return range(lo, hi)


def dataset(split, count, cfg=SynthConfig()):
    return [scene_for_seed(s, cfg) for s in split_seeds(split, count)]


def _level_features(scene, g, level, cfg):
    s = 1.0 / g
    c = (np.arange(g) + 0.5) * s
    cx, cy = np.meshgrid(c, c)  # rows index y
    half = 0.5 * cfg.window * s
    wx0, wx1, wy0, wy1 = cx - half, cx + half, cy - half, cy + half
    win_area = (2 * half) ** 2
    C = cfg.n_classes
    feat = np.zeros((g, g, cfg.feature_dim))
    best = np.zeros((g, g))
    total = np.zeros((g, g))
    for obj in scene.objects:
        x0, y0 = obj.box.cx - obj.box.w / 2, obj.box.cy - obj.box.h / 2
        x1, y1 = x0 + obj.box.w, y0 + obj.box.h
        ix = np.clip(np.minimum(wx1, x1) - np.maximum(wx0, x0), 0, None)
        iy = np.clip(np.minimum(wy1, y1) - np.maximum(wy0, y0), 0, None)
        cov = ix * iy / win_area
        k = obj.category
        feat[..., k] = np.maximum(feat[..., k], cov)
        total += cov
        dominant = cov > best
        offsets = np.stack([cx - x0, cy - y0, x1 - cx, y1 - cy], axis=-1) / s
        offsets = np.clip(offsets, -OFFSET_CLIP, OFFSET_CLIP)
        feat[..., C:C + 4] = np.where(dominant[..., None], offsets, feat[..., C:C + 4])
        best = np.where(dominant, cov, best)
    feat[..., C + 4] = np.minimum(total, 1.0)
    feat[..., C + 5] = (total == 0).astype(float)
    feat[..., C + 6 + level] = 1.0
    return feat, np.stack([cx, cy], axis=-1)


def featurize(scene, noise=None, cfg=SynthConfig()):
    """Deterministic pyramid for a scene; noise is seeded by the scene seed."""
    noise = cfg.noise if noise is None else noise
    rng = np.random.default_rng([max(scene.seed, 0), 7919])
    feats, centers = [], []
    n_evidence = cfg.n_classes + 6
    for level, g in enumerate(cfg.levels):
        f, c = _level_features(scene, g, level, cfg)
        if noise > 0:
            f[..., :n_evidence] += rng.normal(0.0, noise, size=(g, g, n_evidence))
        feats.append(f)
        centers.append(c)
    return FeaturePyramid(feats, centers, scene)


def write_scenes(path, scenes):
    with open(path, "w") as fh:
        for sc in scenes:
            fh.write(sc.to_line() + "\n")


def read_scenes(path):
    with open(path) as fh:
        return [Scene.from_line(line) for line in fh if line.strip()]
