"""Slice-level mandible recognition.

Each 2D slice of a CT volume is summarized by a fixed 40-value feature
vector; a regression forest per anatomical axis scores how likely a slice is
to intersect the mandible, and the three score profiles are fused into one
bounding box.  The forest is grown here rather than borrowed from a library
because training must be bit-reproducible from a seed (fixed tie-breaking,
per-tree seeds derived as rng_seed + tree index) and the model file format is
part of the package contract.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .grid import BoundingBox, Mask, Volume, axis_slice, label_components

HIST_RANGE = (-1000.0, 3000.0)
HIST_BINS = 32
FRACTION_HU = (200.0, 600.0, 1100.0)
COMPONENT_HU = 600.0
FEATURE_LENGTH = HIST_BINS + len(FRACTION_HU) + 5

AXIS_NAMES = {0: "sagittal", 1: "coronal", 2: "axial"}

FOREST_FORMAT = "mandseg-forest"
FOREST_VERSION = 1


class RecognitionError(Exception):
    """Raised when no plausible mandible region can be located."""


def extract_features(slice2d: np.ndarray) -> np.ndarray:
    """40-value summary of one slice.

    Layout: 32-bin HU histogram over [-1000, 3000] (values clipped, bins
    normalized to sum 1), fractions of pixels at or above 200/600/1100 HU,
    count of 8-connected components at or above 600 HU, HU mean and standard
    deviation, and the centroid of pixels >= 600 HU normalized to [0, 1] per
    in-plane axis (0.5, 0.5 when there are none).
    """
    px = np.asarray(slice2d, dtype=np.float64)
    if px.ndim != 2 or px.size == 0:
        raise ValueError("expected a nonempty 2D slice")
    flat = px.ravel()
    hist = np.histogram(np.clip(flat, *HIST_RANGE), bins=HIST_BINS, range=HIST_RANGE)[0]
    out = np.empty(FEATURE_LENGTH, dtype=np.float64)
    out[:HIST_BINS] = hist / flat.size
    pos = HIST_BINS
    for hu in FRACTION_HU:
        out[pos] = (flat >= hu).mean()
        pos += 1
    bone = px >= COMPONENT_HU
    _labels, sizes = label_components(bone, adjacency=8)
    out[pos] = len(sizes)
    out[pos + 1] = flat.mean()
    out[pos + 2] = flat.std()
    if bone.any():
        centroid = np.argwhere(bone).mean(axis=0)
        for a in range(2):
            span = px.shape[a] - 1
            out[pos + 3 + a] = centroid[a] / span if span > 0 else 0.5
    else:
        out[pos + 3 : pos + 5] = 0.5
    return out


def extract_axis_features(v: Volume, axis: int) -> np.ndarray:
    """Feature matrix (n_slices, FEATURE_LENGTH) along an axis."""
    n = v.dims[axis]
    return np.stack([extract_features(axis_slice(v.data, axis, i)) for i in range(n)])


def make_labels(gt: Mask, axis: int, min_positive_voxels: int = 10) -> np.ndarray:
    """1 for slices the GT meaningfully intersects, else 0."""
    if min_positive_voxels < 1:
        raise ValueError("min_positive_voxels must be >= 1")
    other = tuple(a for a in range(3) if a != axis)
    counts = gt.data.sum(axis=other)
    return (counts >= min_positive_voxels).astype(np.float64)


# -- regression forest -------------------------------------------------------

@dataclass(frozen=True)
class ForestHyperparams:
    n_trees: int = 50
    max_depth: int = 12
    min_leaf: int = 5
    features_per_split: int | None = None  # default: ceil(sqrt(n_features))
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1 or self.min_leaf < 1:
            raise ValueError("forest hyperparameters must be positive")
        if self.features_per_split is not None and self.features_per_split < 1:
            raise ValueError("features_per_split must be >= 1")

    def resolve_mtry(self, n_features: int) -> int:
        if self.features_per_split is not None:
            return min(self.features_per_split, n_features)
        return min(math.ceil(math.sqrt(n_features)), n_features)


@dataclass(frozen=True, eq=False)
class Tree:
    """Flat-array binary regression tree (feature -1 marks a leaf)."""

    feature: np.ndarray
    thresh: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, x: np.ndarray) -> float:
        node = 0
        while self.feature[node] >= 0:
            if x[self.feature[node]] <= self.thresh[node]:
                node = self.left[node]
            else:
                node = self.right[node]
        return float(self.value[node])


@dataclass(frozen=True, eq=False)
class Forest:
    trees: tuple
    n_features: int
    hyperparams: ForestHyperparams
    rng_seed: int

    def predict(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.n_features,):
            raise ValueError("expected %d features, got shape %r" % (self.n_features, x.shape))
        return float(np.mean([t.predict(x) for t in self.trees]))

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return np.array([self.predict(row) for row in X])


class _TreeBuilder:
    def __init__(self, X, y, hp, mtry, rng):
        self.X = X
        self.y = y
        self.hp = hp
        self.mtry = mtry
        self.rng = rng
        self.feature = []
        self.thresh = []
        self.left = []
        self.right = []
        self.value = []

    def _new_node(self) -> int:
        self.feature.append(-1)
        self.thresh.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        return len(self.feature) - 1

    def _best_split(self, idx):
        """Best (gain, feature, threshold) among a random feature subset.

        Ties are broken toward the lowest feature index, then the lowest
        threshold, which the ascending scan order gives for free.
        """
        X, y, min_leaf = self.X, self.y, self.hp.min_leaf
        n = len(idx)
        ysub = y[idx]
        total = ysub.sum()
        sse_total = (ysub * ysub).sum() - total * total / n
        d = X.shape[1]
        feats = np.sort(self.rng.choice(d, size=self.mtry, replace=False))
        best_gain = 0.0
        best = None
        for f in feats:
            xs = X[idx, f]
            order = np.argsort(xs, kind="stable")
            xs_s = xs[order]
            ys_s = ysub[order]
            csum = np.cumsum(ys_s)
            csq = np.cumsum(ys_s * ys_s)
            splits = np.arange(min_leaf, n - min_leaf + 1)
            splits = splits[xs_s[splits - 1] < xs_s[splits]]
            if splits.size == 0:
                continue
            ls = csum[splits - 1]
            lq = csq[splits - 1]
            sse_l = lq - ls * ls / splits
            rs = total - ls
            sse_r = (csq[-1] - lq) - rs * rs / (n - splits)
            gains = sse_total - sse_l - sse_r
            k = int(np.argmax(gains))
            if gains[k] > best_gain:
                best_gain = float(gains[k])
                i = splits[k]
                best = (f, 0.5 * (xs_s[i - 1] + xs_s[i]))
        if best is None:
            return None
        return best_gain, best[0], best[1]

    def grow(self, idx, depth) -> int:
        node = self._new_node()
        ysub = self.y[idx]
        self.value[node] = float(ysub.mean())
        if (
            depth >= self.hp.max_depth
            or len(idx) < 2 * self.hp.min_leaf
            or ysub.min() == ysub.max()
        ):
            return node
        split = self._best_split(idx)
        if split is None:
            return node
        _gain, f, thr = split
        go_left = self.X[idx, f] <= thr
        self.feature[node] = int(f)
        self.thresh[node] = float(thr)
        self.left[node] = self.grow(idx[go_left], depth + 1)
        self.right[node] = self.grow(idx[~go_left], depth + 1)
        return node

    def build(self) -> Tree:
        return Tree(
            np.array(self.feature, dtype=np.int32),
            np.array(self.thresh, dtype=np.float64),
            np.array(self.left, dtype=np.int32),
            np.array(self.right, dtype=np.int32),
            np.array(self.value, dtype=np.float64),
        )


def train_forest(X: np.ndarray, y: np.ndarray, hp: ForestHyperparams | None = None, rng_seed: int = 0) -> Forest:
    """Variance-reduction regression forest; tree i is seeded with rng_seed + i."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be (n, d) and y (n,) with matching n")
    if X.shape[0] < 1:
        raise ValueError("training set is empty")
    hp = hp or ForestHyperparams()
    n, d = X.shape
    mtry = hp.resolve_mtry(d)
    trees = []
    for i in range(hp.n_trees):
        rng = np.random.default_rng(rng_seed + i)
        idx = rng.integers(0, n, size=n) if hp.bootstrap else np.arange(n)
        builder = _TreeBuilder(X, y, hp, mtry, rng)
        builder.grow(idx, 0)
        trees.append(builder.build())
    return Forest(tuple(trees), d, hp, rng_seed)


# -- forest serialization ----------------------------------------------------

def forest_to_dict(forest: Forest, axis: int) -> dict:
    return {
        "format": FOREST_FORMAT,
        "version": FOREST_VERSION,
        "axis": AXIS_NAMES[axis],
        "n_features": forest.n_features,
        "rng_seed": forest.rng_seed,
        "hyperparams": {
            "n_trees": forest.hyperparams.n_trees,
            "max_depth": forest.hyperparams.max_depth,
            "min_leaf": forest.hyperparams.min_leaf,
            "features_per_split": forest.hyperparams.features_per_split,
            "bootstrap": forest.hyperparams.bootstrap,
        },
        "trees": [
            {
                "feature": t.feature.tolist(),
                "thresh": t.thresh.tolist(),
                "left": t.left.tolist(),
                "right": t.right.tolist(),
                "value": t.value.tolist(),
            }
            for t in forest.trees
        ],
    }


def save_forest(forest: Forest, axis: int, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(forest_to_dict(forest, axis), fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_forest(path: str) -> tuple[Forest, int]:
    """Load a forest file; returns (forest, axis index)."""
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("format") != FOREST_FORMAT:
        raise ValueError("%s is not a forest file" % path)
    if obj.get("version") != FOREST_VERSION:
        raise ValueError("unsupported forest file version %r" % obj.get("version"))
    hp = ForestHyperparams(**obj["hyperparams"])
    trees = tuple(
        Tree(
            np.array(t["feature"], dtype=np.int32),
            np.array(t["thresh"], dtype=np.float64),
            np.array(t["left"], dtype=np.int32),
            np.array(t["right"], dtype=np.int32),
            np.array(t["value"], dtype=np.float64),
        )
        for t in obj["trees"]
    )
    forest = Forest(trees, int(obj["n_features"]), hp, int(obj["rng_seed"]))
    axis = {name: a for a, name in AXIS_NAMES.items()}[obj["axis"]]
    return forest, axis


# -- scoring and fusion ------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AxisScores:
    axis: int
    scores: np.ndarray

    @property
    def axis_name(self) -> str:
        return AXIS_NAMES[self.axis]


@dataclass(frozen=True)
class RecognitionConfig:
    score_threshold: float = 0.5
    gap_bridge: int = 2
    padding: int = 3
    min_positive_voxels: int = 10

    def __post_init__(self):
        if not 0 < self.score_threshold <= 1:
            raise ValueError("score_threshold must lie in (0, 1]")
        if self.gap_bridge < 0 or self.padding < 0:
            raise ValueError("gap_bridge and padding must be >= 0")


def score_axis(v: Volume, axis: int, forest: Forest) -> AxisScores:
    """Per-slice mandible scores along an axis, each in [0, 1]."""
    return AxisScores(axis, forest.predict_batch(extract_axis_features(v, axis)))


def _score_interval(scores: np.ndarray, cfg: RecognitionConfig, axis: int) -> tuple[int, int]:
    on = scores >= cfg.score_threshold
    hits = np.flatnonzero(on)
    if hits.size == 0:
        raise RecognitionError(
            "mandible not found: no %s slice scored >= %g" % (AXIS_NAMES[axis], cfg.score_threshold)
        )
    for a, b in zip(hits[:-1], hits[1:]):
        if 0 < b - a - 1 <= cfg.gap_bridge:
            on[a:b] = True
    hits = np.flatnonzero(on)
    breaks = np.flatnonzero(np.diff(hits) > 1)
    starts = np.concatenate(([0], breaks + 1))
    ends = np.concatenate((breaks, [hits.size - 1]))
    lengths = ends - starts
    k = int(np.argmax(lengths))
    lo = int(hits[starts[k]]) - cfg.padding
    hi = int(hits[ends[k]]) + cfg.padding
    return max(0, lo), min(len(scores) - 1, hi)


def fuse_to_bbox(sx: AxisScores, sy: AxisScores, sz: AxisScores, cfg: RecognitionConfig) -> BoundingBox:
    """Fuse per-axis score profiles into one padded bounding box.

    Per axis: binarize at the score threshold, bridge sub-threshold gaps of at
    most gap_bridge slices, keep the longest run (first on ties), then pad and
    clamp.  Raises RecognitionError when an axis has no above-threshold slice.
    """
    if (sx.axis, sy.axis, sz.axis) != (0, 1, 2):
        raise ValueError("expected axis scores in (sagittal, coronal, axial) order")
    intervals = [_score_interval(s.scores, cfg, s.axis) for s in (sx, sy, sz)]
    lo = tuple(iv[0] for iv in intervals)
    hi = tuple(iv[1] for iv in intervals)
    return BoundingBox(lo, hi)
