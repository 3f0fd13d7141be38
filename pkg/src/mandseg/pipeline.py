"""End-to-end segmentation: recognition, delineation, cleanup.

This module wires the stages together for one volume at a time: the three
per-axis forests locate the mandible and fuse their votes into a bounding
box, fuzzy connectedness grows the object from an automatically picked seed
inside the cropped box, and the slice-wise state machine strips teeth and
leaks from the result.  Everything configurable lives in
:class:`PipelineConfig`, which round-trips through JSON so a run can be
reproduced from its config file alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import fc
from .grid import BoundingBox, Mask, Volume, crop, gradient_magnitude
from .recognition import (
    Forest,
    ForestHyperparams,
    RecognitionConfig,
    extract_axis_features,
    fuse_to_bbox,
    make_labels,
    score_axis,
    train_forest,
)
from .refine import RefineConfig, StateTrace, refine

__all__ = [
    "PipelineConfig",
    "SegmentationResult",
    "run_segmentation",
    "train_axis_forests",
]

# Tree seeds inside one forest are consecutive, so the per-axis base seeds
# must sit far apart to keep the three forests independent.
_AXIS_SEED_STRIDE = 10_000


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of a segmentation run, serializable as one JSON object.

    sigma=None means the affinity scale is estimated from the cropped
    volume's bone boundary; a positive value pins it.  Face adjacency (6) is
    the default link structure: diagonal links give a staircase boundary the
    same affinity as the wall it belongs to, which lets the object bleed
    across corners at any threshold that keeps the wall itself.
    """

    recognition: RecognitionConfig = field(default_factory=RecognitionConfig)
    sigma: float | None = None
    theta: float = fc.DEFAULT_THETA
    adjacency: int = 6
    refinement: RefineConfig = field(default_factory=RefineConfig)
    apply_refinement: bool = True
    output_dir: str | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError("sigma must be positive or None, got %r" % (self.sigma,))
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("theta must lie in (0, 1], got %r" % (self.theta,))
        if self.adjacency not in (6, 18, 26):
            raise ValueError("adjacency must be 6, 18 or 26, got %r" % (self.adjacency,))

    def to_dict(self) -> dict:
        r = self.recognition
        f = self.refinement
        return {
            "recognition": {
                "score_threshold": r.score_threshold,
                "gap_bridge": r.gap_bridge,
                "padding": r.padding,
                "min_positive_voxels": r.min_positive_voxels,
            },
            "sigma": self.sigma,
            "theta": self.theta,
            "adjacency": self.adjacency,
            "refinement": {
                "base_area_mm2": f.base_area_mm2,
                "teeth_component_count": f.teeth_component_count,
                "abrupt_change_ratio": f.abrupt_change_ratio,
                "overlap_retention": f.overlap_retention,
                "anterior_low_y": f.anterior_low_y,
                "retain_teeth": f.retain_teeth,
                "min_center_separation_mm": f.min_center_separation_mm,
            },
            "apply_refinement": self.apply_refinement,
            "output_dir": self.output_dir,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return cls(
            recognition=RecognitionConfig(**d.get("recognition", {})),
            sigma=d.get("sigma"),
            theta=d.get("theta", fc.DEFAULT_THETA),
            adjacency=d.get("adjacency", 6),
            refinement=RefineConfig(**d.get("refinement", {})),
            apply_refinement=d.get("apply_refinement", True),
            output_dir=d.get("output_dir"),
            rng_seed=d.get("rng_seed", 0),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True, eq=False)
class SegmentationResult:
    """Everything a segmentation run produced, resolved values included."""

    mask: Mask
    fc_mask: Mask
    box: BoundingBox
    seed_voxel: tuple[int, int, int]
    sigma: float
    theta: float
    adjacency: int
    trace: StateTrace | None
    connectivity: fc.ConnectivityMap

    def run_record(self) -> dict:
        """Resolved parameters of the run, for the run log."""
        return {
            "box": {"lo": list(self.box.lo), "hi": list(self.box.hi)},
            "seed_voxel": list(self.seed_voxel),
            "sigma": self.sigma,
            "theta": self.theta,
            "adjacency": self.adjacency,
            "refined": self.trace is not None,
            "mask_voxels": self.mask.count,
            "fc_voxels": self.fc_mask.count,
        }


def run_segmentation(
    v: Volume,
    forests: tuple[Forest, Forest, Forest],
    cfg: PipelineConfig | None = None,
) -> SegmentationResult:
    """Segment one volume with pre-trained per-axis forests.

    Raises RecognitionError when no axis interval reaches the score
    threshold and DelineationError when the located box contains no bone to
    seed from; both carry enough context to report the failing stage.
    """
    cfg = cfg or PipelineConfig()
    scores = [score_axis(v, axis, forests[axis]) for axis in range(3)]
    box = fuse_to_bbox(scores[0], scores[1], scores[2], cfg.recognition)

    sub = crop(v, box)
    grad = gradient_magnitude(sub)
    if cfg.sigma is not None:
        sigma = float(cfg.sigma)
    else:
        bone = Mask(sub.data >= fc.BONE_HU, sub.spacing)
        sigma = fc.estimate_sigma(grad, bone)
    seed = fc.select_seed(v, box)
    local_seed = tuple(s - l for s, l in zip(seed, box.lo))
    conn = fc.compute_connectivity(grad, local_seed, fc.AffinityParams(sigma, cfg.adjacency))
    local_mask = fc.threshold_object(conn, cfg.theta)

    full = np.zeros(v.dims, dtype=bool)
    full[box.slices()] = local_mask.data
    fc_mask = Mask(full, v.spacing)

    if cfg.apply_refinement:
        mask, trace = refine(fc_mask, cfg.refinement)
    else:
        mask, trace = fc_mask, None
    return SegmentationResult(
        mask=mask,
        fc_mask=fc_mask,
        box=box,
        seed_voxel=seed,
        sigma=sigma,
        theta=cfg.theta,
        adjacency=cfg.adjacency,
        trace=trace,
        connectivity=conn,
    )


def train_axis_forests(
    cases: list[tuple[Volume, Mask]],
    hp: ForestHyperparams | None = None,
    rng_seed: int = 0,
    min_positive_voxels: int = 10,
) -> tuple[Forest, Forest, Forest]:
    """Train the three per-axis slice regressors from (volume, gt) pairs."""
    if not cases:
        raise ValueError("need at least one training case")
    for v, gt in cases:
        if v.dims != gt.dims:
            raise ValueError("volume dims %r != gt dims %r" % (v.dims, gt.dims))
    forests = []
    for axis in range(3):
        X = np.vstack([extract_axis_features(v, axis) for v, _ in cases])
        y = np.concatenate([make_labels(gt, axis, min_positive_voxels) for _, gt in cases])
        forests.append(train_forest(X, y, hp, rng_seed + _AXIS_SEED_STRIDE * axis))
    return tuple(forests)
