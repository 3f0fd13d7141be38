"""Slice-wise cleanup of a delineated mandible mask.

The delineation stage hands over a single connected object that can still
carry two kinds of baggage: teeth sitting on top of the alveolar ridge, and
leaks where the object spilled into a neighbouring bone (typically the skull
base through the joint region).  Both show up as distinctive per-slice
patterns when the mask is walked from its inferior end to its superior end:

* the body of the mandible appears as one large component per slice,
* teeth slices suddenly show several components at once,
* a leak announces itself as an abrupt jump of the in-plane bounding box.

A five-state machine drives the walk.  Each axial slice is summarised by
:func:`slice_stats`, the machine decides which regime the slice belongs to,
and two local operations repair the mask where needed: anterior/posterior
k-means clustering strips the teeth, and an overlap test against the last
accepted slice prunes leaked components.  The full walk is recorded in a
:class:`StateTrace` so a run can be audited after the fact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .grid import Mask, label_components

__all__ = [
    "SliceStats",
    "RefineConfig",
    "TraceEntry",
    "StateTrace",
    "STATES",
    "slice_stats",
    "kmeans",
    "separate_teeth",
    "prune_leak",
    "run_state_machine",
    "refine",
    "save_trace",
]


# Machine states in their only legal order.  Transitions move forward
# (self-loops allowed) and "teeth" may be skipped entirely.
STATES = ("initial", "base", "teeth", "leak", "ending")

_ACTIONS = ("none", "teeth-separated", "leak-pruned")


@dataclass(frozen=True)
class SliceStats:
    """In-plane summary of one axial slice of a mask.

    Areas are physical (mm^2); width runs along x and height along y, both
    measured as the tight bounding box of the foreground and zero when the
    slice is empty.  Components use 8-adjacency in the plane.
    """

    z: int
    component_count: int
    component_areas_mm2: tuple[float, ...]
    total_area_mm2: float
    width_mm: float
    height_mm: float

    def to_dict(self) -> dict:
        return {
            "z": self.z,
            "component_count": self.component_count,
            "component_areas_mm2": list(self.component_areas_mm2),
            "total_area_mm2": self.total_area_mm2,
            "width_mm": self.width_mm,
            "height_mm": self.height_mm,
        }


@dataclass(frozen=True)
class RefineConfig:
    """Tunable thresholds for the slice-wise cleanup.

    base_area_mm2: a slice whose largest component reaches this area marks
        the start of the mandible body.
    teeth_component_count: component count from which a slice is treated as
        carrying teeth.
    abrupt_change_ratio: relative growth of slice width or height beyond
        which the machine declares a leak; must lie strictly in (0, 1).
    overlap_retention: fraction of a component's own area that must overlap
        the previous accepted slice for the component to survive pruning.
    anterior_low_y: orientation flag; when true the anterior side (where the
        teeth sit) is towards low y indices.
    retain_teeth: keep the separated teeth cluster in the output instead of
        dropping it.
    min_center_separation_mm: the anterior/posterior split is applied only
        when the two cluster centers are at least this far apart.
    """

    base_area_mm2: float = 300.0
    teeth_component_count: int = 3
    abrupt_change_ratio: float = 0.30
    overlap_retention: float = 0.5
    anterior_low_y: bool = True
    retain_teeth: bool = False
    min_center_separation_mm: float = 5.0

    def __post_init__(self):
        if self.base_area_mm2 <= 0:
            raise ValueError("base_area_mm2 must be positive")
        if self.teeth_component_count < 2:
            raise ValueError("teeth_component_count must be at least 2")
        if not 0.0 < self.abrupt_change_ratio < 1.0:
            raise ValueError("abrupt_change_ratio must lie in (0, 1)")
        if not 0.0 < self.overlap_retention <= 1.0:
            raise ValueError("overlap_retention must lie in (0, 1]")
        if self.min_center_separation_mm < 0:
            raise ValueError("min_center_separation_mm must be >= 0")


@dataclass(frozen=True)
class TraceEntry:
    """What the machine saw and did on one slice."""

    z: int
    state: str
    stats: SliceStats
    action: str = "none"

    def __post_init__(self):
        if self.state not in STATES:
            raise ValueError("unknown state %r" % self.state)
        if self.action not in _ACTIONS:
            raise ValueError("unknown action %r" % self.action)


@dataclass(frozen=True)
class StateTrace:
    """Complete record of a cleanup walk, one entry per axial slice."""

    entries: tuple[TraceEntry, ...]

    def states(self) -> list[str]:
        return [e.state for e in self.entries]

    def actions(self) -> list[str]:
        return [e.action for e in self.entries]

    def to_dict(self) -> dict:
        return {
            "slices": [
                {
                    "z": e.z,
                    "state": e.state,
                    "action": e.action,
                    "stats": e.stats.to_dict(),
                }
                for e in self.entries
            ]
        }


def slice_stats(m: Mask, z: int) -> SliceStats:
    """Summarise axial slice z of a mask (8-adjacent 2D components)."""
    nz = m.dims[2]
    if not 0 <= z < nz:
        raise ValueError("slice %d out of range for %d slices" % (z, nz))
    bits = m.data[:, :, z]
    sx, sy, _ = m.spacing
    pixel_mm2 = sx * sy
    _, sizes = label_components(bits, adjacency=8)
    areas = tuple(float(s) * pixel_mm2 for s in sizes)
    if bits.any():
        xs, ys = np.nonzero(bits)
        width = float(xs.max() - xs.min() + 1) * sx
        height = float(ys.max() - ys.min() + 1) * sy
    else:
        width = 0.0
        height = 0.0
    return SliceStats(
        z=z,
        component_count=len(sizes),
        component_areas_mm2=areas,
        total_area_mm2=float(sum(areas)),
        width_mm=width,
        height_mm=height,
    )


def kmeans(points: np.ndarray, k: int = 2, rng_seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic k-means: farthest-point init, Lloyd iterations.

    points has shape (n,) or (n, d).  Returns (centers, assignments) with
    centers sorted ascending by first coordinate and assignments remapped to
    match.  Initialisation is deterministic (first center is the
    lexicographically smallest point, the rest maximise the distance to the
    centers picked so far, scan order breaking ties), so rng_seed has no
    effect on the result; the parameter is kept so callers can pin a seed
    without caring about that detail.  Iteration stops when the assignment
    reaches a fixpoint, after 100 rounds at the latest.
    """
    del rng_seed
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2:
        raise ValueError("points must be 1D or 2D, got %dD" % np.ndim(points))
    n = len(pts)
    if k < 1:
        raise ValueError("k must be positive")
    if n < k:
        raise ValueError("k-means needs at least %d points, got %d" % (k, n))

    order = np.lexsort(pts.T[::-1])  # lexicographic by coordinate 0, 1, ...
    centers = pts[order[0]][None, :].copy()
    while len(centers) < k:
        d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2).min(axis=1)
        centers = np.vstack([centers, pts[int(np.argmax(d2))]])

    assign = np.full(n, -1, dtype=np.int64)
    for _ in range(100):
        d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)  # ties go to the lower index
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            sel = assign == j
            if sel.any():
                centers[j] = pts[sel].mean(axis=0)
            # an empty cluster keeps its previous center

    rank = np.argsort(centers[:, 0], kind="stable")
    centers = centers[rank]
    remap = np.empty(k, dtype=np.int64)
    remap[rank] = np.arange(k)
    assign = remap[assign]
    if centers.shape[1] == 1 and np.ndim(points) == 1:
        return centers[:, 0], assign
    return centers, assign


def separate_teeth(m: Mask, z: int, cfg: RefineConfig) -> tuple[np.ndarray, np.ndarray]:
    """Split slice z into a mandible part and a teeth part.

    Foreground pixels are clustered by their anterior-posterior coordinate
    (y, in mm); the anterior cluster is the teeth.  The split is refused,
    with everything kept as mandible, when the slice has fewer than two
    pixels or the two cluster centers come out closer than the configured
    separation, which guards against cutting a compact slice in half.
    Returns two 2D boolean arrays that partition the input slice.
    """
    nz = m.dims[2]
    if not 0 <= z < nz:
        raise ValueError("slice %d out of range for %d slices" % (z, nz))
    bits = m.data[:, :, z]
    teeth = np.zeros_like(bits)
    if bits.sum() < 2:
        return bits.copy(), teeth
    sy = m.spacing[1]
    xs, ys = np.nonzero(bits)
    centers, assign = kmeans(ys.astype(np.float64) * sy, k=2)
    if centers[1] - centers[0] < cfg.min_center_separation_mm:
        return bits.copy(), teeth
    anterior = 0 if cfg.anterior_low_y else 1
    sel = assign == anterior
    teeth[xs[sel], ys[sel]] = True
    mandible = bits & ~teeth
    return mandible, teeth


def prune_leak(bits: np.ndarray, prev_accepted: np.ndarray, cfg: RefineConfig) -> np.ndarray:
    """Drop 2D components that barely overlap the previous accepted slice.

    A component survives when the overlap with prev_accepted reaches the
    configured fraction of the component's own area.  An empty reference
    slice therefore prunes everything.
    """
    if bits.shape != prev_accepted.shape:
        raise ValueError("slice shapes differ: %r vs %r" % (bits.shape, prev_accepted.shape))
    labels, sizes = label_components(bits, adjacency=8)
    out = np.zeros_like(bits)
    for comp in range(1, len(sizes) + 1):
        sel = labels == comp
        overlap = int((sel & prev_accepted).sum())
        if overlap >= cfg.overlap_retention * int(sizes[comp - 1]):
            out |= sel
    return out


def _bbox_mm(bits: np.ndarray, sx: float, sy: float) -> tuple[float, float]:
    if not bits.any():
        return 0.0, 0.0
    xs, ys = np.nonzero(bits)
    return (
        float(xs.max() - xs.min() + 1) * sx,
        float(ys.max() - ys.min() + 1) * sy,
    )


def _walk(m: Mask, cfg: RefineConfig) -> tuple[np.ndarray, StateTrace]:
    """Run the state machine over every slice; returns (output bits, trace).

    The walk goes inferior to superior (ascending z).  Per slice the order
    of business is: summarise the incoming slice, take any state transition
    driven by those stats, separate teeth if the slice qualifies, then test
    the surviving content for an abrupt bounding-box blow-up against the
    last accepted non-empty output slice.  Growth beyond the configured
    ratio flips the machine into the leak state, where every slice is
    pruned by overlap.  An empty incoming slice after the body has been
    seen ends the walk; everything above is discarded.
    """
    if not m.data.any():
        raise ValueError("cannot refine an empty mask")
    sx, sy, _ = m.spacing
    nz = m.dims[2]
    out = np.zeros_like(m.data)
    state = "initial"
    ref_bits: np.ndarray | None = None  # last non-empty accepted output slice
    ref_wh: tuple[float, float] = (0.0, 0.0)
    entries = []
    for z in range(nz):
        stats = slice_stats(m, z)
        action = "none"

        if state == "initial" and stats.component_count:
            if max(stats.component_areas_mm2) >= cfg.base_area_mm2:
                state = "base"
        if state == "base" and stats.component_count >= cfg.teeth_component_count:
            state = "teeth"
        if state in ("base", "teeth", "leak") and stats.component_count == 0:
            state = "ending"

        if state == "ending":
            entries.append(TraceEntry(z=z, state=state, stats=stats, action=action))
            continue

        # The leak bookkeeping runs on the body lane: separated teeth are
        # set aside and, when retained, added back to the output only, so
        # they can neither trigger the growth test nor serve as reference.
        work = m.data[:, :, z].copy()
        extras = None
        if state == "teeth" and stats.component_count >= cfg.teeth_component_count:
            mandible, teeth = separate_teeth(m, z, cfg)
            if teeth.any():
                action = "teeth-separated"
                work = mandible
                if cfg.retain_teeth:
                    extras = teeth

        if state in ("base", "teeth") and ref_bits is not None and work.any():
            w, h = _bbox_mm(work, sx, sy)
            grown_w = w > (1.0 + cfg.abrupt_change_ratio) * ref_wh[0]
            grown_h = h > (1.0 + cfg.abrupt_change_ratio) * ref_wh[1]
            if grown_w or grown_h:
                state = "leak"

        if state == "leak" and ref_bits is not None:
            pruned = prune_leak(work, ref_bits, cfg)
            if not np.array_equal(pruned, work):
                action = "leak-pruned"
            work = pruned

        out[:, :, z] = work if extras is None else work | extras
        # Only body slices arm the leak reference; stray specks that slip
        # through before the base is reached must not masquerade as the
        # previous accepted slice.
        if work.any() and state != "initial":
            ref_bits = work
            ref_wh = _bbox_mm(work, sx, sy)
        entries.append(TraceEntry(z=z, state=state, stats=stats, action=action))
    return out, StateTrace(entries=tuple(entries))


def run_state_machine(m: Mask, cfg: RefineConfig | None = None) -> StateTrace:
    """Walk the mask and report the per-slice states without returning a mask."""
    _, trace = _walk(m, cfg or RefineConfig())
    return trace


def refine(m: Mask, cfg: RefineConfig | None = None) -> tuple[Mask, StateTrace]:
    """Clean up a delineated mask; the output is always a subset of the input."""
    out, trace = _walk(m, cfg or RefineConfig())
    return Mask(out, m.spacing), trace


def save_trace(trace: StateTrace, path) -> None:
    """Write a trace as stable, diff-friendly JSON."""
    with open(path, "w") as fh:
        json.dump(trace.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
