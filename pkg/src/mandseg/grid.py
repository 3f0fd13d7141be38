"""Voxel-grid primitives: volumes, masks, boxes, components, gradients.

Arrays are indexed [x, y, z] and the canonical linear ordering of voxels is
x-fastest (Fortran ravel), matching the on-disk layout of the raw and NIfTI
readers.  All structured types are treated as immutable after construction;
their arrays are flagged read-only to enforce that.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


def _validate_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3:
        raise ValueError("spacing must have 3 entries, got %d" % len(spacing))
    if any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise ValueError("spacing must be positive, got %r" % (spacing,))
    return spacing


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar grid (HU for CT input, nonnegative reals for gradients)."""

    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError("volume data must be 3D, got %dD" % data.ndim)
        if min(data.shape) < 1:
            raise ValueError("volume dims must be >= 1, got %r" % (data.shape,))
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _validate_spacing(self.spacing))
        data.setflags(write=False)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz


@dataclass(frozen=True, eq=False)
class Mask:
    """A 3D boolean grid with the same layout conventions as Volume."""

    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != np.bool_:
            raise ValueError("mask data must be boolean, got %s" % data.dtype)
        if data.ndim != 3:
            raise ValueError("mask data must be 3D, got %dD" % data.ndim)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _validate_spacing(self.spacing))
        data.setflags(write=False)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in voxel indices, inclusive on both ends."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        lo = tuple(int(v) for v in self.lo)
        hi = tuple(int(v) for v in self.hi)
        if len(lo) != 3 or len(hi) != 3:
            raise ValueError("box corners must have 3 entries")
        if any(l < 0 for l in lo) or any(h < l for l, h in zip(lo, hi)):
            raise ValueError("invalid box lo=%r hi=%r" % (lo, hi))
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    @property
    def voxel_count(self) -> int:
        ex, ey, ez = self.extents
        return ex * ey * ez

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(l, h + 1) for l, h in zip(self.lo, self.hi))

    def contains(self, coord) -> bool:
        return all(l <= c <= h for l, c, h in zip(self.lo, coord, self.hi))

    def expand(self, margin: int, dims: tuple[int, int, int]) -> "BoundingBox":
        """Grow by `margin` voxels per side, clamped to [0, dims)."""
        lo = tuple(max(0, l - margin) for l in self.lo)
        hi = tuple(min(d - 1, h + margin) for h, d in zip(self.hi, dims))
        return BoundingBox(lo, hi)

    def intersection_voxels(self, other: "BoundingBox") -> int:
        n = 1
        for al, ah, bl, bh in zip(self.lo, self.hi, other.lo, other.hi):
            lo = max(al, bl)
            hi = min(ah, bh)
            if hi < lo:
                return 0
            n *= hi - lo + 1
        return n

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundingBox":
        return cls(tuple(d["lo"]), tuple(d["hi"]))


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Connected-component labels (0 = background, 1..K in scan order)."""

    labels: np.ndarray
    sizes: np.ndarray  # sizes[k-1] = voxel count of component k

    @property
    def n_components(self) -> int:
        return len(self.sizes)


_ADJ_3D = {6: 1, 18: 2, 26: 3}
_ADJ_2D = {4: 1, 8: 2}


def neighbor_offsets(adjacency: int, ndim: int = 3) -> np.ndarray:
    """Offset table for an adjacency, in a fixed canonical order.

    3D accepts 6/18/26, 2D accepts 4/8.  Offsets are ordered by nested
    (dz, dy, dx) loops so relaxation order is reproducible.
    """
    if ndim == 3:
        if adjacency not in _ADJ_3D:
            raise ValueError("3D adjacency must be 6, 18 or 26, got %r" % adjacency)
        out = []
        for dz in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    if dx == dy == dz == 0:
                        continue
                    nonzero = (dx != 0) + (dy != 0) + (dz != 0)
                    if adjacency == 6 and nonzero > 1:
                        continue
                    if adjacency == 18 and nonzero > 2:
                        continue
                    out.append((dx, dy, dz))
        return np.array(out, dtype=np.int64)
    if ndim == 2:
        if adjacency not in _ADJ_2D:
            raise ValueError("2D adjacency must be 4 or 8, got %r" % adjacency)
        out = []
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dx == dy == 0:
                    continue
                if adjacency == 4 and dx != 0 and dy != 0:
                    continue
                out.append((dx, dy))
        return np.array(out, dtype=np.int64)
    raise ValueError("ndim must be 2 or 3")


def axis_slice(arr: np.ndarray, axis: int, index: int) -> np.ndarray:
    """2D view of a 3D array at `index` along `axis` (0=x, 1=y, 2=z)."""
    if axis == 0:
        return arr[index, :, :]
    if axis == 1:
        return arr[:, index, :]
    if axis == 2:
        return arr[:, :, index]
    raise ValueError("axis must be 0, 1 or 2, got %r" % axis)


def gradient_magnitude(v: Volume) -> Volume:
    """Euclidean norm of central differences, scaled to per-mm units.

    Borders use one-sided differences; axes of length 1 contribute zero.
    """
    data = v.data.astype(np.float64, copy=False)
    g2 = np.zeros(v.dims, dtype=np.float64)
    for axis in range(3):
        if v.dims[axis] > 1:
            d = np.gradient(data, v.spacing[axis], axis=axis)
            g2 += d * d
    return Volume(np.sqrt(g2), v.spacing)


def threshold(v: Volume, lo: float, hi: float = np.inf) -> Mask:
    """Mask of voxels with lo <= value <= hi (both ends inclusive)."""
    if lo > hi:
        raise ValueError("threshold lo %r exceeds hi %r" % (lo, hi))
    bits = (v.data >= lo) & (v.data <= hi)
    return Mask(bits, v.spacing)


def crop(v: Volume, box: BoundingBox) -> Volume:
    """Copy of the sub-volume covered by `box` (box must fit the dims)."""
    for h, d in zip(box.hi, v.dims):
        if h >= d:
            raise ValueError("box %r exceeds volume dims %r" % (box, v.dims))
    return Volume(v.data[box.slices()].copy(), v.spacing)


def crop_mask(m: Mask, box: BoundingBox) -> Mask:
    for h, d in zip(box.hi, m.dims):
        if h >= d:
            raise ValueError("box %r exceeds mask dims %r" % (box, m.dims))
    return Mask(m.data[box.slices()].copy(), m.spacing)


def tight_box(m: Mask) -> BoundingBox:
    """Smallest box containing all foreground voxels; error if mask empty."""
    if not m.data.any():
        raise ValueError("cannot take tight box of an empty mask")
    lo = []
    hi = []
    for axis in range(3):
        proj = m.data.any(axis=tuple(a for a in range(3) if a != axis))
        idx = np.flatnonzero(proj)
        lo.append(int(idx[0]))
        hi.append(int(idx[-1]))
    return BoundingBox(tuple(lo), tuple(hi))


def _scan_order_relabel(raw: np.ndarray, n_raw: int) -> tuple[np.ndarray, np.ndarray]:
    """Renumber labels so component k is the k-th encountered in x-fastest scan."""
    labels = np.zeros(raw.shape, dtype=np.int32)
    if n_raw == 0:
        return labels, np.zeros(0, dtype=np.int64)
    flat = raw.ravel(order="F")
    fg = np.flatnonzero(flat)
    vals = flat[fg]
    uniq, first = np.unique(vals, return_index=True)
    order = np.argsort(first, kind="stable")
    lut = np.zeros(n_raw + 1, dtype=np.int32)
    lut[uniq[order]] = np.arange(1, len(uniq) + 1, dtype=np.int32)
    labels_flat = lut[flat]
    labels = labels_flat.reshape(raw.shape, order="F")
    sizes = np.bincount(labels_flat, minlength=len(uniq) + 1)[1:].astype(np.int64)
    return labels, sizes


def label_components(bits: np.ndarray, adjacency: int) -> tuple[np.ndarray, np.ndarray]:
    """Label a 2D or 3D boolean array; returns (labels, sizes).

    Labels are assigned in order of first encounter along the canonical
    x-fastest scan, so the numbering is deterministic for a given input.
    """
    bits = np.asarray(bits)
    if bits.dtype != np.bool_:
        raise ValueError("expected boolean array, got %s" % bits.dtype)
    if bits.ndim == 3:
        conn = _ADJ_3D.get(adjacency)
    elif bits.ndim == 2:
        conn = _ADJ_2D.get(adjacency)
    else:
        raise ValueError("expected 2D or 3D array, got %dD" % bits.ndim)
    if conn is None:
        raise ValueError("adjacency %r invalid for %dD" % (adjacency, bits.ndim))
    structure = ndimage.generate_binary_structure(bits.ndim, conn)
    raw, n_raw = ndimage.label(bits, structure=structure)
    return _scan_order_relabel(raw, n_raw)


def connected_components(m: Mask, adjacency: int = 26, z: int | None = None) -> LabelMap:
    """Connected components of a mask, 3D by default or one axial slice.

    With z=None labels the whole mask (adjacency 6/18/26); with z given
    labels slice z in-plane (adjacency 4/8).
    """
    if z is None:
        labels, sizes = label_components(m.data, adjacency)
    else:
        if not 0 <= z < m.dims[2]:
            raise ValueError("slice index %r outside z range [0, %d)" % (z, m.dims[2]))
        labels, sizes = label_components(m.data[:, :, z], adjacency)
    return LabelMap(labels, sizes)
