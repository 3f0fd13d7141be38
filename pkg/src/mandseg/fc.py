"""Fuzzy-connectedness delineation on gradient-magnitude volumes.

Adjacent voxels p, q are linked with affinity exp(-m^2 / (2 sigma^2)) where
m is the mean of their gradient magnitudes; the strength of a path is the
minimum link affinity along it, and the connectivity of a voxel is the
maximum strength over all paths from the seed.  The map is computed exactly
by best-first propagation (a max-heap Dijkstra variant compiled with numba);
`brute_force_connectivity` recomputes it by descending-threshold union-find
as an independent cross-check for small volumes.

All propagation paths consume one shared table of link affinities built by
`link_affinities`, so the kernel, the oracle and any fixed-point checks see
bit-identical link values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .grid import BoundingBox, Mask, Volume, label_components, neighbor_offsets

BONE_HU = 600.0
DEFAULT_THETA = 0.72
_ORACLE_MAX_VOXELS = 512


class DelineationError(Exception):
    """Raised when delineation cannot proceed (no seed, no sigma estimate)."""


@dataclass(frozen=True)
class AffinityParams:
    sigma: float
    adjacency: int = 26

    def __post_init__(self):
        if not np.isfinite(self.sigma) or self.sigma <= 0:
            raise ValueError("sigma must be positive and finite, got %r" % self.sigma)
        if self.adjacency not in (6, 18, 26):
            raise ValueError("adjacency must be 6, 18 or 26, got %r" % self.adjacency)


@dataclass(frozen=True, eq=False)
class ConnectivityMap:
    """Per-voxel connectivity strength in [0, 1]; 1 at the seed."""

    strength: np.ndarray
    spacing: tuple[float, float, float]
    seed: tuple[int, int, int]

    def __post_init__(self):
        self.strength.setflags(write=False)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.strength.shape


def affinity(gp: float, gq: float, params: AffinityParams) -> float:
    """Link affinity of two adjacent voxels from their gradient magnitudes.

    Evaluates with the same operation order as link_affinities (multiply by
    the precomputed reciprocal) so both produce bit-identical values.
    """
    if gp < 0 or gq < 0:
        raise ValueError("gradient magnitudes must be nonnegative")
    m = 0.5 * (gp + gq)
    inv = 1.0 / (2.0 * params.sigma * params.sigma)
    return float(np.exp(-(m * m) * inv))


def path_strength(affinities) -> float:
    """Strength of a path = weakest link affinity along it."""
    values = [float(a) for a in affinities]
    if not values:
        raise ValueError("path must contain at least one link")
    if any(a < 0 or a > 1 for a in values):
        raise ValueError("affinities must lie in [0, 1]")
    return min(values)


def link_affinities(grad: Volume, params: AffinityParams) -> tuple[np.ndarray, np.ndarray]:
    """Affinity table aff[k, i] for voxel i and its k-th neighbor offset.

    Returns (aff, offsets) where aff has shape (K, N) over x-fastest linear
    indices and offsets is the (K, 3) table from neighbor_offsets.  Entries
    whose neighbor falls outside the volume are 0 and never read by the
    propagation (it bounds-checks coordinates).
    """
    g = grad.data.astype(np.float64, copy=False)
    if g.size and float(g.min()) < 0:
        raise ValueError("gradient volume contains negative values")
    offsets = neighbor_offsets(params.adjacency)
    dims = grad.dims
    inv = 1.0 / (2.0 * params.sigma * params.sigma)
    aff = np.zeros((len(offsets), g.size), dtype=np.float64)
    for k, (dx, dy, dz) in enumerate(offsets):
        dst = tuple(slice(max(0, -d), dims[a] - max(0, d)) for a, d in enumerate((dx, dy, dz)))
        src = tuple(slice(max(0, d), dims[a] + min(0, d)) for a, d in enumerate((dx, dy, dz)))
        m = 0.5 * (g[dst] + g[src])
        block = np.zeros(dims, dtype=np.float64)
        block[dst] = np.exp(-(m * m) * inv)
        aff[k] = block.ravel(order="F")
    return aff, offsets


def estimate_sigma(grad: Volume, bone: Mask) -> float:
    """Scale for the affinity kernel: median gradient on the bone boundary.

    Boundary voxels are bone voxels with at least one in-bounds non-bone
    6-neighbor.  Falls back to the median over all nonzero gradients when the
    boundary is empty or its median is zero.
    """
    if grad.dims != bone.dims:
        raise ValueError("gradient dims %r != bone mask dims %r" % (grad.dims, bone.dims))
    b = bone.data
    boundary = np.zeros(b.shape, dtype=bool)
    for dx, dy, dz in neighbor_offsets(6):
        dst = tuple(slice(max(0, -d), b.shape[a] - max(0, d)) for a, d in enumerate((dx, dy, dz)))
        src = tuple(slice(max(0, d), b.shape[a] + min(0, d)) for a, d in enumerate((dx, dy, dz)))
        boundary[dst] |= b[dst] & ~b[src]
    sigma = 0.0
    if boundary.any():
        sigma = float(np.median(grad.data[boundary]))
    if sigma <= 0:
        nonzero = grad.data[grad.data > 0]
        if nonzero.size == 0:
            raise DelineationError("cannot estimate sigma: gradient volume has no support")
        sigma = float(np.median(nonzero))
    return sigma


def select_seed(v: Volume, box: BoundingBox) -> tuple[int, int, int]:
    """Seed voxel: brightest voxel of the largest bone component in the box.

    Bone is HU >= 600; components use 26-adjacency; intensity ties are broken
    by smallest (z, y, x).  The returned coordinate is in whole-volume indices.
    """
    for h, d in zip(box.hi, v.dims):
        if h >= d:
            raise ValueError("box %r exceeds volume dims %r" % (box, v.dims))
    sub = v.data[box.slices()]
    bits = sub >= BONE_HU
    if not bits.any():
        raise DelineationError("no seed: no voxel at or above %g HU inside the box" % BONE_HU)
    labels, sizes = label_components(bits, adjacency=26)
    comp = labels == (int(np.argmax(sizes)) + 1)
    peak = sub[comp].max()
    cand = np.argwhere(comp & (sub == peak))
    pick = cand[np.lexsort((cand[:, 0], cand[:, 1], cand[:, 2]))][0]
    return tuple(int(c) + l for c, l in zip(pick, box.lo))


@njit(cache=True)
def _propagate(aff, offsets, nx, ny, nz, seed, order):  # pragma: no cover - compiled
    n = nx * ny * nz
    best = np.zeros(n)
    visited = np.zeros(n, dtype=np.uint8)
    cap = 1 << 12
    heap_s = np.empty(cap)
    heap_i = np.empty(cap, np.int64)
    heap_s[0] = 1.0
    heap_i[0] = seed
    size = 1
    best[seed] = 1.0
    while size > 0:
        s = heap_s[0]
        i = heap_i[0]
        size -= 1
        heap_s[0] = heap_s[size]
        heap_i[0] = heap_i[size]
        pos = 0
        while True:
            child = 2 * pos + 1
            if child >= size:
                break
            if child + 1 < size and heap_s[child + 1] > heap_s[child]:
                child += 1
            if heap_s[child] > heap_s[pos]:
                heap_s[pos], heap_s[child] = heap_s[child], heap_s[pos]
                heap_i[pos], heap_i[child] = heap_i[child], heap_i[pos]
                pos = child
            else:
                break
        if visited[i]:
            continue
        visited[i] = 1
        x = i % nx
        rest = i // nx
        y = rest % ny
        z = rest // ny
        for kk in range(order.shape[0]):
            k = order[kk]
            xx = x + offsets[k, 0]
            yy = y + offsets[k, 1]
            zz = z + offsets[k, 2]
            if xx < 0 or xx >= nx or yy < 0 or yy >= ny or zz < 0 or zz >= nz:
                continue
            j = xx + nx * (yy + ny * zz)
            if visited[j]:
                continue
            a = aff[k, i]
            s2 = s if s < a else a
            if s2 > best[j]:
                best[j] = s2
                if size == cap:
                    cap2 = cap * 2
                    hs2 = np.empty(cap2)
                    hi2 = np.empty(cap2, np.int64)
                    hs2[:size] = heap_s[:size]
                    hi2[:size] = heap_i[:size]
                    heap_s = hs2
                    heap_i = hi2
                    cap = cap2
                pos = size
                heap_s[pos] = s2
                heap_i[pos] = j
                size += 1
                while pos > 0:
                    parent = (pos - 1) // 2
                    if heap_s[pos] > heap_s[parent]:
                        heap_s[pos], heap_s[parent] = heap_s[parent], heap_s[pos]
                        heap_i[pos], heap_i[parent] = heap_i[parent], heap_i[pos]
                        pos = parent
                    else:
                        break
    return best


def _check_seed(dims, seed) -> tuple[int, int, int]:
    seed = tuple(int(c) for c in seed)
    if len(seed) != 3 or any(not 0 <= c < d for c, d in zip(seed, dims)):
        raise ValueError("seed %r outside volume dims %r" % (seed, dims))
    return seed


def compute_connectivity(
    grad: Volume,
    seed,
    params: AffinityParams,
    relax_order: np.ndarray | None = None,
) -> ConnectivityMap:
    """Exact connectivity map by best-first (pop-max) propagation.

    `relax_order` permutes the neighbor relaxation order; the result is
    order-invariant, and tests exercise that by passing permutations.
    """
    seed = _check_seed(grad.dims, seed)
    aff, offsets = link_affinities(grad, params)
    if relax_order is None:
        relax_order = np.arange(len(offsets), dtype=np.int64)
    else:
        relax_order = np.asarray(relax_order, dtype=np.int64)
        if sorted(relax_order.tolist()) != list(range(len(offsets))):
            raise ValueError("relax_order must permute 0..%d" % (len(offsets) - 1))
    nx, ny, nz = grad.dims
    seed_lin = seed[0] + nx * (seed[1] + ny * seed[2])
    best = _propagate(aff, offsets, nx, ny, nz, seed_lin, relax_order)
    strength = best.reshape(grad.dims, order="F")
    return ConnectivityMap(strength, grad.spacing, seed)


def brute_force_connectivity(grad: Volume, seed, params: AffinityParams) -> ConnectivityMap:
    """Connectivity by descending-affinity union-find; oracle for tiny volumes.

    Processes links in descending affinity groups and records, for each voxel,
    the group value at which it first joins the seed's component; that value
    equals the max over paths of the min link affinity.  Shares the link
    table with compute_connectivity but none of its propagation machinery.
    Refuses volumes above _ORACLE_MAX_VOXELS voxels.
    """
    seed = _check_seed(grad.dims, seed)
    nx, ny, nz = grad.dims
    n = nx * ny * nz
    if n > _ORACLE_MAX_VOXELS:
        raise ValueError("volume too large for brute-force check: %d > %d voxels" % (n, _ORACLE_MAX_VOXELS))
    aff, offsets = link_affinities(grad, params)

    edges = []
    for k, (dx, dy, dz) in enumerate(offsets):
        for i in range(n):
            x = i % nx
            rest = i // nx
            y = rest % ny
            z = rest // ny
            xx, yy, zz = x + dx, y + dy, z + dz
            if not (0 <= xx < nx and 0 <= yy < ny and 0 <= zz < nz):
                continue
            j = xx + nx * (yy + ny * zz)
            if i < j:
                edges.append((float(aff[k, i]), i, j))
    edges.sort(key=lambda e: -e[0])

    parent = list(range(n))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    seed_lin = seed[0] + nx * (seed[1] + ny * seed[2])
    strength = np.zeros(n, dtype=np.float64)
    strength[seed_lin] = 1.0
    assigned = np.zeros(n, dtype=bool)
    assigned[seed_lin] = True
    pos = 0
    while pos < len(edges):
        value = edges[pos][0]
        while pos < len(edges) and edges[pos][0] == value:
            _, i, j = edges[pos]
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[ri] = rj
            pos += 1
        root = find(seed_lin)
        for i in range(n):
            if not assigned[i] and find(i) == root:
                strength[i] = value
                assigned[i] = True
    return ConnectivityMap(strength.reshape(grad.dims, order="F"), grad.spacing, seed)


def threshold_object(cmap: ConnectivityMap, theta: float) -> Mask:
    """Voxels with strength >= theta, restricted to the seed's 26-component."""
    if not 0 < theta <= 1:
        raise ValueError("theta must lie in (0, 1], got %r" % theta)
    bits = cmap.strength >= theta
    labels, _sizes = label_components(bits, adjacency=26)
    keep = labels == labels[cmap.seed]
    return Mask(keep, cmap.spacing)
