"""Synthetic head CT phantom with a known mandible.

The phantom is a soft-tissue head cylinder holding a horseshoe-shaped
mandible body (arch), two vertical rami rising from the arch floor to the
condyles, six teeth on top of the arch, and a skull-base slab above the
condyles.  An air-filled oral cavity wraps the upper rami and the teeth, and
air layers sit above and below each bone slab, so every bone structure ends
on a bone-air interface in z while bone walls meet soft tissue in-plane.
Ground truth masks are returned for the mandible (arch plus rami), the teeth
and the skull slab separately.

The condyles stop `skull_gap` slices below the skull base.  At the default
gap of 0 they touch it, which makes gradient-based delineation bleed into
the skull; downstream cleanup is expected to remove it, and tests rely on
that behavior.

Artifact severities: "low" adds sensor noise only, "medium" adds bright and
dark streak lines through the teeth, "high" adds more streaks plus two metal
fillings buried in the teeth at full metal intensity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import BoundingBox, Mask, Volume, tight_box

SEVERITIES = ("low", "medium", "high")

# canonical design grid; other dims scale these voxel measurements
_CANON = (96, 96, 80)

_ARCH_SWEEP_DEG = 122.5
_TOOTH_ANGLES_DEG = (-62.5, -37.5, -12.5, 12.5, 37.5, 62.5)
_METAL_FIND_HU = 1500.0


@dataclass(frozen=True)
class PhantomParams:
    dims: tuple[int, int, int] = (96, 96, 80)
    spacing: tuple[float, float, float] = (1.12, 1.12, 3.0)
    hu_air: float = -1000.0
    hu_soft: float = 40.0
    hu_bone: float = 1200.0
    hu_teeth: float = 1800.0
    hu_tooth_shell: float = 1100.0
    hu_metal: float = 3000.0
    noise_hu: float = 20.0
    skull_gap: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 32 for d in dims):
            raise ValueError("phantom dims must be at least 32 per axis, got %r" % (dims,))
        object.__setattr__(self, "dims", dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError("spacing must be positive and finite, got %r" % (spacing,))
        object.__setattr__(self, "spacing", spacing)
        if not self.hu_air < self.hu_soft < self.hu_bone < self.hu_teeth <= self.hu_metal:
            raise ValueError("HU values must increase from air to metal")
        if not self.hu_soft < self.hu_tooth_shell < self.hu_teeth:
            raise ValueError("hu_tooth_shell must lie between soft tissue and teeth")
        if self.noise_hu < 0:
            raise ValueError("noise_hu must be nonnegative")
        if self.skull_gap < 0:
            raise ValueError("skull_gap must be nonnegative")


@dataclass(frozen=True, eq=False)
class PhantomCase:
    volume: Volume
    gt_mandible: Mask
    gt_teeth: Mask
    gt_skull: Mask
    gt_box: BoundingBox
    severity: str


class _Geometry:
    """Voxel-space layout, scaled from the canonical 96x96x80 design."""

    def __init__(self, params: PhantomParams):
        nx, ny, nz = params.dims
        fx = nx / _CANON[0]
        fy = ny / _CANON[1]
        fz = nz / _CANON[2]

        self.cx = 48.0 * fx
        self.cy = 42.0 * fy
        self.r_outer = 35.0 * fx
        self.r_inner = 22.0 * fx
        self.r_center = 0.5 * (self.r_outer + self.r_inner)
        self.rami_radius = 4.5 * fx
        self.tooth_radius = 3.8 * fx

        self.arch_z = (round(12 * fz), round(24 * fz))
        self.teeth_z = (self.arch_z[1] + 1, round(29 * fz))
        self.skull_z = (round(52 * fz), round(59 * fz))
        # rami run from the bottom of the arch so that every one of their
        # voxels stands on bone or on the air slab, never on soft tissue
        self.rami_z = (self.arch_z[0], self.skull_z[0] - 1 - params.skull_gap)
        self.carve_z = (self.arch_z[1] + 1, self.skull_z[0] - 1)
        self.air_below_z = (round(8 * fz), self.arch_z[0] - 1)
        self.air_above_z = (self.skull_z[1] + 1, min(nz - 1, round(63 * fz)))
        self.head_z = (round(2 * fz), round(70 * fz))

        self.skull_x = (round(11 * fx), round(85 * fx))
        self.skull_y = (round(5 * fy), round(65 * fy))
        self.carve_x = (round(9 * fx), round(87 * fx))
        self.carve_y = (round(3 * fy), round(67 * fy))
        self.head_rx = 46.0 * fx
        self.head_ry = 40.0 * fy

        spans = [
            ("arch", self.arch_z),
            ("teeth", self.teeth_z),
            ("rami", self.rami_z),
            ("skull", self.skull_z),
            ("air below the arch", self.air_below_z),
        ]
        for name, (lo, hi) in spans:
            if hi < lo:
                raise ValueError("degenerate %s z-range for dims %r" % (name, params.dims))
        if self.rami_z[1] <= self.teeth_z[1]:
            raise ValueError(
                "skull_gap %d leaves no condyle above the teeth for dims %r"
                % (params.skull_gap, params.dims)
            )
        if self.skull_z[1] >= nz or self.skull_x[1] >= nx or self.skull_y[1] >= ny:
            raise ValueError("skull slab exceeds volume dims %r" % (params.dims,))

    def arch_bits(self, nx: int, ny: int) -> np.ndarray:
        x, y = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        dx = x - self.cx
        dy = y - self.cy
        r = np.hypot(dx, dy)
        phi = np.abs(np.degrees(np.arctan2(dx, -dy)))
        return (r >= self.r_inner) & (r <= self.r_outer) & (phi <= _ARCH_SWEEP_DEG)

    def disk_bits(self, nx: int, ny: int, center: tuple[float, float], radius: float) -> np.ndarray:
        x, y = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        return np.hypot(x - center[0], y - center[1]) <= radius

    def rami_centers(self) -> list:
        out = []
        for sign in (-1.0, 1.0):
            a = math.radians(sign * _ARCH_SWEEP_DEG)
            out.append((self.cx + self.r_center * math.sin(a), self.cy - self.r_center * math.cos(a)))
        return out

    def tooth_centers(self) -> list:
        out = []
        for deg in _TOOTH_ANGLES_DEG:
            a = math.radians(deg)
            out.append((self.cx + self.r_center * math.sin(a), self.cy - self.r_center * math.cos(a)))
        return out

    def tooth_radius_at(self, z: int) -> float:
        lo, hi = self.teeth_z
        if hi == lo:
            return self.tooth_radius
        t = (z - lo) / (hi - lo)
        return self.tooth_radius * (1.0 - 0.2 * t)


def _paint_box(data, value, x, y, z):
    data[x[0] : x[1] + 1, y[0] : y[1] + 1, z[0] : z[1] + 1] = value


def add_artifacts(data: np.ndarray, severity: str, rng: np.random.Generator,
                  params: PhantomParams) -> None:
    """Degrade a clean HU canvas in place according to severity.

    Streak lines and metal fillings are anchored on tooth voxels, found by
    intensity on the clean canvas before noise is added.
    """
    if severity not in SEVERITIES:
        raise ValueError("severity must be one of %r, got %r" % (SEVERITIES, severity))
    core_bits = data >= _METAL_FIND_HU
    teeth = np.argwhere(core_bits)
    data += rng.normal(0.0, params.noise_hu, size=data.shape)
    if severity == "low":
        return
    if teeth.size == 0:
        raise ValueError("no teeth found to anchor artifacts on")
    nx, ny, _nz = data.shape
    n_streaks = int(rng.integers(2, 5) if severity == "medium" else rng.integers(6, 11))
    for _ in range(n_streaks):
        tx, ty, tz = teeth[int(rng.integers(0, len(teeth)))]
        angle = float(rng.uniform(0.0, math.pi))
        delta = 250.0 if rng.integers(0, 2) else -250.0
        cos_a, sin_a = math.cos(angle), math.sin(angle)
        seen = set()
        reach = float(nx + ny)
        for t in np.arange(-reach, reach, 0.5):
            px = int(round(tx + t * cos_a))
            py = int(round(ty + t * sin_a))
            if 0 <= px < nx and 0 <= py < ny and (px, py) not in seen:
                seen.add((px, py))
                # dentin itself stays bright; streaks corrupt what surrounds it
                if not core_bits[px, py, tz]:
                    data[px, py, tz] += delta
    if severity == "high":
        # metal fillings: two vertical root posts, three voxels tall from the
        # lowest tooth slice, each wrapped in dentin on all sides so the
        # filling column stays interior to its tooth
        nz = data.shape[2]
        z_fill = int(teeth[:, 2].min())
        top = min(z_fill + 3, nz)
        col = core_bits[:, :, z_fill:top].all(axis=2)
        good = col.copy()
        good[1:, :] &= col[:-1, :]
        good[:-1, :] &= col[1:, :]
        good[:, 1:] &= col[:, :-1]
        good[:, :-1] &= col[:, 1:]
        good[0, :] = good[-1, :] = False
        good[:, 0] = good[:, -1] = False
        cand = np.argwhere(good)
        for _ in range(2):
            if len(cand):
                tx, ty = cand[int(rng.integers(0, len(cand)))]
                data[tx, ty, z_fill:top] = params.hu_metal
                keep = np.abs(cand - (tx, ty)).max(axis=1) > 1
                cand = cand[keep]
            else:
                tx, ty, tz = teeth[int(rng.integers(0, len(teeth)))]
                data[tx, ty, tz] = params.hu_metal


def generate(params: PhantomParams | None = None, severity: str = "low",
             rng_seed: int = 0) -> PhantomCase:
    """Build one phantom case; fully determined by (params, severity, rng_seed)."""
    params = params or PhantomParams()
    if severity not in SEVERITIES:
        raise ValueError("severity must be one of %r, got %r" % (SEVERITIES, severity))
    geo = _Geometry(params)
    nx, ny, nz = params.dims
    data = np.full(params.dims, params.hu_air, dtype=np.float64)

    # soft-tissue head column
    x, y = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    head = ((x - geo.cx) / geo.head_rx) ** 2 + ((y - geo.cy) / geo.head_ry) ** 2 <= 1.0
    data[:, :, geo.head_z[0] : geo.head_z[1] + 1][head] = params.hu_soft

    # air pockets: below the arch, the oral cavity, above the skull
    _paint_box(data, params.hu_air, geo.carve_x, geo.carve_y, geo.air_below_z)
    _paint_box(data, params.hu_air, geo.carve_x, geo.carve_y, geo.carve_z)
    _paint_box(data, params.hu_air, geo.carve_x, geo.carve_y, geo.air_above_z)

    gt_mandible = np.zeros(params.dims, dtype=bool)
    gt_teeth = np.zeros(params.dims, dtype=bool)
    gt_skull = np.zeros(params.dims, dtype=bool)

    arch = geo.arch_bits(nx, ny)
    gt_mandible[:, :, geo.arch_z[0] : geo.arch_z[1] + 1] = arch[:, :, None]

    rami = np.zeros((nx, ny), dtype=bool)
    for center in geo.rami_centers():
        rami |= geo.disk_bits(nx, ny, center, geo.rami_radius)
    gt_mandible[:, :, geo.rami_z[0] : geo.rami_z[1] + 1] |= rami[:, :, None]

    # teeth: dentin core wrapped in a one-voxel partial-volume shell, capped
    # by shell on the top slice, so the brightest voxels sit in the interior
    # rather than on the air boundary
    teeth_core = np.zeros(params.dims, dtype=bool)
    for z in range(geo.teeth_z[0], geo.teeth_z[1] + 1):
        radius = geo.tooth_radius_at(z)
        for center in geo.tooth_centers():
            gt_teeth[:, :, z] |= geo.disk_bits(nx, ny, center, radius)
            if z < geo.teeth_z[1]:
                teeth_core[:, :, z] |= geo.disk_bits(nx, ny, center, radius - 1.0)

    gt_skull[geo.skull_x[0] : geo.skull_x[1] + 1,
             geo.skull_y[0] : geo.skull_y[1] + 1,
             geo.skull_z[0] : geo.skull_z[1] + 1] = True

    data[gt_mandible] = params.hu_bone
    data[gt_skull] = params.hu_bone
    data[gt_teeth] = params.hu_tooth_shell
    data[teeth_core] = params.hu_teeth

    rng = np.random.default_rng(rng_seed)
    add_artifacts(data, severity, rng, params)

    hu = np.clip(np.rint(data), -32768, 32767).astype(np.int16)
    return PhantomCase(
        volume=Volume(hu, params.spacing),
        gt_mandible=Mask(gt_mandible, params.spacing),
        gt_teeth=Mask(gt_teeth, params.spacing),
        gt_skull=Mask(gt_skull, params.spacing),
        gt_box=tight_box(Mask(gt_mandible, params.spacing)),
        severity=severity,
    )
