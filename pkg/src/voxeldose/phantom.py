"""Voxel phantoms, a procedurally varied synthetic cohort, and density mapping.

Arrays are stored z-major: ``density[iz, iy, ix]``. ``dims`` and ``spacing``
are reported in (x, y, z) order. The x axis runs from patient right to left,
y from posterior to anterior, z from superior to inferior.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError

T_AIR = 0.1  # g/cc
BONE_THRESHOLD = 1.1  # g/cc
AIR_DENSITY = 0.0012

ORGANS = ("lungs", "kidneys", "liver", "bladder", "spleen", "pancreas")

# HU -> density knots (g/cc); flat at air below -1000 HU
_HU_KNOTS = np.array([-1024.0, -1000.0, 0.0, 1000.0, 3071.0])
_RHO_KNOTS = np.array([AIR_DENSITY, AIR_DENSITY, 1.0, 1.6, 2.8])


@dataclass
class Phantom:
    density: np.ndarray
    material: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        self.density = np.asarray(self.density, dtype=np.float64)
        self.material = np.asarray(self.material, dtype=np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.density.ndim != 3 or self.density.shape != self.material.shape:
            raise ValueError("density and material must be matching 3-D grids")
        if min(self.spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.density.shape
        return nx, ny, nz

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.density.shape

    @property
    def voxel_volume_cc(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz / 1000.0

    @property
    def extent_mm(self) -> tuple[float, float, float]:
        return tuple(n * s for n, s in zip(self.dims, self.spacing))

    @property
    def body(self) -> np.ndarray:
        return self.density > T_AIR

    def total_mass(self) -> float:
        return float(self.density.sum() * self.voxel_volume_cc)

    def check(self) -> None:
        """Raise ``ValueError`` if any type invariant is broken."""
        if np.any(self.density < 0):
            raise ValueError("negative density")
        if self.material.max(initial=0) > 2:
            raise ValueError("material index out of range")
        if np.any(self.density[self.material == 0] >= T_AIR):
            raise ValueError("air voxel at or above t_air")


@dataclass
class OrganMaskSet:
    masks: dict[str, np.ndarray]
    body: np.ndarray

    def __post_init__(self):
        self.body = np.asarray(self.body, dtype=bool)
        self.masks = {k: np.asarray(v, dtype=bool) for k, v in self.masks.items()}
        for name, m in self.masks.items():
            if m.shape != self.body.shape:
                raise ValueError(f"mask {name!r} shape {m.shape} != body {self.body.shape}")

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(self.masks)

    def __getitem__(self, label: str) -> np.ndarray:
        if label == "body":
            return self.body
        return self.masks[label]


@dataclass(frozen=True)
class CohortSpec:
    """Parameters of a synthetic cohort.

    ``size_range`` bounds the water-equivalent diameter (cm) targeted for each
    member; ``axis_jitter`` is the fractional spread of organ semi-axes and
    ``position_jitter_mm`` the spread of organ centres.
    """

    count: int = 64
    size_range: tuple[float, float] = (21.0, 41.0)
    axis_jitter: float = 0.12
    position_jitter_mm: float = 8.0
    seed: int = 0
    spacing_mm: float = 4.0
    length_mm: float = 600.0

    def validate(self) -> None:
        if int(self.count) < 1:
            raise ConfigurationError(f"cohort count must be >= 1, got {self.count}")
        lo, hi = self.size_range
        if not (15.0 <= lo < hi <= 50.0):
            raise ConfigurationError(f"size_range must satisfy 15 <= lo < hi <= 50 cm, got {self.size_range}")
        if self.axis_jitter < 0 or self.axis_jitter >= 0.5:
            raise ConfigurationError("axis_jitter must be in [0, 0.5)")
        if self.position_jitter_mm < 0:
            raise ConfigurationError("position_jitter_mm must be >= 0")
        if self.spacing_mm <= 0 or self.length_mm < 400:
            raise ConfigurationError("spacing must be positive and length >= 400 mm")


def hu_to_density(hu):
    """Map Hounsfield units to mass density (g/cc), piecewise-linearly.

    Values outside [-1024, 3071] are clamped with a ``RuntimeWarning``.
    """
    arr = np.asarray(hu, dtype=float)
    if np.any((arr < _HU_KNOTS[0]) | (arr > _HU_KNOTS[-1])):
        warnings.warn("HU outside [-1024, 3071]; clamped", RuntimeWarning, stacklevel=2)
        arr = np.clip(arr, _HU_KNOTS[0], _HU_KNOTS[-1])
    out = np.interp(arr, _HU_KNOTS, _RHO_KNOTS)
    return float(out) if np.ndim(out) == 0 else out


def density_to_material(density):
    """0 = air (below t_air), 2 = bone mixture (above 1.1 g/cc), else 1 = water-like."""
    rho = np.asarray(density, dtype=float)
    mat = np.where(rho < T_AIR, 0, np.where(rho > BONE_THRESHOLD, 2, 1)).astype(np.uint8)
    return int(mat) if mat.ndim == 0 else mat


def resample_phantom(p: Phantom, target_spacing: float) -> Phantom:
    """Trilinearly resample density onto an isotropic grid; materials are re-derived."""
    if target_spacing <= 0:
        raise ValueError("target spacing must be positive")
    extent = p.extent_mm
    if any(target_spacing > e for e in extent):
        raise ValueError(f"target spacing {target_spacing} mm exceeds phantom extent {extent}")
    new_dims = [max(1, int(round(e / target_spacing))) for e in extent]
    # voxel centres of the new grid in source index coordinates, per axis (x, y, z)
    axes = [
        (np.arange(n) + 0.5) * target_spacing / s - 0.5
        for n, s in zip(new_dims, p.spacing)
    ]
    zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    rho = ndimage.map_coordinates(p.density, [zz, yy, xx], order=1, mode="nearest")
    return Phantom(rho, density_to_material(rho), (target_spacing,) * 3)


# --- synthetic cohort -------------------------------------------------------

# Anatomy in body-relative units: x, y as fractions of the lateral / AP
# semi-axes, z in mm from the top of the volume (600 mm reference length).
_ANATOMY = {
    # name: (cx, cy, cz_mm, ax, ay, az_mm, exponent, density)
    "lungs_r": (-0.42, -0.02, 135.0, 0.32, 0.52, 115.0, 2.0, 0.30),
    "lungs_l": (0.42, -0.02, 130.0, 0.30, 0.50, 110.0, 2.0, 0.30),
    "liver": (-0.32, 0.08, 285.0, 0.42, 0.55, 75.0, 2.0, 1.06),
    "spleen": (0.50, -0.28, 275.0, 0.16, 0.24, 50.0, 2.0, 1.06),
    "kidneys_r": (-0.34, -0.48, 350.0, 0.11, 0.14, 55.0, 2.0, 1.05),
    "kidneys_l": (0.34, -0.48, 345.0, 0.11, 0.14, 55.0, 2.0, 1.05),
    "pancreas": (0.08, -0.12, 325.0, 0.34, 0.09, 22.0, 3.0, 1.04),
    "bladder": (0.0, 0.28, 525.0, 0.20, 0.22, 38.0, 2.0, 1.02),
}
# earlier entries win where generating shapes overlap
_PRIORITY = ("lungs_r", "lungs_l", "kidneys_r", "kidneys_l", "spleen", "pancreas", "liver", "bladder")

_SOFT_TISSUE = 1.0
_SPINE_DENSITY = 1.40
_RIB_DENSITY = 1.25
_PELVIS_DENSITY = 1.30


def _superellipse(x, y, a, b, n):
    return np.abs(x / a) ** n + np.abs(y / b) ** n <= 1.0


def _voxelize(spec: CohortSpec, draws: dict, scale: float):
    """Build density and organ masks for body semi-axes multiplied by ``scale``."""
    sp = spec.spacing_mm
    a = draws["a"] * scale
    b = draws["b"] * scale
    nz = int(round(spec.length_mm / sp))
    nx = int(np.ceil(2 * a / sp)) + 4
    ny = int(np.ceil(2 * b / sp)) + 4
    x = (np.arange(nx) + 0.5) * sp - nx * sp / 2
    y = (np.arange(ny) + 0.5) * sp - ny * sp / 2
    z = (np.arange(nz) + 0.5) * sp
    Z, Y, X = np.meshgrid(z, y, x, indexing="ij")
    zf = spec.length_mm / 600.0

    # mild taper: waist narrower than chest and pelvis
    taper = 1.0 + draws["taper"] * np.cos(2 * np.pi * Z / spec.length_mm)
    body = _superellipse(X, Y * taper, a, b, draws["body_n"])
    density = np.full(X.shape, AIR_DENSITY)
    density[body] = _SOFT_TISSUE

    taken = np.zeros(X.shape, dtype=bool)
    masks = {o: np.zeros(X.shape, dtype=bool) for o in ORGANS}
    for name in _PRIORITY:
        cx, cy, cz, ax, ay, az, n, rho = _ANATOMY[name]
        j = draws["organs"][name]
        ox = cx * a + j["dx"]
        oy = cy * b + j["dy"]
        oz = cz * zf + j["dz"]
        rx, ry, rz = ax * a * j["sx"], ay * b * j["sy"], az * zf * j["sz"]
        shape = (
            np.abs((X - ox) / rx) ** n + np.abs((Y - oy) / ry) ** n + np.abs((Z - oz) / rz) ** n
        ) <= 1.0
        shape &= body & ~taken
        taken |= shape
        masks[name.split("_")[0]] |= shape
        density[shape] = rho

    # bone: spine column, rib shell with gaps, pelvic ring; never inside organs
    free = body & ~taken
    spine = ((X / (0.11 * b)) ** 2 + ((Y + 0.72 * b) / (0.11 * b)) ** 2 <= 1.0) & free
    shell_outer = _superellipse(X, Y * taper, 0.93 * a, 0.93 * b, draws["body_n"])
    shell_inner = _superellipse(X, Y * taper, 0.87 * a, 0.87 * b, draws["body_n"])
    rib_band = (Z > 40 * zf) & (Z < 300 * zf) & ((Z % (25.0 * zf)) < 10.0 * zf)
    ribs = shell_outer & ~shell_inner & rib_band & free & (Y > -0.6 * b)
    pelvis_outer = _superellipse(X, Y, 0.80 * a, 0.75 * b, 2.0)
    pelvis_inner = _superellipse(X, Y, 0.68 * a, 0.62 * b, 2.0)
    pelvis = pelvis_outer & ~pelvis_inner & (Z > 450 * zf) & (Z < 570 * zf) & free
    density[spine] = _SPINE_DENSITY
    density[ribs] = _RIB_DENSITY
    density[pelvis] = _PELVIS_DENSITY
    return density, masks, body


def _draw(spec: CohortSpec, rng: np.random.Generator) -> dict:
    aspect = rng.uniform(1.2, 1.4)
    target = rng.uniform(*spec.size_range)
    j = spec.axis_jitter
    pj = spec.position_jitter_mm
    organs = {}
    for name in _PRIORITY:
        organs[name] = {
            "sx": 1 + rng.uniform(-j, j),
            "sy": 1 + rng.uniform(-j, j),
            "sz": 1 + rng.uniform(-j, j),
            "dx": rng.uniform(-pj, pj),
            "dy": rng.uniform(-pj, pj),
            "dz": rng.uniform(-pj, pj),
        }
    r = target * 10 / 2  # mm
    return {
        "target_dw": target,
        "a": r * np.sqrt(aspect),
        "b": r / np.sqrt(aspect),
        "body_n": rng.uniform(2.2, 2.8),
        "taper": rng.uniform(0.0, 0.08),
        "organs": organs,
    }


def generate_synthetic_phantom(spec: CohortSpec, index: int) -> tuple[Phantom, OrganMaskSet]:
    """Deterministically generate cohort member ``index``.

    The body cross-section is rescaled (a few fixed-point iterations) until
    the water-equivalent diameter hits the member's target drawn from
    ``spec.size_range``.
    """
    from .dosimetry import water_equivalent_diameter

    spec.validate()
    if not 0 <= index < spec.count:
        raise ConfigurationError(f"index {index} outside cohort of {spec.count}")
    rng = np.random.default_rng([int(spec.seed), int(index)])
    draws = _draw(spec, rng)
    sp = (spec.spacing_mm,) * 3
    scale = 1.0
    for _ in range(4):
        density, masks, body = _voxelize(spec, draws, scale)
        ph = Phantom(density, density_to_material(density), sp)
        dw = water_equivalent_diameter(ph)
        if abs(dw - draws["target_dw"]) < 0.1:
            break
        scale *= draws["target_dw"] / dw
    return ph, OrganMaskSet(masks, body)
