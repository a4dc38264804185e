"""X-ray tube model: spectrum, bowtie filtration, heel effect, helical poses.

Fan (polar) and cone (azimuthal) angles are in degrees at the API surface.
Sampling tables are piecewise-linear densities inverted exactly; the numba
helpers at the bottom are shared by :func:`sample_emission` and the
transport kernels.
"""

from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numba
import numpy as np

from .errors import ConfigurationError
from .physics import CrossSectionTable

AL_DENSITY = 2.699  # g/cc


@dataclass(frozen=True)
class Spectrum:
    energies: np.ndarray  # keV, bin centres
    fluence: np.ndarray  # relative photon count per bin

    def __post_init__(self):
        object.__setattr__(self, "energies", np.asarray(self.energies, dtype=float))
        object.__setattr__(self, "fluence", np.asarray(self.fluence, dtype=float))
        if self.energies.shape != self.fluence.shape:
            raise ValueError("energies and fluence must have equal length")
        if np.any(self.fluence < 0):
            raise ValueError("negative fluence")

    def normalized(self) -> "Spectrum":
        return Spectrum(self.energies, self.fluence / self.fluence.sum())

    def mean_energy(self) -> float:
        return float(np.dot(self.energies, self.fluence) / self.fluence.sum())

    @classmethod
    def from_csv(cls, path) -> "Spectrum":
        e, f = _read_two_columns(path, ("energy_keV", "fluence"))
        return cls(e, f)

    def to_csv(self, path) -> None:
        _write_two_columns(path, ("energy_keV", "fluence"), self.energies, self.fluence)


def _al_mu(energies: np.ndarray) -> np.ndarray:
    """Linear attenuation of aluminium in 1/mm."""
    table = CrossSectionTable.default(materials=("al",))
    return table.mu_total(0, np.maximum(energies, table.energies[0]), AL_DENSITY) / 10.0


def generate_spectrum(kvp: int, inherent_al_mm: float = 2.5) -> Spectrum:
    """Kramers bremsstrahlung spectrum on a 1 keV grid from 10 keV to ``kvp``.

    Photon fluence goes as (kvp - E) / E, then attenuated by ``inherent_al_mm``
    of aluminium. The result is normalized to unit sum.
    """
    if not 60 <= kvp <= 160:
        raise ConfigurationError(f"kVp must lie in [60, 160], got {kvp}")
    e = np.arange(10.0, float(kvp) + 1.0)
    f = np.clip(kvp - e, 0.0, None) / e
    f = f * np.exp(-_al_mu(e) * inherent_al_mm)
    return Spectrum(e, f / f.sum())


@dataclass(frozen=True)
class BowtieProfile:
    angles: np.ndarray  # fan angle, deg
    thickness: np.ndarray  # mm Al equivalent

    def __post_init__(self):
        object.__setattr__(self, "angles", np.asarray(self.angles, dtype=float))
        object.__setattr__(self, "thickness", np.asarray(self.thickness, dtype=float))
        if np.any(self.thickness < 0):
            raise ValueError("negative bowtie thickness")
        if np.any(np.diff(self.angles) <= 0):
            raise ValueError("bowtie angles must be increasing")

    @classmethod
    def default(cls, half_angle: float = 21.0, t_max: float = 25.0, n: int = 85) -> "BowtieProfile":
        phi = np.linspace(-half_angle, half_angle, n)
        c = np.cos(np.radians(phi))
        t = t_max * (1 - c) / (1 - np.cos(np.radians(half_angle)))
        return cls(phi, t)

    @classmethod
    def flat(cls, half_angle: float = 21.0) -> "BowtieProfile":
        return cls(np.array([-half_angle, half_angle]), np.zeros(2))

    def __call__(self, phi) -> np.ndarray:
        return np.interp(phi, self.angles, self.thickness)

    @classmethod
    def from_csv(cls, path) -> "BowtieProfile":
        return cls(*_read_two_columns(path, ("fan_angle_deg", "mmAl")))

    def to_csv(self, path) -> None:
        _write_two_columns(path, ("fan_angle_deg", "mmAl"), self.angles, self.thickness)


@dataclass(frozen=True)
class HeelModel:
    angles: np.ndarray  # cone angle, deg; negative = cathode side
    intensity: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "angles", np.asarray(self.angles, dtype=float))
        object.__setattr__(self, "intensity", np.asarray(self.intensity, dtype=float))
        if np.any(self.intensity < 0):
            raise ValueError("negative heel intensity")
        if np.any(np.diff(self.angles) <= 0):
            raise ValueError("heel angles must be increasing")

    @classmethod
    def default(cls, aperture: float = 7.32, cathode: float = 1.15, anode: float = 0.85) -> "HeelModel":
        half = aperture / 2
        return cls(np.array([-half, half]), np.array([cathode, anode]))

    @classmethod
    def flat(cls, aperture: float = 7.32) -> "HeelModel":
        return cls(np.array([-aperture / 2, aperture / 2]), np.ones(2))

    @property
    def aperture(self) -> float:
        return float(self.angles[-1] - self.angles[0])

    @property
    def norm(self) -> float:
        return float(_segment_cdf(self.angles, self.intensity)[-1])

    @classmethod
    def from_csv(cls, path) -> "HeelModel":
        return cls(*_read_two_columns(path, ("cone_angle_deg", "intensity")))

    def to_csv(self, path) -> None:
        _write_two_columns(path, ("cone_angle_deg", "intensity"), self.angles, self.intensity)


def apply_bowtie(
    s: Spectrum, phi: float, b: BowtieProfile, polar_aperture: float | None = None
) -> tuple[Spectrum, float]:
    """Filter ``s`` through the bowtie at fan angle ``phi`` (deg).

    Returns the renormalized filtered spectrum and the relative intensity
    (filtered photon total / unfiltered photon total).
    """
    half = (polar_aperture if polar_aperture is not None else b.angles[-1] - b.angles[0]) / 2
    if abs(phi) > half + 1e-12:
        raise ValueError(f"fan angle {phi} outside aperture +/-{half}")
    return filter_spectrum(s, float(b(phi)))


def filter_spectrum(s: Spectrum, al_mm: float) -> tuple[Spectrum, float]:
    """Attenuate every bin by ``exp(-mu_Al(E) t)``; returns (normalized, intensity)."""
    filtered = s.fluence * np.exp(-_al_mu(s.energies) * al_mm)
    intensity = float(filtered.sum() / s.fluence.sum())
    return Spectrum(s.energies, filtered / filtered.sum()), intensity


def heel_pdf(theta, h: HeelModel):
    """Cone-angle density (1/deg), linear in the tabulated intensity."""
    th = np.asarray(theta, dtype=float)
    if np.any((th < h.angles[0] - 1e-12) | (th > h.angles[-1] + 1e-12)):
        raise ValueError(f"cone angle outside aperture [{h.angles[0]}, {h.angles[-1]}]")
    out = np.interp(th, h.angles, h.intensity) / h.norm
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ScannerGeometry:
    """Helical acquisition parameters; defaults reproduce the reference scanner.

    ``scan_start_mm`` / ``scan_end_mm`` locate the scanned z-range in phantom
    coordinates (mm from the top of the volume).
    """

    tube_potential_kvp: int = 120
    z_coverage_mm: float = 80.0
    pitch_factor: float = 0.99
    source_to_axis_mm: float = 625.61
    source_to_detector_mm: float = 1097.61
    translation_per_projection_mm: float = 3.3
    polar_aperture_deg: float = 42.0
    azimuthal_aperture_deg: float = 7.32
    angle_between_projections_deg: float = 15.0
    views_per_rotation: int = 24
    tube_current_mas: float = 100.0
    start_angle_deg: float = 0.0
    scan_start_mm: float = 0.0
    scan_end_mm: float = 80.0

    def validate(self) -> None:
        for name in ("z_coverage_mm", "source_to_axis_mm", "source_to_detector_mm",
                     "polar_aperture_deg", "azimuthal_aperture_deg", "tube_current_mas"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.translation_per_projection_mm < 0:
            raise ConfigurationError("translation per projection must be >= 0")
        if not math.isclose(self.views_per_rotation * self.angle_between_projections_deg, 360.0):
            raise ConfigurationError("views_per_rotation * angle_between_projections must equal 360")
        if self.source_to_detector_mm <= self.source_to_axis_mm:
            raise ConfigurationError("detector must lie beyond the rotation axis")
        if self.scan_end_mm <= self.scan_start_mm:
            raise ConfigurationError("scan range is empty")

    @property
    def translation_per_rotation_mm(self) -> float:
        return self.views_per_rotation * self.translation_per_projection_mm

    @property
    def effective_pitch(self) -> float:
        return self.translation_per_rotation_mm / self.z_coverage_mm

    def with_scan(self, start_mm: float, end_mm: float, start_angle: float | None = None) -> "ScannerGeometry":
        kw = {"scan_start_mm": float(start_mm), "scan_end_mm": float(end_mm)}
        if start_angle is not None:
            kw["start_angle_deg"] = float(start_angle)
        return replace(self, **kw)

    @classmethod
    def from_config(cls, path_or_parser, section: str = "geometry") -> "ScannerGeometry":
        if isinstance(path_or_parser, configparser.ConfigParser):
            cp = path_or_parser
        else:
            cp = configparser.ConfigParser()
            if not cp.read(path_or_parser):
                raise ConfigurationError(f"cannot read geometry config {path_or_parser}")
        if not cp.has_section(section):
            return cls()
        kw = {}
        for f in fields(cls):
            if cp.has_option(section, f.name):
                raw = cp.get(section, f.name)
                kw[f.name] = int(raw) if f.type in ("int", int) else float(raw)
        g = cls(**kw)
        g.validate()
        return g

    def to_config(self, cp: configparser.ConfigParser, section: str = "geometry") -> None:
        cp[section] = {f.name: str(getattr(self, f.name)) for f in fields(self)}


@dataclass(frozen=True)
class SourcePose:
    position: tuple[float, float, float]  # mm; x, y relative to the rotation axis
    angle_deg: float


def helical_poses(g: ScannerGeometry) -> list[SourcePose]:
    """Discrete source positions along the helix covering the scan range.

    Pose ``k`` sits at gantry angle ``start + k * step`` and
    ``z = scan_start + k * translation``; there are
    ``ceil(extent / translation)`` poses.
    """
    extent = g.scan_end_mm - g.scan_start_mm
    if g.z_coverage_mm <= 0:
        raise ConfigurationError("z coverage must be positive")
    if extent > 0 and g.translation_per_projection_mm <= 0:
        raise ConfigurationError("zero table translation with a nonzero scan range")
    n = max(1, math.ceil(extent / g.translation_per_projection_mm - 1e-9))
    r = g.source_to_axis_mm
    poses = []
    for k in range(n):
        ang = (g.start_angle_deg + k * g.angle_between_projections_deg) % 360.0
        a = math.radians(ang)
        z = g.scan_start_mm + k * g.translation_per_projection_mm
        poses.append(SourcePose((r * math.cos(a), r * math.sin(a), z), ang))
    return poses


@dataclass(frozen=True)
class Photon:
    origin: np.ndarray
    direction: np.ndarray
    energy: float
    weight: float = 1.0


@dataclass
class SourceModel:
    """Precomputed inverse-CDF tables for fan angle, cone angle and energy.

    The fan density is the bowtie relative intensity, tabulated on a fine
    grid of fan angles and linearly interpolated; each node carries its own
    filtered-spectrum CDF. Energies are drawn from the node nearest the
    sampled fan angle.
    """

    fan_nodes: np.ndarray
    fan_pdf: np.ndarray
    fan_cdf: np.ndarray
    spec_energies: np.ndarray
    spec_cdf: np.ndarray  # (n_fan_nodes, n_energies)
    cone_nodes: np.ndarray
    cone_pdf: np.ndarray
    cone_cdf: np.ndarray
    spectra: np.ndarray = field(repr=False)  # normalized filtered spectra per node

    @classmethod
    def build(
        cls,
        g: ScannerGeometry,
        spectrum: Spectrum | None = None,
        bowtie: BowtieProfile | None = None,
        heel: HeelModel | None = None,
        fan_step_deg: float = 0.1,
    ) -> "SourceModel":
        spectrum = spectrum or generate_spectrum(g.tube_potential_kvp)
        half_fan = g.polar_aperture_deg / 2
        bowtie = bowtie or BowtieProfile.default(half_angle=half_fan)
        heel = heel or HeelModel.default(aperture=g.azimuthal_aperture_deg)
        n = int(round(2 * half_fan / fan_step_deg)) + 1
        nodes = np.linspace(-half_fan, half_fan, n)
        mu = _al_mu(spectrum.energies)
        att = np.exp(-np.outer(bowtie(nodes), mu))
        filt = att * spectrum.fluence[None, :]
        intensity = filt.sum(axis=1) / spectrum.fluence.sum()
        spectra = filt / filt.sum(axis=1, keepdims=True)
        spec_cdf = np.cumsum(spectra, axis=1)
        spec_cdf /= spec_cdf[:, -1:]
        half_cone = g.azimuthal_aperture_deg / 2
        cnodes = heel.angles
        if cnodes[0] > -half_cone + 1e-9 or cnodes[-1] < half_cone - 1e-9:
            raise ConfigurationError("heel table does not span the azimuthal aperture")
        cpdf = heel.intensity
        return cls(
            nodes, intensity, _segment_cdf(nodes, intensity),
            spectrum.energies.copy(), spec_cdf,
            cnodes.copy(), cpdf.copy(), _segment_cdf(cnodes, cpdf),
            spectra,
        )

    def fan_density(self, phi) -> np.ndarray:
        return np.interp(phi, self.fan_nodes, self.fan_pdf) / self.fan_cdf[-1]

    def cone_density(self, theta) -> np.ndarray:
        return np.interp(theta, self.cone_nodes, self.cone_pdf) / self.cone_cdf[-1]

    def fan_node(self, phi: float) -> int:
        return int(_nearest_node(self.fan_nodes, phi))


def _segment_cdf(x: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Unnormalized CDF of a piecewise-linear density at its nodes."""
    return np.concatenate([[0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(x))])


def sample_emission(pose: SourcePose, g: ScannerGeometry, src: SourceModel, rng: np.random.Generator,
                    size: int | None = None):
    """Draw photon emissions from ``pose``.

    With ``size=None`` a single :class:`Photon` is returned, otherwise a tuple
    of arrays ``(origin, direction, energy, weight, fan_deg, cone_deg)``.
    """
    n = 1 if size is None else int(size)
    u = rng.random((n, 4))
    out = _sample_batch(
        u, np.radians(pose.angle_deg), np.asarray(pose.position, dtype=float),
        src.fan_nodes, src.fan_pdf, src.fan_cdf, src.spec_energies, src.spec_cdf,
        src.cone_nodes, src.cone_pdf, src.cone_cdf,
    )
    origin, direction, energy, phi, theta = out
    if size is None:
        return Photon(origin[0], direction[0], float(energy[0]), 1.0)
    return origin, direction, energy, np.ones(n), phi, theta


def sample_energy_at_fan_angle(src: SourceModel, phi: float, rng: np.random.Generator, size: int) -> np.ndarray:
    """Energies drawn from the filtered spectrum of the fan node nearest ``phi``."""
    k = src.fan_node(phi)
    idx = np.searchsorted(src.spec_cdf[k], rng.random(size), side="right")
    return src.spec_energies[np.minimum(idx, len(src.spec_energies) - 1)]


# --- numba helpers shared with the transport kernels ------------------------


@numba.njit(cache=True)
def _sample_linear_pdf(x, f, cdf, u):
    """Exact inverse CDF of the piecewise-linear density (x, f)."""
    target = u * cdf[-1]
    n = x.shape[0]
    lo = 0
    hi = n - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if cdf[mid] <= target:
            lo = mid
        else:
            hi = mid
    w = x[lo + 1] - x[lo]
    m = target - cdf[lo]
    f0 = f[lo]
    f1 = f[lo + 1]
    disc = f0 * f0 + 2.0 * (f1 - f0) * m / w
    if disc < 0.0:
        disc = 0.0
    denom = f0 + math.sqrt(disc)
    if denom <= 0.0:
        t = 0.0
    else:
        t = 2.0 * m / denom
    if t > w:
        t = w
    return x[lo] + t


@numba.njit(cache=True)
def _nearest_node(x, v):
    step = (x[-1] - x[0]) / (x.shape[0] - 1)
    k = int(math.floor((v - x[0]) / step + 0.5))
    if k < 0:
        k = 0
    if k > x.shape[0] - 1:
        k = x.shape[0] - 1
    return k


@numba.njit(cache=True)
def _sample_discrete(cdf, u):
    lo = 0
    hi = cdf.shape[0] - 1
    if u < cdf[0]:
        return 0
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if cdf[mid] <= u:
            lo = mid
        else:
            hi = mid
    return hi


@numba.njit(cache=True)
def _emit(u0, u1, u2, gantry_rad, fan_nodes, fan_pdf, fan_cdf, spec_e, spec_cdf,
          cone_nodes, cone_pdf, cone_cdf):
    """Fan/cone angle (deg), energy (keV) and unit direction for one photon."""
    phi = _sample_linear_pdf(fan_nodes, fan_pdf, fan_cdf, u0)
    theta = _sample_linear_pdf(cone_nodes, cone_pdf, cone_cdf, u1)
    k = _nearest_node(fan_nodes, phi)
    e = spec_e[_sample_discrete(spec_cdf[k], u2)]
    a = gantry_rad + math.radians(phi)
    ct = math.cos(math.radians(theta))
    st = math.sin(math.radians(theta))
    # central ray points from the source at angle `gantry` back toward the axis
    ux = -math.cos(a) * ct
    uy = -math.sin(a) * ct
    uz = st
    return phi, theta, e, ux, uy, uz


@numba.njit(cache=True)
def _sample_batch(u, gantry_rad, pos, fan_nodes, fan_pdf, fan_cdf, spec_e, spec_cdf,
                  cone_nodes, cone_pdf, cone_cdf):
    n = u.shape[0]
    origin = np.empty((n, 3))
    direction = np.empty((n, 3))
    energy = np.empty(n)
    phis = np.empty(n)
    thetas = np.empty(n)
    for i in range(n):
        phi, theta, e, ux, uy, uz = _emit(u[i, 0], u[i, 1], u[i, 2], gantry_rad, fan_nodes, fan_pdf,
                                          fan_cdf, spec_e, spec_cdf, cone_nodes, cone_pdf, cone_cdf)
        origin[i, 0] = pos[0]
        origin[i, 1] = pos[1]
        origin[i, 2] = pos[2]
        direction[i, 0] = ux
        direction[i, 1] = uy
        direction[i, 2] = uz
        energy[i] = e
        phis[i] = phi
        thetas[i] = theta
    return origin, direction, energy, phis, thetas


# --- CSV helpers ------------------------------------------------------------


def _read_two_columns(path, names: tuple[str, str]) -> tuple[np.ndarray, np.ndarray]:
    with open(Path(path), newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(n not in reader.fieldnames for n in names):
            raise ConfigurationError(f"{path}: expected columns {names}")
        rows = [(float(r[names[0]]), float(r[names[1]])) for r in reader]
    arr = np.array(rows, dtype=float)
    return arr[:, 0], arr[:, 1]


def _write_two_columns(path, names, a, b) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for x, y in zip(a, b):
            w.writerow([repr(float(x)), repr(float(y))])
