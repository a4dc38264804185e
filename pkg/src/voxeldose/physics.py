"""Photon interaction data and closed-form scattering kinematics.

Mass attenuation coefficients are bundled in ``data/attenuation.csv`` at a
handful of reference energies (cm^2/g, split into photoelectric, Compton and
Rayleigh parts) and resampled onto a log-spaced grid by log-log
interpolation.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from importlib import resources

import numpy as np

ELECTRON_REST_KEV = 510.99895
CLASSICAL_ELECTRON_RADIUS_CM = 2.8179403262e-13

#: Phantom material indices, in table order.
PHANTOM_MATERIALS = ("air", "water", "bone")

E_MIN_KEV = 10.0
E_MAX_KEV = 150.0


def _load_knots() -> dict[str, np.ndarray]:
    rows: dict[str, list[tuple[float, float, float, float]]] = {}
    text = resources.files("voxeldose").joinpath("data/attenuation.csv").read_text()
    for rec in csv.DictReader(text.splitlines()):
        rows.setdefault(rec["material"], []).append(
            (
                float(rec["energy_keV"]),
                float(rec["photoelectric"]),
                float(rec["compton"]),
                float(rec["rayleigh"]),
            )
        )
    return {m: np.array(sorted(v)) for m, v in rows.items()}


def _loglog(x: np.ndarray, xp: np.ndarray, fp: np.ndarray) -> np.ndarray:
    """Piecewise log-log interpolation, linearly extrapolated in log space."""
    lx, lxp, lfp = np.log(x), np.log(xp), np.log(fp)
    idx = np.clip(np.searchsorted(lxp, lx) - 1, 0, len(xp) - 2)
    t = (lx - lxp[idx]) / (lxp[idx + 1] - lxp[idx])
    return np.exp(lfp[idx] + t * (lfp[idx + 1] - lfp[idx]))


@dataclass(frozen=True)
class CrossSectionTable:
    """Per-material mass attenuation coefficients on a log-spaced energy grid.

    ``photoelectric``, ``compton`` and ``rayleigh`` have shape
    ``(n_materials, n_energies)`` in cm^2/g.
    """

    materials: tuple[str, ...]
    energies: np.ndarray
    photoelectric: np.ndarray
    compton: np.ndarray
    rayleigh: np.ndarray

    @classmethod
    def default(
        cls,
        materials: tuple[str, ...] = PHANTOM_MATERIALS,
        n_energies: int = 64,
        e_min: float = E_MIN_KEV,
        e_max: float = E_MAX_KEV,
    ) -> "CrossSectionTable":
        knots = _load_knots()
        grid = np.geomspace(e_min, e_max, n_energies)
        comps = []
        for col in (1, 2, 3):
            comps.append(
                np.stack([_loglog(grid, knots[m][:, 0], knots[m][:, col]) for m in materials])
            )
        return cls(tuple(materials), grid, *comps)

    @property
    def total(self) -> np.ndarray:
        return self.photoelectric + self.compton + self.rayleigh

    @property
    def log_step(self) -> float:
        return float(np.log(self.energies[1] / self.energies[0]))

    def mass_coefficients(self, material: int, energy) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Mass coefficients (cm^2/g) of one material at arbitrary energies."""
        e = np.asarray(energy, dtype=float)
        if np.any(e < self.energies[0]):
            warnings.warn(
                f"energy below table minimum {self.energies[0]:g} keV; clamped",
                RuntimeWarning,
                stacklevel=2,
            )
            e = np.maximum(e, self.energies[0])
        return tuple(
            _interp_grid(e, self.energies, arr[material])
            for arr in (self.photoelectric, self.compton, self.rayleigh)
        )

    def mu_total(self, material: int, energy, density=1.0) -> np.ndarray:
        pe, co, ra = self.mass_coefficients(material, energy)
        return (pe + co + ra) * density


def _interp_grid(e: np.ndarray, grid: np.ndarray, values: np.ndarray) -> np.ndarray:
    # log-log on a uniform log grid; exact at knots
    step = np.log(grid[1] / grid[0])
    pos = np.log(e / grid[0]) / step
    idx = np.clip(np.floor(pos).astype(int), 0, len(grid) - 2)
    t = pos - idx
    lv = np.log(values)
    out = np.exp(lv[idx] + t * (lv[idx + 1] - lv[idx]))
    at_knot = np.isclose(t, 0.0, rtol=0, atol=1e-12)
    out = np.where(at_knot, values[idx], out)
    at_next = np.isclose(t, 1.0, rtol=0, atol=1e-12)
    return np.where(at_next, values[np.minimum(idx + 1, len(grid) - 1)], out)


def lookup_mu(material: int, energy: float, table: CrossSectionTable, density: float = 1.0):
    """Linear attenuation coefficients (1/cm) ``(mu_pe, mu_compton, mu_rayleigh)``.

    Mass coefficients are log-log interpolated, then scaled by ``density``.
    Energies below the grid are clamped with a ``RuntimeWarning``.
    """
    pe, co, ra = table.mass_coefficients(material, energy)
    return float(pe * density), float(co * density), float(ra * density)


def compton_energy(energy_kev, cos_angle):
    """Scattered photon energy for a free-electron Compton event."""
    return energy_kev / (1.0 + (energy_kev / ELECTRON_REST_KEV) * (1.0 - cos_angle))


def klein_nishina_pdf(cos_angle, energy_kev):
    """Klein-Nishina density over ``cos(angle)`` in [-1, 1], normalized to unit integral."""
    k = energy_kev / ELECTRON_REST_KEV
    mu = np.asarray(cos_angle, dtype=float)
    ratio = 1.0 / (1.0 + k * (1.0 - mu))
    dsig = 0.5 * ratio**2 * (ratio + 1.0 / ratio - (1.0 - mu**2))
    return dsig / _kn_norm(k)


def _kn_norm(k: float) -> float:
    # integral over mu in [-1, 1] of 0.5 * r^2 (r + 1/r - sin^2)
    l = np.log1p(2 * k)
    a = (1 + k) / k**2 * (2 * (1 + k) / (1 + 2 * k) - l / k)
    b = l / (2 * k) - (1 + 3 * k) / (1 + 2 * k) ** 2
    return a + b


def klein_nishina_cross_section(energy_kev) -> np.ndarray:
    """Total free-electron Klein-Nishina cross section in cm^2 per electron."""
    k = np.asarray(energy_kev, dtype=float) / ELECTRON_REST_KEV
    return 2 * np.pi * CLASSICAL_ELECTRON_RADIUS_CM**2 * _kn_norm(k)
