"""Reference dose quantities and evaluation metrics.

Covers start-angle averaging of dose maps, air masking, organ dose maps,
mass-weighted mean organ dose, water-equivalent diameter, Dice, and the
PE / RMSE error report.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import OrganAbsentError, ShapeMismatchError
from .phantom import ORGANS, T_AIR, Phantom
from .physics import CrossSectionTable
from .transport import DoseMap

LABELS = ORGANS + ("body",)


def _check_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what}: {a.shape} != {b.shape}")


def average_dose_maps(maps: list[DoseMap]) -> DoseMap:
    """Voxel-wise mean over start angles; history counts are summed."""
    if not maps:
        raise ValueError("need at least one dose map")
    first = maps[0]
    for m in maps[1:]:
        _check_shape(first.dose, m.dose, "dose map dims")
        if m.units != first.units:
            raise ValueError(f"unit mismatch: {first.units} vs {m.units}")
        if m.spacing != first.spacing:
            raise ShapeMismatchError("dose map spacing mismatch")
    total = np.zeros_like(first.dose)
    for m in maps:
        total += m.dose
    var = None
    if all(m.variance is not None for m in maps):
        # variance of a mean of independent estimates
        var = sum(m.variance for m in maps) / len(maps) ** 2
    return DoseMap(
        dose=total / len(maps),
        spacing=first.spacing,
        units=first.units,
        histories=sum(m.histories for m in maps),
        variance=var,
    )


def apply_body_mask(d_avg: DoseMap, v: Phantom, t_air: float = T_AIR) -> DoseMap:
    """Zero every voxel whose density is at or below ``t_air``."""
    _check_shape(d_avg.dose, v.density, "dose vs phantom")
    keep = v.density > t_air
    return d_avg.replace(
        dose=np.where(keep, d_avg.dose, 0.0),
        variance=None if d_avg.variance is None else np.where(keep, d_avg.variance, 0.0),
    )


def organ_dose_map(d: DoseMap, mask: np.ndarray) -> DoseMap:
    mask = np.asarray(mask, dtype=bool)
    _check_shape(d.dose, mask, "dose vs mask")
    return d.replace(
        dose=np.where(mask, d.dose, 0.0),
        variance=None if d.variance is None else np.where(mask, d.variance, 0.0),
    )


def mean_organ_dose(dose, mask, rho, voxel_volume: float = 1.0) -> float:
    """Mass-weighted mean dose over ``mask``: sum(D rho dV) / sum(rho dV).

    ``dose`` may be a :class:`DoseMap` or a plain array.
    """
    d = dose.dose if isinstance(dose, DoseMap) else np.asarray(dose, dtype=float)
    m = np.asarray(mask, dtype=bool)
    r = np.asarray(rho, dtype=float)
    _check_shape(d, m, "dose vs mask")
    _check_shape(d, r, "dose vs density")
    if not m.any():
        raise OrganAbsentError("organ absent: empty mask")
    w = r[m] * voxel_volume
    mass = w.sum()
    if mass <= 0:
        raise OrganAbsentError("organ absent: zero organ mass")
    value = float(np.dot(d[m], w) / mass)
    # guard against round-off drifting outside the data range
    return min(max(value, float(d[m].min())), float(d[m].max()))


def mean_organ_dose_sem(d: DoseMap, mask, rho) -> float:
    """Standard error of the mass-weighted organ mean, from per-voxel variances.

    Voxel estimates within one run are treated as independent, which slightly
    understates the true SEM.
    """
    if d.variance is None:
        return float("nan")
    m = np.asarray(mask, dtype=bool)
    w = np.asarray(rho, dtype=float)[m]
    return float(np.sqrt(np.sum(w**2 * d.variance[m])) / w.sum())


def organ_doses(d: DoseMap, masks, rho) -> dict[str, float]:
    """Mean dose for every organ label plus the body."""
    out = {}
    for label in LABELS:
        out[label] = mean_organ_dose(d, masks[label], rho)
    return out


@lru_cache(maxsize=4)
def _relative_attenuation(energy_kev: float) -> np.ndarray:
    table = CrossSectionTable.default()
    mu = np.array([table.mu_total(m, energy_kev) for m in range(len(table.materials))], dtype=float)
    return mu / mu[1]


def water_equivalent_diameter(
    phantom: Phantom,
    z_range: tuple[float, float] | None = None,
    energy_kev: float = 60.0,
) -> float:
    """Mean water-equivalent diameter (cm) over body slices.

    Per axial slice, ``A_w = sum(rel_att * pixel_area)`` over body voxels with
    ``rel_att = mu(material, E) * rho / mu_water(E)`` and ``D_w = 2 sqrt(A_w/pi)``.
    ``z_range`` (mm from the top of the volume) restricts the slices used.
    """
    body = phantom.density > T_AIR
    rel = _relative_attenuation(float(energy_kev))[phantom.material] * phantom.density
    rel = np.where(body, rel, 0.0)
    sx, sy, sz = phantom.spacing
    area_cm2 = rel.sum(axis=(1, 2)) * sx * sy / 100.0
    has_body = body.any(axis=(1, 2))
    if z_range is not None:
        zc = (np.arange(phantom.shape[0]) + 0.5) * sz
        has_body &= (zc >= z_range[0]) & (zc <= z_range[1])
    if not has_body.any():
        raise ValueError("empty body region")
    return float(np.mean(2.0 * np.sqrt(area_cm2[has_body] / np.pi)))


def dice(y, y_hat) -> float:
    """Dice overlap of two binary grids; two empty masks score 1."""
    a = np.asarray(y, dtype=bool)
    b = np.asarray(y_hat, dtype=bool)
    _check_shape(a, b, "dice")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


@dataclass
class ErrorReport:
    """Per-label PE (%) and RMSE (mGy) with mean and stdev over patients.

    ``pe`` and ``abs_err`` hold the raw per-patient values (rows = patients,
    columns = ``labels``); ``fold_of`` records the held-out fold of each row.
    """

    labels: tuple[str, ...]
    pe: np.ndarray
    abs_err: np.ndarray
    fold_of: np.ndarray = field(default=None)
    undefined_pe: dict[str, int] = field(default_factory=dict)

    @property
    def pe_mean(self) -> np.ndarray:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN labels stay NaN
            return np.nanmean(self.pe, axis=0)

    @property
    def pe_std(self) -> np.ndarray:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return np.nanstd(self.pe, axis=0)

    @property
    def rmse_mean(self) -> np.ndarray:
        return self.abs_err.mean(axis=0)

    @property
    def rmse_std(self) -> np.ndarray:
        return self.abs_err.std(axis=0)

    @property
    def rmse_pooled(self) -> np.ndarray:
        return np.sqrt(np.mean(self.abs_err**2, axis=0))

    def per_fold(self) -> dict[int, dict[str, list[float]]]:
        out = {}
        if self.fold_of is None:
            return out
        for f in np.unique(self.fold_of):
            sel = self.fold_of == f
            out[int(f)] = {
                "pe_mean": np.nanmean(self.pe[sel], axis=0).tolist(),
                "rmse": np.sqrt(np.mean(self.abs_err[sel] ** 2, axis=0)).tolist(),
            }
        return out

    def to_dict(self) -> dict:
        d = {
            label: {
                "pe_mean": float(self.pe_mean[i]),
                "pe_std": float(self.pe_std[i]),
                "rmse_mean": float(self.rmse_mean[i]),
                "rmse_std": float(self.rmse_std[i]),
                "rmse_pooled": float(self.rmse_pooled[i]),
            }
            for i, label in enumerate(self.labels)
        }
        return {"labels": list(self.labels), "per_label": d, "folds": self.per_fold(),
                "undefined_pe": dict(self.undefined_pe), "n": int(self.pe.shape[0])}

    @classmethod
    def concat(cls, reports: list["ErrorReport"]) -> "ErrorReport":
        labels = reports[0].labels
        folds = [r.fold_of if r.fold_of is not None else np.full(len(r.pe), i)
                 for i, r in enumerate(reports)]
        undefined: dict[str, int] = {}
        for r in reports:
            for k, v in r.undefined_pe.items():
                undefined[k] = undefined.get(k, 0) + v
        return cls(labels, np.vstack([r.pe for r in reports]),
                   np.vstack([r.abs_err for r in reports]), np.concatenate(folds), undefined)


def error_metrics(ref, pred, labels: tuple[str, ...] = LABELS, fold: int | None = None) -> ErrorReport:
    """PE and absolute/RMSE error between reference and predicted dose vectors.

    ``ref`` and ``pred`` are ``(n_patients, n_labels)`` arrays, single vectors,
    or label->value mappings. A zero reference makes that PE entry NaN and is
    counted in ``undefined_pe``.
    """
    r = _as_matrix(ref, labels)
    p = _as_matrix(pred, labels)
    _check_shape(r, p, "reference vs prediction")
    err = np.abs(r - p)
    with np.errstate(divide="ignore", invalid="ignore"):
        pe = np.where(r > 0, err / r * 100.0, np.nan)
    undefined = {labels[j]: int(n) for j, n in enumerate(np.isnan(pe).sum(axis=0)) if n}
    if undefined:
        warnings.warn(f"PE undefined for zero reference dose: {undefined}", RuntimeWarning, stacklevel=2)
    fold_of = None if fold is None else np.full(r.shape[0], fold)
    return ErrorReport(tuple(labels), pe, err, fold_of, undefined)


def _as_matrix(v, labels) -> np.ndarray:
    if isinstance(v, dict):
        return np.array([[float(v[k]) for k in labels]])
    arr = np.asarray(v, dtype=float)
    return arr[None, :] if arr.ndim == 1 else arr


def r2_identity(ref, pred) -> float:
    """Coefficient of determination of ``pred`` against the identity line y = x."""
    r = np.asarray(ref, dtype=float)
    p = np.asarray(pred, dtype=float)
    ss_res = np.sum((r - p) ** 2)
    ss_tot = np.sum((r - r.mean()) ** 2)
    if ss_tot == 0:
        return 1.0 if ss_res == 0 else float("-inf")
    return float(1.0 - ss_res / ss_tot)
