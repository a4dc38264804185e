"""Synthetic scout radiographs and the 3-channel model input.

Scouts are noiseless parallel-beam line integrals of mu(60 keV) through the
phantom, resampled onto a fixed 690 x 530 grid of 1 mm pixels. Rows run
along z (superior at row 0); columns run along x for the frontal view and
along y for the lateral view. The phantom is centred on the grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .errors import ShapeMismatchError
from .phantom import Phantom
from .physics import CrossSectionTable

ROWS, COLS = 690, 530
PIXEL_MM = 1.0
EFFECTIVE_KEV = 60.0
CHANNELS = ("lateral", "frontal", "range")


@dataclass(frozen=True)
class ScoutLayout:
    """Maps image rows/columns to phantom millimetres.

    Row ``r`` is centred at ``z = z_offset + (r + 0.5) * pixel``; column
    ``c`` at ``lateral_offset + (c + 0.5) * pixel``.
    """

    z_offset: float = 0.0
    lateral_offset: float = 0.0
    rows: int = ROWS
    cols: int = COLS
    pixel: float = PIXEL_MM

    @classmethod
    def centred(cls, phantom: Phantom, view: str = "frontal") -> "ScoutLayout":
        ex, ey, ez = phantom.extent_mm
        width = ex if view == "frontal" else ey
        return cls(ez / 2 - ROWS * PIXEL_MM / 2, width / 2 - COLS * PIXEL_MM / 2)

    def row_centres(self) -> np.ndarray:
        return self.z_offset + (np.arange(self.rows) + 0.5) * self.pixel

    def col_centres(self) -> np.ndarray:
        return self.lateral_offset + (np.arange(self.cols) + 0.5) * self.pixel


@dataclass
class ScoutImage:
    data: np.ndarray
    view: str
    layout: ScoutLayout = field(default_factory=ScoutLayout)

    def __post_init__(self):
        if self.view not in ("frontal", "lateral"):
            raise ValueError(f"unknown view {self.view!r}")

    @property
    def pixel_spacing(self) -> tuple[float, float]:
        return (self.layout.pixel, self.layout.pixel)


@lru_cache(maxsize=2)
def _mu_per_material(energy_kev: float) -> np.ndarray:
    t = CrossSectionTable.default()
    return np.array([float(t.mu_total(m, energy_kev)) for m in range(len(t.materials))])


def render_scout(p: Phantom, view: str, energy_kev: float = EFFECTIVE_KEV) -> ScoutImage:
    """Parallel-beam projection (dimensionless line integral of mu) of ``p``.

    Frontal projects along y (AP), lateral along x.
    """
    if view not in ("frontal", "lateral"):
        raise ValueError(f"unknown view {view!r}")
    if p.density.size == 0:
        raise ValueError("empty phantom")
    ex, ey, ez = p.extent_mm
    width = ex if view == "frontal" else ey
    if ez > ROWS * PIXEL_MM or width > COLS * PIXEL_MM:
        need_r = max(0.0, ez - ROWS * PIXEL_MM)
        need_c = max(0.0, width - COLS * PIXEL_MM)
        raise ValueError(
            f"phantom ({width:.0f} x {ez:.0f} mm) exceeds the {COLS}x{ROWS} mm scout field; "
            f"needs {need_c:.0f} mm more columns and {need_r:.0f} mm more rows"
        )
    mu = _mu_per_material(float(energy_kev))[p.material] * p.density  # 1/cm
    sx, sy, sz = p.spacing
    if view == "frontal":
        proj = mu.sum(axis=1) * sy / 10.0  # (nz, nx)
        lat_sp = sx
    else:
        proj = mu.sum(axis=2) * sx / 10.0  # (nz, ny)
        lat_sp = sy
    layout = ScoutLayout.centred(p, view)
    z = layout.row_centres()
    c = layout.col_centres()
    zi = z / sz - 0.5
    ci = c / lat_sp - 0.5
    Zi, Ci = np.meshgrid(zi, ci, indexing="ij")
    img = ndimage.map_coordinates(proj, [Zi, Ci], order=1, mode="nearest")
    inside = ((z >= 0) & (z <= ez))[:, None] & ((c >= 0) & (c <= width))[None, :]
    img = np.where(inside, img, 0.0)
    return ScoutImage(img, view, layout)


def scan_range_channel(z_start: float, z_end: float, layout: ScoutLayout | None = None) -> np.ndarray:
    """Binary row band: rows whose centre lies in ``[z_start, z_end)`` are 1."""
    layout = layout or ScoutLayout()
    if not z_end > z_start:
        raise ValueError(f"empty or inverted scan range [{z_start}, {z_end}]")
    z = layout.row_centres()
    lo = layout.z_offset
    hi = layout.z_offset + layout.rows * layout.pixel
    if z_start < lo - 1e-9 or z_end > hi + 1e-9:
        raise ValueError(f"scan range [{z_start}, {z_end}] outside scout extent [{lo}, {hi}]")
    rows = (z >= z_start) & (z < z_end)
    out = np.zeros((layout.rows, layout.cols), dtype=np.float32)
    out[rows, :] = 1.0
    return out


def range_from_channel(channel: np.ndarray, layout: ScoutLayout | None = None) -> tuple[float, float]:
    """Recover ``(z_start, z_end)`` from a range channel."""
    layout = layout or ScoutLayout()
    rows = np.flatnonzero(np.asarray(channel).max(axis=1) > 0.5)
    if rows.size == 0:
        raise ValueError("empty range channel")
    z = layout.row_centres()
    half = layout.pixel / 2
    return float(z[rows[0]] - half), float(z[rows[-1]] + half)


@dataclass
class ModelInput:
    """Channels (lateral, frontal, range) stacked as ``data[3, rows, cols]``."""

    data: np.ndarray
    bounds: dict = field(default_factory=dict)
    channels: tuple[str, ...] = CHANNELS

    def denormalize(self) -> tuple[np.ndarray, np.ndarray]:
        out = []
        for i, view in enumerate(("lateral", "frontal")):
            lo, hi = self.bounds[view]
            out.append(self.data[i].astype(np.float64) * (hi - lo) + lo)
        return out[0], out[1]


def scout_bounds(scouts: list[ScoutImage]) -> dict[str, tuple[float, float]]:
    """Cohort-level (min, max) per view, with min pinned at 0."""
    out = {}
    for view in ("lateral", "frontal"):
        vals = [float(s.data.max()) for s in scouts if s.view == view]
        out[view] = (0.0, max(vals) if vals else 1.0)
    return out


def compose_input(ls: ScoutImage, fs: ScoutImage, sr: np.ndarray, bounds: dict | None = None) -> ModelInput:
    """Normalize both scouts with cohort bounds and stack with the range band."""
    if ls.view != "lateral" or fs.view != "frontal":
        raise ValueError(f"expected (lateral, frontal) scouts, got ({ls.view}, {fs.view})")
    for arr in (ls.data, fs.data, sr):
        if arr.shape != (ROWS, COLS):
            raise ShapeMismatchError(f"channel shape {arr.shape} != {(ROWS, COLS)}")
    bounds = bounds or scout_bounds([ls, fs])
    planes = []
    for img in (ls, fs):
        lo, hi = bounds[img.view]
        span = hi - lo if hi > lo else 1.0
        planes.append(np.clip((img.data - lo) / span, 0.0, 1.0))
    planes.append((np.asarray(sr) > 0.5).astype(np.float64))
    return ModelInput(np.stack(planes).astype(np.float32), dict(bounds))
