"""Monte Carlo photon transport through voxel phantoms (Woodcock tracking).

Energy deposits are tallied as integers in units of ``QUANTUM_EV`` so that
the merged tally does not depend on how histories are split among workers.
Each history draws from its own counter-based SplitMix64 stream keyed on
``(seed, history index)``.

Coordinates inside the kernels are in cm with the origin at the grid corner;
voxel ``[iz, iy, ix]`` spans ``[ix*sx, (ix+1)*sx)`` etc.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .errors import InvariantError
from .physics import CrossSectionTable, ELECTRON_REST_KEV, compton_energy
from .source import (
    BowtieProfile, HeelModel, ScannerGeometry, SourceModel, Spectrum, _emit, helical_poses,
)

log = logging.getLogger(__name__)

RAW_UNITS = "eV/g/photon"
MGY_UNITS = "mGy"
QUANTUM_EV = 1e-6
_KEV_TO_Q = 1e3 / QUANTUM_EV
CUTOFF_KEV = 5.0
CALIBRATION_MGY_PER_RAW = 1.8143  # mGy per (eV/g/photon) at 100 mAs

# counters layout
C_REAL, C_VIRTUAL, C_PHOTO, C_COMPTON, C_RAYLEIGH, C_CUTOFF, C_ESCAPE, C_MISSED, \
    C_ZERO_MASS, C_MAJORANT = range(10)
N_COUNTERS = 10
COUNTER_NAMES = ("real", "virtual", "photoelectric", "compton", "rayleigh", "cutoff",
                 "escape", "missed_grid", "zero_mass_redirect", "majorant_violation")

EV_ESCAPE, EV_REAL, EV_VIRTUAL = 0, 1, 2


@dataclass
class DoseMap:
    """Absorbed dose on a phantom grid.

    ``variance`` is the per-voxel variance of the dose estimate, derived from
    squared-sum tallies over independent history batches.
    """

    dose: np.ndarray
    spacing: tuple[float, float, float]
    units: str = RAW_UNITS
    histories: int = 0
    variance: np.ndarray | None = None
    energy: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)

    def replace(self, **kw) -> "DoseMap":
        return replace(self, **kw)

    @property
    def sem(self) -> np.ndarray | None:
        return None if self.variance is None else np.sqrt(self.variance)


@dataclass
class TransportOptions:
    rayleigh: bool = True
    scatter: bool = True  # False: every real interaction absorbs the photon
    cutoff_kev: float = CUTOFF_KEV
    n_batches: int = 10


# --- RNG ------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_KEY = np.uint64(0xD1B54A32D192ED03)


@numba.njit(cache=True)
def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@numba.njit(cache=True)
def _stream_key(seed, history):
    return _mix64(_mix64(np.uint64(seed)) ^ (np.uint64(history) * _KEY + _GOLDEN))


@numba.njit(cache=True)
def _uniform(st):
    """Uniform double in (0, 1]; advances the single-element state ``st``."""
    st[0] += _GOLDEN
    z = _mix64(st[0])
    return (float(z >> np.uint64(11)) + 1.0) * (1.0 / 9007199254740992.0)


# --- physics lookups --------------------------------------------------------


@numba.njit(cache=True)
def _grid_pos(e, ln_e0, dln, n):
    p = (math.log(e) - ln_e0) / dln
    if p < 0.0:
        p = 0.0
    i = int(p)
    if i > n - 2:
        i = n - 2
    return i, p - i


@numba.njit(cache=True)
def _interp(lnv, i, t):
    return math.exp(lnv[i] + t * (lnv[i + 1] - lnv[i]))


@numba.njit(cache=True)
def _mass_mu(ln_pe, ln_co, ln_ra, n_mat, i, t, out, rayleigh):
    """Fill out[m, 0..2] with mass coefficients of each material."""
    for m in range(n_mat):
        out[m, 0] = _interp(ln_pe[m], i, t)
        out[m, 1] = _interp(ln_co[m], i, t)
        out[m, 2] = _interp(ln_ra[m], i, t) if rayleigh else 0.0


# --- geometry helpers -------------------------------------------------------


@numba.njit(cache=True)
def _enter_box(x, y, z, u, v, w, bx, by, bz):
    """Distance to entry into [0,bx]x[0,by]x[0,bz], or -1 if the ray misses."""
    tmin = 0.0
    tmax = 1e30
    for k in range(3):
        if k == 0:
            o, d, b = x, u, bx
        elif k == 1:
            o, d, b = y, v, by
        else:
            o, d, b = z, w, bz
        if abs(d) < 1e-300:
            if o < 0.0 or o > b:
                return -1.0
        else:
            t1 = (0.0 - o) / d
            t2 = (b - o) / d
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > tmin:
                tmin = t1
            if t2 < tmax:
                tmax = t2
            if tmin > tmax:
                return -1.0
    return tmin


@numba.njit(cache=True)
def _rotate(u, v, w, cos_t, phi):
    """Rotate unit vector (u, v, w) by polar angle acos(cos_t) and azimuth phi."""
    sin_t = math.sqrt(max(0.0, 1.0 - cos_t * cos_t))
    cp = math.cos(phi)
    sp = math.sin(phi)
    if abs(w) > 0.99999:
        sgn = 1.0 if w > 0 else -1.0
        return sin_t * cp, sin_t * sp, sgn * cos_t
    tmp = math.sqrt(1.0 - w * w)
    nu = sin_t * (u * w * cp - v * sp) / tmp + u * cos_t
    nv = sin_t * (v * w * cp + u * sp) / tmp + v * cos_t
    nw = -sin_t * cp * tmp + w * cos_t
    norm = math.sqrt(nu * nu + nv * nv + nw * nw)
    return nu / norm, nv / norm, nw / norm


@numba.njit(cache=True)
def _sample_kn_cos(e, st):
    """cos(scatter angle) from Klein-Nishina by rejection against f(1) = 1."""
    k = e / ELECTRON_REST_KEV
    while True:
        mu = 2.0 * _uniform(st) - 1.0
        r = 1.0 / (1.0 + k * (1.0 - mu))
        f = 0.5 * r * r * (r + 1.0 / r - (1.0 - mu * mu))
        if _uniform(st) <= f:
            return mu


@numba.njit(cache=True)
def _sample_thomson_cos(st):
    while True:
        mu = 2.0 * _uniform(st) - 1.0
        if 2.0 * _uniform(st) <= 1.0 + mu * mu:
            return mu


@numba.njit(cache=True)
def _nearest_massive(density, iz, iy, ix):
    nz, ny, nx = density.shape
    rmax = max(nz, max(ny, nx))
    for r in range(1, rmax):
        best = -1
        bd = 1e30
        for dz in range(-r, r + 1):
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    z = iz + dz
                    y = iy + dy
                    x = ix + dx
                    if 0 <= z < nz and 0 <= y < ny and 0 <= x < nx and density[z, y, x] > 0.0:
                        d = dz * dz + dy * dy + dx * dx
                        if d < bd:
                            bd = d
                            best = (z * ny + y) * nx + x
        if best >= 0:
            return best
    return -1


@numba.njit(cache=True)
def _deposit(tally, density, iz, iy, ix, q, counters):
    if density[iz, iy, ix] > 0.0:
        tally[iz, iy, ix] += q
        return
    flat = _nearest_massive(density, iz, iy, ix)
    counters[C_ZERO_MASS] += 1
    if flat >= 0:
        ny = density.shape[1]
        nx = density.shape[2]
        tally[flat // (ny * nx), (flat // nx) % ny, flat % nx] += q


# --- core transport ---------------------------------------------------------


@numba.njit(cache=True)
def _transport(x, y, z, u, v, w, e, st, density, material, sx, sy, sz,
               ln_pe, ln_co, ln_ra, ln_e0, dln, maj_seg, rayleigh, scatter, cutoff,
               tally, totals, counters, mu_buf):
    """Follow one photon to absorption or escape; returns nothing, tallies in place."""
    nz, ny, nx = density.shape
    bx = nx * sx
    by = ny * sy
    bz = nz * sz
    n_mat = ln_pe.shape[0]
    n_e = ln_pe.shape[1]
    t0 = _enter_box(x, y, z, u, v, w, bx, by, bz)
    if t0 < 0.0:
        totals[2] += np.int64(round(e * _KEV_TO_Q))
        counters[C_MISSED] += 1
        return
    x += u * t0
    y += v * t0
    z += w * t0
    i, t = _grid_pos(e, ln_e0, dln, n_e)
    _mass_mu(ln_pe, ln_co, ln_ra, n_mat, i, t, mu_buf, rayleigh)
    maj = maj_seg[i]
    while True:
        s = -math.log(_uniform(st)) / maj
        x += u * s
        y += v * s
        z += w * s
        if x < 0.0 or y < 0.0 or z < 0.0 or x >= bx or y >= by or z >= bz:
            totals[2] += np.int64(round(e * _KEV_TO_Q))
            counters[C_ESCAPE] += 1
            return
        ix = int(x / sx)
        iy = int(y / sy)
        iz = int(z / sz)
        if ix >= nx:
            ix = nx - 1
        if iy >= ny:
            iy = ny - 1
        if iz >= nz:
            iz = nz - 1
        m = material[iz, iy, ix]
        rho = density[iz, iy, ix]
        mu_pe = mu_buf[m, 0] * rho
        mu_co = mu_buf[m, 1] * rho
        mu_ra = mu_buf[m, 2] * rho
        mu_tot = mu_pe + mu_co + mu_ra
        if mu_tot > maj * (1.0 + 1e-12):
            counters[C_MAJORANT] += 1
            return
        r = _uniform(st) * maj
        if r >= mu_tot:
            counters[C_VIRTUAL] += 1
            continue
        counters[C_REAL] += 1
        if (not scatter) or r < mu_pe:
            counters[C_PHOTO] += 1
            q = np.int64(round(e * _KEV_TO_Q))
            _deposit(tally, density, iz, iy, ix, q, counters)
            totals[1] += q
            return
        if r < mu_pe + mu_co:
            counters[C_COMPTON] += 1
            cos_t = _sample_kn_cos(e, st)
            e_new = e / (1.0 + (e / ELECTRON_REST_KEV) * (1.0 - cos_t))
            # quantize the deposit first so the photon's remaining energy
            # reconciles exactly with the integer tallies
            q = np.int64(round((e - e_new) * _KEV_TO_Q))
            _deposit(tally, density, iz, iy, ix, q, counters)
            totals[1] += q
            e = e - q / _KEV_TO_Q
        else:
            counters[C_RAYLEIGH] += 1
            cos_t = _sample_thomson_cos(st)
        u, v, w = _rotate(u, v, w, cos_t, 2.0 * math.pi * _uniform(st))
        if e < cutoff:
            counters[C_CUTOFF] += 1
            q = np.int64(round(e * _KEV_TO_Q))
            _deposit(tally, density, iz, iy, ix, q, counters)
            totals[1] += q
            return
        i, t = _grid_pos(e, ln_e0, dln, n_e)
        _mass_mu(ln_pe, ln_co, ln_ra, n_mat, i, t, mu_buf, rayleigh)
        maj = maj_seg[i]


@numba.njit(cache=True, nogil=True)
def _run_ct(h0, h1, seed, pose_ang, pose_xyz, iso_x, iso_y,
            fan_nodes, fan_pdf, fan_cdf, spec_e, spec_cdf, cone_nodes, cone_pdf, cone_cdf,
            density, material, sx, sy, sz, ln_pe, ln_co, ln_ra, ln_e0, dln, maj_seg,
            rayleigh, scatter, cutoff, tally, totals, counters):
    n_pose = pose_ang.shape[0]
    st = np.zeros(1, dtype=np.uint64)
    mu_buf = np.empty((ln_pe.shape[0], 3))
    for h in range(h0, h1):
        st[0] = _stream_key(seed, h)
        k = h % n_pose
        u0 = _uniform(st)
        u1 = _uniform(st)
        u2 = _uniform(st)
        phi, theta, e, u, v, w = _emit(u0, u1, u2, pose_ang[k], fan_nodes, fan_pdf, fan_cdf,
                                       spec_e, spec_cdf, cone_nodes, cone_pdf, cone_cdf)
        # pose positions are mm relative to the rotation axis; grid frame is cm
        x = (pose_xyz[k, 0] + iso_x) / 10.0
        y = (pose_xyz[k, 1] + iso_y) / 10.0
        z = pose_xyz[k, 2] / 10.0
        q = np.int64(round(e * _KEV_TO_Q))
        totals[0] += q
        e = q / _KEV_TO_Q
        _transport(x, y, z, u, v, w, e, st, density, material, sx, sy, sz,
                   ln_pe, ln_co, ln_ra, ln_e0, dln, maj_seg, rayleigh, scatter, cutoff,
                   tally, totals, counters, mu_buf)


@numba.njit(cache=True, nogil=True)
def _run_pencil(h0, h1, seed, origin, direction, energy,
                density, material, sx, sy, sz, ln_pe, ln_co, ln_ra, ln_e0, dln, maj_seg,
                rayleigh, scatter, cutoff, tally, totals, counters):
    st = np.zeros(1, dtype=np.uint64)
    mu_buf = np.empty((ln_pe.shape[0], 3))
    q = np.int64(round(energy * _KEV_TO_Q))
    e0 = q / _KEV_TO_Q
    for h in range(h0, h1):
        st[0] = _stream_key(seed, h)
        totals[0] += q
        _transport(origin[0], origin[1], origin[2], direction[0], direction[1], direction[2],
                   e0, st, density, material, sx, sy, sz, ln_pe, ln_co, ln_ra, ln_e0, dln,
                   maj_seg, rayleigh, scatter, cutoff, tally, totals, counters, mu_buf)


# --- Python-level API -------------------------------------------------------


@dataclass
class _Media:
    """Phantom arrays and cross-section tables packed for the kernels."""

    density: np.ndarray
    material: np.ndarray
    spacing_cm: tuple[float, float, float]
    ln_pe: np.ndarray
    ln_co: np.ndarray
    ln_ra: np.ndarray
    ln_e0: float
    dln: float
    maj_seg: np.ndarray

    @classmethod
    def build(cls, phantom, table: CrossSectionTable, rayleigh: bool = True) -> "_Media":
        density = np.ascontiguousarray(phantom.density, dtype=np.float64)
        material = np.ascontiguousarray(phantom.material, dtype=np.uint8)
        if material.max(initial=0) >= len(table.materials):
            raise ValueError("phantom material index not covered by the cross-section table")
        maj = majorant_table(density, material, table, rayleigh)
        return cls(
            density, material, tuple(s / 10.0 for s in phantom.spacing),
            np.log(table.photoelectric), np.log(table.compton), np.log(table.rayleigh),
            float(np.log(table.energies[0])), table.log_step, maj,
        )

    def args(self):
        sx, sy, sz = self.spacing_cm
        return (self.density, self.material, sx, sy, sz, self.ln_pe, self.ln_co, self.ln_ra,
                self.ln_e0, self.dln, self.maj_seg)


def majorant_table(density, material, table: CrossSectionTable, rayleigh: bool = True) -> np.ndarray:
    """Upper bound of total mu (1/cm) over the phantom, per energy-grid segment.

    Each log-log interpolated component is monotone between knots, so the
    per-component max of the two end knots bounds the segment.
    """
    n_mat = len(table.materials)
    rho_max = np.zeros(n_mat)
    for m in range(n_mat):
        sel = material == m
        if sel.any():
            rho_max[m] = density[sel].max()
    comps = [table.photoelectric, table.compton] + ([table.rayleigh] if rayleigh else [])
    seg = sum(np.maximum(c[:, :-1], c[:, 1:]) for c in comps)  # (n_mat, n_e-1)
    maj = (seg * rho_max[:, None]).max(axis=0)
    # never zero: keeps the free-path sampler finite in vacuum
    return np.maximum(maj, 1e-12) * (1.0 + 1e-9)


def _split(h0: int, h1: int, parts: int) -> list[tuple[int, int]]:
    n = h1 - h0
    return [(h0 + n * k // parts, h0 + n * (k + 1) // parts) for k in range(parts)]


def _run_batched(kernel, prefix_args, media: _Media, opts: TransportOptions, n: int,
                 seed: int, workers: int, phantom) -> DoseMap:
    shape = media.density.shape
    workers = max(1, int(workers))
    n_batches = max(1, min(int(opts.n_batches), n))
    total_q = np.zeros(shape, dtype=np.int64)
    sq_sum = np.zeros(shape, dtype=np.float64)
    totals = np.zeros(3, dtype=np.int64)
    counters = np.zeros(N_COUNTERS, dtype=np.int64)
    mass_g = phantom.density * phantom.voxel_volume_cc
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_mass = np.where(mass_g > 0, 1.0 / mass_g, 0.0)
    scale_ev = QUANTUM_EV
    tallies = [np.zeros(shape, dtype=np.int64) for _ in range(workers)]
    tot_w = [np.zeros(3, dtype=np.int64) for _ in range(workers)]
    cnt_w = [np.zeros(N_COUNTERS, dtype=np.int64) for _ in range(workers)]
    tail = media.args() + (bool(opts.rayleigh), bool(opts.scatter), float(opts.cutoff_kev))

    def work(j, lo, hi):
        tallies[j].fill(0)
        kernel(lo, hi, np.uint64(seed), *prefix_args, *tail, tallies[j], tot_w[j], cnt_w[j])

    with ThreadPoolExecutor(max_workers=workers) as pool:
        for b0, b1 in _split(0, n, n_batches):
            futs = [pool.submit(work, j, lo, hi) for j, (lo, hi) in enumerate(_split(b0, b1, workers))]
            for f in futs:
                f.result()
            batch = tallies[0].copy()
            for t in tallies[1:]:
                batch += t
            total_q += batch
            if b1 > b0:
                batch_dose = batch * scale_ev * inv_mass / (b1 - b0)
                sq_sum += batch_dose * batch_dose
    for j in range(workers):
        totals += tot_w[j]
        counters += cnt_w[j]
    if counters[C_MAJORANT]:
        raise InvariantError(f"majorant violated {counters[C_MAJORANT]} times")
    dose = total_q * scale_ev * inv_mass / n
    var = None
    if n_batches > 1:
        # variance of the mean across equal-ish batches
        var = np.clip(sq_sum / n_batches - dose * dose, 0.0, None) / (n_batches - 1)
    emitted, deposited, escaped = (int(v) for v in totals)
    energy = {
        "emitted_kev": emitted / _KEV_TO_Q,
        "deposited_kev": deposited / _KEV_TO_Q,
        "escaped_kev": escaped / _KEV_TO_Q,
        "emitted_q": emitted, "deposited_q": deposited, "escaped_q": escaped,
    }
    cnt = dict(zip(COUNTER_NAMES, (int(c) for c in counters)))
    if cnt["zero_mass_redirect"]:
        log.warning("%d deposits redirected from zero-mass voxels", cnt["zero_mass_redirect"])
    return DoseMap(dose, tuple(phantom.spacing), RAW_UNITS, n, var, energy, cnt)


def simulate_scan(
    phantom,
    geometry: ScannerGeometry,
    n_histories: int,
    seed: int,
    spectrum: Spectrum | None = None,
    bowtie: BowtieProfile | None = None,
    heel: HeelModel | None = None,
    workers: int = 1,
    options: TransportOptions | None = None,
    table: CrossSectionTable | None = None,
    source: SourceModel | None = None,
) -> DoseMap:
    """Simulate one helical acquisition; returns dose in eV/g/photon.

    History ``h`` is emitted from pose ``h mod n_poses``; the rotation axis
    passes through the centre of the phantom's x-y extent. Results are
    bit-identical for a given seed whatever ``workers`` is.
    """
    if n_histories < 1:
        raise ValueError("n_histories must be >= 1")
    geometry.validate()
    opts = options or TransportOptions()
    table = table or CrossSectionTable.default()
    src = source or SourceModel.build(geometry, spectrum, bowtie, heel)
    poses = helical_poses(geometry)
    ang = np.radians(np.array([p.angle_deg for p in poses]))
    xyz = np.array([p.position for p in poses], dtype=float)
    ex, ey, _ = phantom.extent_mm
    media = _Media.build(phantom, table, opts.rayleigh)
    prefix = (ang, xyz, ex / 2.0, ey / 2.0,
              src.fan_nodes, src.fan_pdf, src.fan_cdf, src.spec_energies, src.spec_cdf,
              src.cone_nodes, src.cone_pdf, src.cone_cdf)
    return _run_batched(_run_ct, prefix, media, opts, int(n_histories), int(seed), workers, phantom)


def simulate_pencil_beam(
    phantom,
    origin_mm,
    direction,
    energy_kev: float,
    n_histories: int,
    seed: int,
    workers: int = 1,
    options: TransportOptions | None = None,
    table: CrossSectionTable | None = None,
) -> DoseMap:
    """Mono-energetic pencil beam from ``origin_mm`` (grid frame) along ``direction``."""
    opts = options or TransportOptions()
    table = table or CrossSectionTable.default()
    media = _Media.build(phantom, table, opts.rayleigh)
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    o = np.asarray(origin_mm, dtype=float) / 10.0
    return _run_batched(_run_pencil, (o, d, float(energy_kev)), media, opts,
                        int(n_histories), int(seed), workers, phantom)


def calibrate_dose(d: DoseMap, factor: float = CALIBRATION_MGY_PER_RAW, mas: float = 100.0) -> DoseMap:
    """Convert eV/g/photon to mGy: dose * factor * mAs / 100."""
    if d.units != RAW_UNITS:
        raise ValueError(f"dose map already calibrated ({d.units})")
    k = factor * (mas / 100.0)
    return d.replace(
        dose=d.dose * k,
        units=MGY_UNITS,
        variance=None if d.variance is None else d.variance * k * k,
    )


def energy_balance_error(d: DoseMap) -> float:
    """|emitted - deposited - escaped| / emitted for a simulated map."""
    e = d.energy
    return abs(e["emitted_q"] - e["deposited_q"] - e["escaped_q"]) / e["emitted_q"]


# --- single-step helpers (testing surface) ----------------------------------


@dataclass
class PhotonState:
    position: np.ndarray  # cm, grid frame
    direction: np.ndarray
    energy: float


@dataclass
class Event:
    kind: str  # "real", "virtual" or "escape"
    position: np.ndarray
    voxel: tuple[int, int, int] | None = None
    energy: float = 0.0
    mu_local: float = 0.0


def woodcock_step(photon: PhotonState, phantom, table: CrossSectionTable, majorant: float,
                  rng: np.random.Generator, rayleigh: bool = True) -> Event:
    """One delta-tracking step: sample a flight with ``majorant`` and classify the site.

    ``photon.position`` is advanced in place. Raises :class:`InvariantError`
    if the local attenuation exceeds the majorant.
    """
    s = -np.log1p(-rng.random()) / majorant
    pos = photon.position + photon.direction * s
    photon.position = pos
    spacing_cm = np.array(phantom.spacing) / 10.0
    ext = spacing_cm * np.array(phantom.dims)
    if np.any(pos < 0) or np.any(pos >= ext):
        return Event("escape", pos, None, photon.energy)
    ix, iy, iz = (pos // spacing_cm).astype(int)
    m = int(phantom.material[iz, iy, ix])
    rho = float(phantom.density[iz, iy, ix])
    pe, co, ra = table.mass_coefficients(m, photon.energy)
    mu = float((pe + co + (ra if rayleigh else 0.0)) * rho)
    if mu > majorant * (1 + 1e-12):
        raise InvariantError(f"local mu {mu:g} exceeds majorant {majorant:g}")
    kind = "real" if rng.random() * majorant < mu else "virtual"
    return Event(kind, pos, (iz, iy, ix), photon.energy, mu)


def compton_scatter(photon: PhotonState, rng: np.random.Generator, cos_angle: float | None = None):
    """Klein-Nishina scatter; returns ``(scattered photon, deposited keV)``.

    Pass ``cos_angle`` to force the scattering angle.
    """
    e = photon.energy
    if cos_angle is None:
        st = np.array([rng.integers(0, 2**63, dtype=np.uint64)], dtype=np.uint64)
        cos_angle = _sample_kn_cos(e, st)
    e_new = float(compton_energy(e, cos_angle))
    u, v, w = _rotate(*photon.direction, float(cos_angle), 2 * np.pi * rng.random())
    return PhotonState(photon.position.copy(), np.array([u, v, w]), e_new), e - e_new


@numba.njit(cache=True)
def _kn_samples(e, n, seed):
    st = np.zeros(1, dtype=np.uint64)
    st[0] = _stream_key(seed, 0)
    out = np.empty(n)
    for i in range(n):
        out[i] = _sample_kn_cos(e, st)
    return out


def sample_klein_nishina(energy_kev: float, n: int, seed: int) -> np.ndarray:
    """``n`` scattering-angle cosines from the transport kernel's sampler."""
    return _kn_samples(float(energy_kev), int(n), np.uint64(seed))


@numba.njit(cache=True)
def _uniform_samples(seed, history, n):
    st = np.zeros(1, dtype=np.uint64)
    st[0] = _stream_key(seed, history)
    out = np.empty(n)
    for i in range(n):
        out[i] = _uniform(st)
    return out


def history_stream(seed: int, history: int, n: int) -> np.ndarray:
    """First ``n`` uniforms of the stream owned by one history."""
    return _uniform_samples(np.uint64(seed), np.uint64(history), int(n))
