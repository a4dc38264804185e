"""Experiment driver: cohort -> reference doses -> scouts -> k-fold training -> report.

Reference doses follow the chain used throughout the package: one helical
simulation per start angle, voxel-wise average over angles, air masking,
calibration to mGy, then mass-weighted organ means. Every artifact is written
in the formats of :mod:`voxeldose.fileio`; the manifest is line-delimited
JSON with one record per cohort member, in cohort order.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .dosimetry import (
    LABELS,
    ErrorReport,
    apply_body_mask,
    average_dose_maps,
    error_metrics,
    mean_organ_dose_sem,
    organ_doses,
    r2_identity,
    water_equivalent_diameter,
)
from .errors import ConfigurationError, InvariantError
from .fileio import load_scout, save_dose, save_masks, save_phantom, save_scout, write_dose_csv
from .phantom import CohortSpec, OrganMaskSet, Phantom, generate_synthetic_phantom
from .predictor import TrainConfig, train
from .scout import CHANNELS, ScoutImage, compose_input, render_scout, scan_range_channel, scout_bounds
from .source import ScannerGeometry, SourceModel
from .transport import (
    CALIBRATION_MGY_PER_RAW,
    DoseMap,
    calibrate_dose,
    energy_balance_error,
    simulate_scan,
)

log = logging.getLogger(__name__)

START_ANGLES_DEG = (0.0, 90.0, 180.0, 270.0)
ABLATIONS = {
    "scout_net": ("lateral", "frontal", "range"),
    "lateral_only": ("lateral", "range"),
    "frontal_only": ("frontal", "range"),
}
MANIFEST = "manifest.jsonl"


def derive_seed(master: int, *keys: int) -> int:
    """Independent 32-bit seed for a (stage, item, ...) key under ``master``."""
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])
    return int(ss.generate_state(1, np.uint32)[0])


# --- configuration -----------------------------------------------------------


def _coerce(raw: str, default):
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(float(raw))
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [t for t in raw.replace(",", " ").split() if t]
        if default and isinstance(default[0], str):
            return tuple(items)
        if default and isinstance(default[0], int) and not isinstance(default[0], bool):
            return tuple(int(float(t)) for t in items)
        return tuple(float(t) for t in items)
    return raw.strip()


def _section(cp: configparser.ConfigParser, name: str, cls):
    obj = cls()
    if not cp.has_section(name):
        return obj
    known = {f.name for f in fields(cls)}
    unknown = set(cp[name]) - known
    if unknown:
        raise ConfigurationError(f"[{name}] unknown keys: {sorted(unknown)}")
    kw = {k: _coerce(cp.get(name, k), getattr(obj, k)) for k in cp[name]}
    return replace(obj, **kw)


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one experiment from a master seed.

    The master ``seed`` overrides ``cohort.seed`` and seeds every simulation
    and training run through :func:`derive_seed`.
    """

    cohort: CohortSpec = field(default_factory=CohortSpec)
    geometry: ScannerGeometry = field(default_factory=ScannerGeometry)
    histories: int = 2_000_000
    start_angles: tuple[float, ...] = START_ANGLES_DEG
    folds: int = 5
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: Path = Path("experiment")
    seed: int = 0
    threads: int = 1
    ablations: bool = True
    range_margin_mm: float = 30.0
    keep_dose_maps: bool = True
    calibration: float = CALIBRATION_MGY_PER_RAW

    def validate(self) -> None:
        self.cohort.validate()
        self.geometry.validate()
        self.train.validate()
        a = [float(x) for x in self.start_angles]
        if not a:
            raise ConfigurationError("at least one start angle required")
        if len(set(a)) != len(a) or any(not 0.0 <= x < 360.0 for x in a):
            raise ConfigurationError(f"start angles must be distinct and in [0, 360): {a}")
        if self.folds < 2:
            raise ConfigurationError("fold count must be >= 2")
        if self.histories < 1:
            raise ConfigurationError("histories must be positive")
        if self.range_margin_mm < 0:
            raise ConfigurationError("range margin must be >= 0")

    @property
    def cohort_spec(self) -> CohortSpec:
        return replace(self.cohort, seed=int(self.seed))

    @classmethod
    def from_ini(cls, path) -> "ExperimentConfig":
        """Read sections ``[experiment]``, ``[cohort]``, ``[geometry]``, ``[train]``.

        ``out_dir`` is taken relative to the config file's directory.
        """
        path = Path(path)
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise ConfigurationError(f"cannot read experiment config {path}")
        base = cls()
        kw = {}
        if cp.has_section("experiment"):
            skip = {"cohort", "geometry", "train"}
            known = {f.name for f in fields(cls)} - skip
            unknown = set(cp["experiment"]) - known
            if unknown:
                raise ConfigurationError(f"[experiment] unknown keys: {sorted(unknown)}")
            for k in cp["experiment"]:
                raw = cp.get("experiment", k)
                kw[k] = Path(raw) if k == "out_dir" else _coerce(raw, getattr(base, k))
        if "out_dir" in kw and not kw["out_dir"].is_absolute():
            kw["out_dir"] = path.parent / kw["out_dir"]
        cfg = cls(
            cohort=_section(cp, "cohort", CohortSpec),
            geometry=ScannerGeometry.from_config(cp),
            train=_section(cp, "train", TrainConfig),
            **kw,
        )
        cfg.validate()
        return cfg

    def to_ini(self, path) -> None:
        cp = configparser.ConfigParser()
        cp["experiment"] = {
            f.name: _fmt(getattr(self, f.name))
            for f in fields(self)
            if f.name not in ("cohort", "geometry", "train")
        }
        cp["cohort"] = {f.name: _fmt(getattr(self.cohort, f.name)) for f in fields(CohortSpec)}
        self.geometry.to_config(cp)
        cp["train"] = {f.name: _fmt(getattr(self.train, f.name)) for f in fields(TrainConfig)}
        with open(path, "w") as fh:
            cp.write(fh)


# --- reference dataset -------------------------------------------------------


@dataclass
class ReferenceRecord:
    """One cohort member; paths are relative to the experiment directory."""

    patient_id: str
    index: int
    key: str
    status: str = "ok"
    phantom: str = ""
    masks: str = ""
    scouts: dict = field(default_factory=dict)
    dose_map: str | None = None
    scan_range: tuple[float, float] = (0.0, 0.0)
    doses: dict = field(default_factory=dict)
    dose_sem: dict = field(default_factory=dict)
    dw_cm: float = float("nan")
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_json(self) -> str:
        d = asdict(self)
        d["scan_range"] = list(self.scan_range)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ReferenceRecord":
        d = json.loads(line)
        d["scan_range"] = tuple(d["scan_range"])
        return cls(**d)

    def dose_vector(self, labels=LABELS) -> np.ndarray:
        return np.array([self.doses[k] for k in labels], dtype=float)

    def check(self, root: Path) -> None:
        if not self.ok:
            return
        for rel in [self.phantom, self.masks, *self.scouts.values()]:
            if not (root / rel).exists():
                raise FileNotFoundError(f"{self.patient_id}: missing {rel}")
        if not all(math.isfinite(v) for v in self.doses.values()):
            raise InvariantError(f"{self.patient_id}: non-finite dose")


def record_key(cfg: ExperimentConfig, index: int) -> str:
    """Content hash of every input that determines record ``index``."""
    payload = {
        "cohort": asdict(cfg.cohort_spec),
        "index": int(index),
        "geometry": asdict(cfg.geometry),
        "histories": int(cfg.histories),
        "start_angles": [float(a) for a in cfg.start_angles],
        "seed": int(cfg.seed),
        "range_margin_mm": float(cfg.range_margin_mm),
        "calibration": float(cfg.calibration),
        "keep_dose_maps": bool(cfg.keep_dose_maps),
        "version": __version__,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:20]


def scan_range_for(phantom: Phantom, masks: OrganMaskSet, rng: np.random.Generator,
                   margin_mm: float) -> tuple[float, float]:
    """Chest-abdomen-pelvis range: top of the lungs to the bottom of the bladder.

    Each end is pushed outwards by an independent uniform draw in
    ``[0, margin_mm]`` and clipped to the phantom.
    """
    sz = phantom.spacing[2]
    nz = phantom.shape[0]

    def z_extent(label):
        m = masks[label] if label in masks.masks else masks.body
        rows = np.flatnonzero(m.any(axis=(1, 2)))
        return rows[0] * sz, (rows[-1] + 1) * sz

    top = z_extent("lungs")[0] if "lungs" in masks.masks else 0.0
    bottom = z_extent("bladder")[1] if "bladder" in masks.masks else nz * sz
    lo, hi = rng.uniform(0.0, margin_mm, size=2) if margin_mm > 0 else (0.0, 0.0)
    z0 = max(0.0, top - lo)
    z1 = min(nz * sz, bottom + hi)
    return round(float(z0), 3), round(float(z1), 3)


def reference_dose_map(
    phantom: Phantom,
    geometry: ScannerGeometry,
    histories: int,
    seeds,
    start_angles=START_ANGLES_DEG,
    workers: int = 1,
    calibration: float = CALIBRATION_MGY_PER_RAW,
    source: SourceModel | None = None,
) -> tuple[DoseMap, list[DoseMap]]:
    """Simulate at each start angle, average, mask air and calibrate to mGy.

    Returns the calibrated map and the raw per-angle maps.
    """
    src = source or SourceModel.build(geometry)
    maps = []
    for delta, s in zip(start_angles, seeds):
        g = geometry.with_scan(geometry.scan_start_mm, geometry.scan_end_mm, start_angle=float(delta))
        d = simulate_scan(phantom, g, histories, int(s), workers=workers, source=src)
        err = energy_balance_error(d)
        if err > 1e-9:
            raise InvariantError(f"energy balance violated at start angle {delta}: {err:.3e}")
        if d.counters.get("majorant_violation", 0):
            raise InvariantError("majorant violated during transport")
        maps.append(d)
    avg = average_dose_maps(maps)
    masked = apply_body_mask(avg, phantom)
    return calibrate_dose(masked, calibration, geometry.tube_current_mas), maps


def _write_manifest(root: Path, records: list[ReferenceRecord]) -> None:
    tmp = root / (MANIFEST + ".tmp")
    with open(tmp, "w") as fh:
        for r in sorted(records, key=lambda r: r.index):
            fh.write(r.to_json() + "\n")
    os.replace(tmp, root / MANIFEST)


def read_manifest(root) -> list[ReferenceRecord]:
    path = Path(root) / MANIFEST
    if not path.exists():
        return []
    with open(path) as fh:
        return [ReferenceRecord.from_json(line) for line in fh if line.strip()]


def _build_record(cfg: ExperimentConfig, index: int, root: Path, src: SourceModel) -> ReferenceRecord:
    pid = f"P{index:03d}"
    rec = ReferenceRecord(pid, index, record_key(cfg, index))
    rel = Path("records") / pid
    (root / rel).mkdir(parents=True, exist_ok=True)
    try:
        phantom, masks = generate_synthetic_phantom(cfg.cohort_spec, index)
        z0, z1 = scan_range_for(phantom, masks, np.random.default_rng(derive_seed(cfg.seed, 3, index)),
                                cfg.range_margin_mm)
        geom = cfg.geometry.with_scan(z0, z1)
        seeds = [derive_seed(cfg.seed, 1, index, k) for k in range(len(cfg.start_angles))]
        dose, _ = reference_dose_map(phantom, geom, cfg.histories, seeds, cfg.start_angles,
                                     cfg.threads, cfg.calibration, src)
        rec.doses = organ_doses(dose, masks, phantom.density)
        rec.dose_sem = {k: mean_organ_dose_sem(dose, masks[k], phantom.density) for k in LABELS}
        rec.scan_range = (z0, z1)
        rec.dw_cm = water_equivalent_diameter(phantom, (z0, z1))

        save_phantom(root / rel / "phantom.vox", phantom)
        save_masks(root / rel / "masks", masks, phantom.spacing)
        rec.phantom = str(rel / "phantom.vox")
        rec.masks = str(rel / "masks")
        if cfg.keep_dose_maps:
            save_dose(root / rel / "dose.vox", dose)
            rec.dose_map = str(rel / "dose.vox")
        for view in ("frontal", "lateral"):
            save_scout(root / rel / f"{view}.scout", render_scout(phantom, view))
            rec.scouts[view] = str(rel / f"{view}.scout")
        rec.check(root)
    except Exception as exc:  # a bad member must not stop the cohort
        log.exception("record %s failed", pid)
        rec.status = "failed"
        rec.error = f"{type(exc).__name__}: {exc}"
    return rec


def build_reference_dataset(cfg: ExperimentConfig, resume: bool = False,
                            indices=None) -> list[ReferenceRecord]:
    """Generate, simulate and score every cohort member; write the manifest.

    With ``resume`` a record whose content hash matches a completed manifest
    entry (and whose files still exist) is reused without recomputation.
    Failed members are recorded with ``status = "failed"``.
    """
    cfg.validate()
    root = Path(cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    done = {}
    if resume:
        for r in read_manifest(root):
            try:
                r.check(root)
            except (FileNotFoundError, InvariantError):
                continue
            if r.ok:
                done[r.index] = r
    src = SourceModel.build(cfg.geometry)
    records: dict[int, ReferenceRecord] = {}
    wanted = range(cfg.cohort.count) if indices is None else indices
    for i in wanted:
        prev = done.get(i)
        if prev is not None and prev.key == record_key(cfg, i):
            records[i] = prev
            continue
        t0 = time.perf_counter()
        records[i] = _build_record(cfg, i, root, src)
        log.info("%s %s in %.1f s", records[i].patient_id, records[i].status, time.perf_counter() - t0)
        _write_manifest(root, list(records.values()))
    out = [records[i] for i in sorted(records)]
    _write_manifest(root, out)
    write_dose_csv(root / "reference_doses.csv", [(r.patient_id, r.doses) for r in out if r.ok])
    return out


# --- cross-validation --------------------------------------------------------


def fold_assignment(n: int, k: int, seed: int) -> np.ndarray:
    """Balanced random partition of ``n`` items into ``k`` folds."""
    if n < k:
        raise ValueError(f"dataset of {n} is smaller than {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    out = np.empty(n, dtype=int)
    for f, part in enumerate(np.array_split(perm, k)):
        out[part] = f
    return out


@dataclass
class Sample:
    patient_id: str
    scouts: dict[str, ScoutImage]
    scan_range: tuple[float, float]
    doses: np.ndarray


def load_samples(records: list[ReferenceRecord], root) -> list[Sample]:
    root = Path(root)
    out = []
    for r in records:
        if not r.ok:
            continue
        scouts = {}
        for view in ("frontal", "lateral"):
            s = load_scout(root / r.scouts[view])
            scouts[view] = ScoutImage(s.data.astype(np.float32), s.view, s.layout)
        out.append(Sample(r.patient_id, scouts, tuple(r.scan_range), r.dose_vector()))
    return out


def compose_sample(s: Sample, bounds: dict) -> np.ndarray:
    band = scan_range_channel(*s.scan_range, s.scouts["frontal"].layout)
    return compose_input(s.scouts["lateral"], s.scouts["frontal"], band, bounds).data


@dataclass
class CVResult:
    channels: tuple[str, ...]
    patient_ids: list[str]
    reference: np.ndarray
    prediction: np.ndarray
    fold_of: np.ndarray
    report: ErrorReport
    timings_ms: list[float] = field(default_factory=list)
    histories: dict = field(default_factory=dict)

    @property
    def r2(self) -> dict[str, float]:
        return {k: r2_identity(self.reference[:, j], self.prediction[:, j]) for j, k in enumerate(LABELS)}


def cross_validate(samples: list[Sample], cfg: ExperimentConfig, channels=CHANNELS,
                   leak: bool = False, train_cfg: TrainConfig | None = None,
                   model_dir=None) -> CVResult:
    """k-fold training and held-out evaluation; each sample is predicted once.

    Scout and dose normalization bounds come from the training split only.
    ``leak`` trains every fold on the full dataset; it exists to sanity-check
    the plumbing and must never be used for reporting.
    """
    n = len(samples)
    k = cfg.folds
    folds = fold_assignment(n, k, derive_seed(cfg.seed, 4))
    tcfg = replace(train_cfg or cfg.train, channels=tuple(channels))
    y = np.stack([s.doses for s in samples])
    pred = np.full_like(y, np.nan)
    timings: list[float] = []
    histories = {}
    for f in range(k):
        test = np.flatnonzero(folds == f)
        tr = np.arange(n) if leak else np.flatnonzero(folds != f)
        if len(test) == 0 or len(tr) == 0:
            raise ValueError(f"fold {f} is empty")
        bounds = scout_bounds([s.scouts[v] for i in tr for v in ("frontal", "lateral")
                               for s in [samples[i]]])
        x_tr = np.stack([compose_sample(samples[i], bounds) for i in tr])
        x_te = np.stack([compose_sample(samples[i], bounds) for i in test])
        t0 = time.perf_counter()
        model = train(x_tr, y[tr], replace(tcfg, seed=derive_seed(cfg.seed, 2, f)),
                      val=(x_te, y[test]))
        model.input_bounds = bounds
        log.info("fold %d (%s): trained %d samples in %.0f s", f, "+".join(channels), len(tr),
                 time.perf_counter() - t0)
        pred[test] = model.predict(x_te)
        timings.extend(model.timings_ms)
        histories[f] = model.history
        if model_dir is not None:
            Path(model_dir).mkdir(parents=True, exist_ok=True)
            model.save(Path(model_dir) / f"fold{f}.npz")
    reports = [error_metrics(y[folds == f], pred[folds == f], fold=f) for f in range(k)]
    rep = ErrorReport.concat(reports)
    order = np.concatenate([np.flatnonzero(folds == f) for f in range(k)])
    inv = np.argsort(order)
    rep = ErrorReport(rep.labels, rep.pe[inv], rep.abs_err[inv], rep.fold_of[inv], rep.undefined_pe)
    return CVResult(tuple(channels), [s.patient_id for s in samples], y, pred, folds, rep,
                    timings, histories)


# --- reporting ---------------------------------------------------------------


def emit_report(result: CVResult, out_dir, ablations: dict[str, CVResult] | None = None,
                extra: dict | None = None) -> dict:
    """Write ``predictions.csv``, ``report.json`` and one SVG scatter per label."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if len(result.patient_ids) == 0:
        raise ValueError("empty report")
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "fold"] + [f"{k}_ref" for k in LABELS] + [f"{k}_pred" for k in LABELS])
        for i, pid in enumerate(result.patient_ids):
            w.writerow([pid, int(result.fold_of[i])]
                       + [repr(float(v)) for v in result.reference[i]]
                       + [repr(float(v)) for v in result.prediction[i]])
    r2 = result.r2
    for j, label in enumerate(LABELS):
        ref, pr = result.reference[:, j], result.prediction[:, j]
        fig, ax = plt.subplots(figsize=(3.6, 3.6))
        ax.scatter(ref, pr, s=12, alpha=0.8)
        lo = float(min(ref.min(), pr.min()))
        hi = float(max(ref.max(), pr.max()))
        pad = 0.05 * (hi - lo or 1.0)
        ax.plot([lo - pad, hi + pad], [lo - pad, hi + pad], "k--", lw=0.8)
        ax.set_xlim(lo - pad, hi + pad)
        ax.set_ylim(lo - pad, hi + pad)
        ax.set_xlabel("reference dose (mGy)")
        ax.set_ylabel("predicted dose (mGy)")
        ax.set_title(label)
        ax.text(0.05, 0.92, f"$R^2$ = {r2[label]:.3f}", transform=ax.transAxes)
        fig.tight_layout()
        fig.savefig(out / f"scatter_{label}.svg")
        plt.close(fig)
    t = np.asarray(result.timings_ms, dtype=float)
    summary = {
        "channels": list(result.channels),
        "errors": result.report.to_dict(),
        "r2_identity": r2,
        "inference_ms_per_scan": {"mean": float(t.mean()) if t.size else None,
                                  "max": float(t.max()) if t.size else None},
    }
    if ablations:
        summary["ablations"] = {
            name: {"channels": list(r.channels),
                   "pe_mean": dict(zip(LABELS, r.report.pe_mean.tolist())),
                   "pe_overall": float(np.nanmean(r.report.pe)),
                   "r2_identity": r.r2}
            for name, r in ablations.items()
        }
        summary["ordering"] = sorted(summary["ablations"], key=lambda n: summary["ablations"][n]["pe_overall"])
    if extra:
        summary.update(extra)
    with open(out / "report.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def run_experiment(cfg: ExperimentConfig, resume: bool = False) -> tuple[list[ReferenceRecord], dict]:
    """Full pipeline. Returns the records and the report summary."""
    t0 = time.perf_counter()
    records = build_reference_dataset(cfg, resume=resume)
    t_ref = time.perf_counter() - t0
    root = Path(cfg.out_dir)
    samples = load_samples(records, root)
    runs = {}
    for name, chans in ABLATIONS.items():
        if name != "scout_net" and not cfg.ablations:
            continue
        runs[name] = cross_validate(samples, cfg, chans,
                                    model_dir=root / "models" / name if name == "scout_net" else None)
    main = runs["scout_net"]
    extra = {
        "failed_records": [r.patient_id for r in records if not r.ok],
        "n_records": len(records),
        "dw_cm": {r.patient_id: r.dw_cm for r in records if r.ok},
        "seconds": {"reference": t_ref, "total": time.perf_counter() - t0},
    }
    summary = emit_report(main, root / "report", runs if len(runs) > 1 else None, extra)
    return records, summary
