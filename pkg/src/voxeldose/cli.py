"""``voxeldose`` command line: thin wrappers over the library functions."""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .dosimetry import apply_body_mask, average_dose_maps, organ_doses
from .errors import ConfigurationError
from .fileio import (
    load_dose,
    load_masks,
    load_phantom,
    load_scout,
    save_dose,
    save_masks,
    save_phantom,
    save_scout,
    write_dose_csv,
)
from .phantom import CohortSpec, generate_synthetic_phantom
from .scout import compose_input, render_scout, scan_range_channel, scout_bounds
from .source import ScannerGeometry
from .transport import RAW_UNITS, calibrate_dose, energy_balance_error, simulate_scan

log = logging.getLogger("voxeldose")


def _parse_range(s: str) -> tuple[float, float]:
    try:
        a, b = s.split(":")
        return float(a), float(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected z0:z1 in mm, got {s!r}") from None


def cmd_phantom_gen(args) -> int:
    from .pipeline import _section

    cp = configparser.ConfigParser()
    if not cp.read(args.spec):
        raise ConfigurationError(f"cannot read {args.spec}")
    spec = _section(cp, "cohort", CohortSpec)
    indices = range(spec.count) if args.index is None else [args.index]
    out = Path(args.out)
    for i in indices:
        p, masks = generate_synthetic_phantom(spec, i)
        d = out / f"P{i:03d}"
        d.mkdir(parents=True, exist_ok=True)
        save_phantom(d / "phantom.vox", p)
        save_masks(d / "masks", masks, p.spacing)
        print(f"{d}: dims {p.dims}")
    return 0


def cmd_simulate(args) -> int:
    p = load_phantom(args.phantom)
    g = ScannerGeometry.from_config(args.geometry) if args.geometry else ScannerGeometry()
    if args.range:
        g = g.with_scan(*args.range)
    g = replace(g, start_angle_deg=float(args.start_angle))
    d = simulate_scan(p, g, args.histories, args.seed, workers=args.threads)
    save_dose(args.out, d)
    print(f"{args.out}: {d.histories} histories, energy balance error {energy_balance_error(d):.2e}")
    return 0


def cmd_organ_dose(args) -> int:
    p = load_phantom(args.phantom)
    masks = load_masks(args.masks)
    d = average_dose_maps([load_dose(f) for f in args.dose])
    d = apply_body_mask(d, p)
    if d.units == RAW_UNITS:
        d = calibrate_dose(d, mas=args.mas)
    doses = organ_doses(d, masks, p.density)
    pid = args.patient_id or Path(args.phantom).parent.name or "patient"
    write_dose_csv(args.out, [(pid, doses)])
    for k, v in doses.items():
        print(f"{k:10s} {v:.4f} mGy")
    return 0


def cmd_scout_render(args) -> int:
    p = load_phantom(args.phantom)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for view in ("frontal", "lateral"):
        save_scout(out / f"{view}.scout", render_scout(p, view))
    print(f"{out}: frontal.scout lateral.scout")
    return 0


def cmd_train(args) -> int:
    from .pipeline import ExperimentConfig, load_samples, read_manifest, compose_sample
    from .predictor import train, write_training_log

    cfg = ExperimentConfig.from_ini(args.config) if args.config else ExperimentConfig()
    records = [r for r in read_manifest(args.data) if r.ok]
    if not records:
        raise ConfigurationError(f"no completed records in {args.data}")
    samples = load_samples(records, args.data)
    bounds = scout_bounds([s.scouts[v] for s in samples for v in ("frontal", "lateral")])
    x = np.stack([compose_sample(s, bounds) for s in samples])
    y = np.stack([s.doses for s in samples])
    model = train(x, y, replace(cfg.train, threads=args.threads or cfg.train.threads))
    model.input_bounds = bounds
    model.save(args.out)
    log_path = Path(args.out).with_name(Path(args.out).stem + "_log.csv")
    write_training_log(log_path, model.history)
    print(f"{args.out}: trained on {len(samples)} samples; log {log_path}")
    return 0


def cmd_predict(args) -> int:
    from .predictor import DosePredictor

    model = DosePredictor.load(args.ckpt)
    if not model.input_bounds:
        raise ConfigurationError("checkpoint carries no scout normalization bounds")
    d = Path(args.scouts)
    lat = load_scout(d / "lateral.scout")
    fr = load_scout(d / "frontal.scout")
    band = scan_range_channel(*args.range, fr.layout)
    x = compose_input(lat, fr, band, model.input_bounds)
    doses = model.predict_dict(x)
    write_dose_csv(args.out, [(args.patient_id or d.name, doses)])
    print(f"{args.out}: {model.timings_ms[-1]:.1f} ms per scan")
    return 0


def cmd_run(args) -> int:
    from .pipeline import ExperimentConfig, run_experiment

    cfg = ExperimentConfig.from_ini(args.config)
    if args.threads:
        cfg = replace(cfg, threads=args.threads, train=replace(cfg.train, threads=args.threads))
    records, summary = run_experiment(cfg, resume=args.resume)
    failed = summary["failed_records"]
    print(f"{len(records) - len(failed)}/{len(records)} records ok; report in {cfg.out_dir}/report")
    for r in records:
        if not r.ok:
            print(f"  {r.patient_id} failed: {r.error}", file=sys.stderr)
    return 0 if not failed else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="voxeldose", description="CT organ dose simulation and scout-based prediction")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="phantom utilities").add_subparsers(dest="action", required=True)
    g = ph.add_parser("gen", help="generate synthetic phantoms from a [cohort] config")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--index", type=int)
    g.set_defaults(func=cmd_phantom_gen)

    s = sub.add_parser("simulate", help="Monte Carlo dose for one helical scan")
    s.add_argument("--phantom", required=True)
    s.add_argument("--geometry")
    s.add_argument("--histories", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--start-angle", type=float, default=0.0)
    s.add_argument("--range", type=_parse_range, help="scan range z0:z1 in mm")
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    o = sub.add_parser("organ-dose", help="mean organ doses (mGy) from one or more dose maps")
    o.add_argument("--dose", required=True, nargs="+")
    o.add_argument("--masks", required=True)
    o.add_argument("--phantom", required=True)
    o.add_argument("--mas", type=float, default=100.0)
    o.add_argument("--patient-id")
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_organ_dose)

    sc = sub.add_parser("scout", help="scout utilities").add_subparsers(dest="action", required=True)
    r = sc.add_parser("render", help="render frontal and lateral scouts")
    r.add_argument("--phantom", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_scout_render)

    t = sub.add_parser("train", help="train a predictor on an experiment directory")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--threads", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict organ doses from scouts")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scouts", required=True)
    p.add_argument("--range", type=_parse_range, required=True)
    p.add_argument("--patient-id")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    rn = sub.add_parser("run", help="run a full experiment")
    rn.add_argument("--config", required=True)
    rn.add_argument("--threads", type=int)
    rn.add_argument("--resume", action="store_true")
    rn.set_defaults(func=cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, FileNotFoundError, ValueError) as exc:
        print(f"voxeldose: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
