"""
From scouts to organ doses
==========================

Build a small reference cohort, cross-validate the predictor on it, then
train on everything and predict a new phantom from its scouts alone.
Sizes are cut down so this runs in a few minutes; ``voxeldose run`` with
the default config reproduces the full benchmark.
"""

import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from voxeldose.phantom import CohortSpec, generate_synthetic_phantom
from voxeldose.pipeline import (
    ExperimentConfig,
    build_reference_dataset,
    compose_sample,
    cross_validate,
    load_samples,
    scan_range_for,
)
from voxeldose.predictor import TrainConfig, train
from voxeldose.scout import compose_input, render_scout, scan_range_channel, scout_bounds

root = Path(tempfile.mkdtemp(prefix="voxeldose-demo-"))
cfg = ExperimentConfig(
    cohort=CohortSpec(count=16, spacing_mm=8.0),
    histories=100_000,
    folds=4,
    train=TrainConfig(epochs=60, stem_pool=4),
    out_dir=root,
    seed=7,
)

records = build_reference_dataset(cfg)
print(f"{sum(r.ok for r in records)} reference records in {root}")
samples = load_samples(records, root)

cv = cross_validate(samples, cfg)
pe = cv.report.pe_mean
print("held-out mean PE (%):", {k: round(float(v), 1) for k, v in zip(cv.report.labels, pe)})
print("R2 vs identity:", {k: round(v, 3) for k, v in cv.r2.items()})

# final model on all samples, then a phantom it has never seen
bounds = scout_bounds([s.scouts[v] for s in samples for v in ("frontal", "lateral")])
x = np.stack([compose_sample(s, bounds) for s in samples])
y = np.stack([s.doses for s in samples])
model = train(x, y, cfg.train)

new, new_masks = generate_synthetic_phantom(replace(cfg.cohort_spec, count=17), 16)
fr, lat = render_scout(new, "frontal"), render_scout(new, "lateral")
z0, z1 = scan_range_for(new, new_masks, np.random.default_rng(0), cfg.range_margin_mm)
band = scan_range_channel(z0, z1, fr.layout)
print("prediction for an unseen phantom (mGy):",
      {k: round(float(v), 2) for k, v in model.predict_dict(compose_input(lat, fr, band, bounds)).items()})
print(f"inference {model.timings_ms[-1]:.1f} ms per scan")
