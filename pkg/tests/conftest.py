from pathlib import Path

import pytest

from voxeldose.phantom import CohortSpec
from voxeldose.pipeline import ExperimentConfig, build_reference_dataset
from voxeldose.predictor import TrainConfig

TINY_TRAIN = TrainConfig(epochs=2, batch_size=4, widths=(4, 8, 8, 16), stem_pool=4)


def tiny_config(out_dir: Path, count: int = 4, histories: int = 20_000, **kw) -> ExperimentConfig:
    return ExperimentConfig(
        cohort=CohortSpec(count=count, spacing_mm=8.0),
        histories=histories,
        folds=2,
        train=TINY_TRAIN,
        out_dir=Path(out_dir),
        seed=17,
        **kw,
    )


@pytest.fixture(scope="session")
def tiny_experiment(tmp_path_factory):
    cfg = tiny_config(tmp_path_factory.mktemp("exp"))
    records = build_reference_dataset(cfg)
    return cfg, records


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
