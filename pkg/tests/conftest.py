import logging
from pathlib import Path

import numpy as np
import pytest
from _pytest.logging import caplog as _caplog  # type: ignore # noqa: F401
from loguru import logger

from cortolam.config import FeatureConfig, PipelineConfig, SliceConfig, SynthConfig, TrainConfig
from cortolam.data import NeuronTable


@pytest.fixture(scope="session")
def test_root():
    return Path(__file__).parent


@pytest.fixture
def caplog(_caplog):  # noqa: F811
    """A fixture to capture loguru logging messages.

    Copied from https://loguru.readthedocs.io/en/stable/resources/migration.html
    """

    class PropagateHandler(logging.Handler):
        def emit(self, record):
            logging.getLogger(record.name).handle(record)

    logger.enable("cortolam")
    handler_id = logger.add(PropagateHandler(), format="{message}")
    yield _caplog
    logger.remove(handler_id)
    logger.disable("cortolam")


@pytest.fixture(scope="session")
def default_config() -> PipelineConfig:
    """Default cortolam config."""
    return PipelineConfig()


def make_neurons(positions, area=None) -> NeuronTable:
    """Neurons at `positions` with ids 1..n and plausible shape descriptors."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    n = len(positions)
    return NeuronTable(
        ids=np.arange(1, n + 1),
        x_um=positions[:, 0],
        y_um=positions[:, 1],
        area_um2=np.full(n, 100.0) if area is None else np.asarray(area, dtype=np.float64),
        perimeter_um=np.full(n, 40.0),
        circularity=np.full(n, 0.8),
        roundness=np.full(n, 0.7),
        gray_mean=np.full(n, 120.0),
        gray_median=np.full(n, 118.0),
    )


@pytest.fixture
def random_neurons() -> NeuronTable:
    """1000 uniform random neurons over a 1mm square."""
    rng = np.random.default_rng(20)
    return make_neurons(rng.uniform(0, 1000, size=(1000, 2)), area=rng.lognormal(4.5, 0.3, 1000))


def small_pipeline_config(workdir: Path, seed: int = 3) -> PipelineConfig:
    """A synthetic section of ~2,400 neurons with small neighbourhoods and a short boosting run."""
    return PipelineConfig(
        workdir=workdir,
        seed=seed,
        explain_sample=50,
        features=FeatureConfig(
            k_set=(20, 60), region_k=60, slices=SliceConfig(sectors=8, k=60), jobs=2
        ),
        train=TrainConfig(rounds=15, max_depth=3, min_samples_leaf=5, jobs=2),
        synth=SynthConfig(
            width_um=400.0,
            height_um=1000.0,
            wave_amplitude_um=15.0,
            wave_length_um=400.0,
            disagreement_um=10.0,
        ),
    )


@pytest.fixture
def small_config(tmp_path) -> PipelineConfig:
    return small_pipeline_config(tmp_path / "run")
