"""Full-scale synthetic runs of the whole pipeline; deselected by default."""
import json

import numpy as np
import pytest

from cortolam.config import FeatureConfig, PipelineConfig, TrainConfig
from cortolam.console import main
from cortolam.data import load_labels, load_neurons
from cortolam.evaluation import top_n_composition
from cortolam.model import RaterEnsemble
from cortolam.pipeline import Pipeline

pytestmark = pytest.mark.slow

LOCATION_FEATURES = {"depth_um", "thickness_um", "depth_norm", "dist_to_dense_um"}


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    workdir = tmp_path_factory.mktemp("default_run")
    config = PipelineConfig(
        workdir=workdir,
        seed=7,
        features=FeatureConfig(jobs=4),
        train=TrainConfig(jobs=4),
    )
    pipeline = Pipeline(config)
    pipeline.synth()
    pipeline.features()
    pipeline.regions()
    pipeline.train()
    pipeline.predict()
    pipeline.explain()
    pipeline.evaluate()
    return config


def test_raters_calibrated(default_run):
    calibration = json.loads(default_run.path("calibration").read_text())
    assert calibration["agreement"] == pytest.approx(0.80, abs=0.05)
    assert calibration["n_raters"] == 3


def test_segmentation_accuracy(default_run):
    report = json.loads(default_run.path("report").read_text())
    assert report["accuracy_vs_truth"]["test"]["accuracy"] >= 0.85
    assert report["accuracy_vs_raters"]["mean"] >= report["rater_agreement"]["mean"]


def test_training_loss_non_increasing(default_run):
    ensemble = RaterEnsemble.load(default_run.path("ensemble"))
    for member in ensemble.members:
        loss = np.asarray(member.training_loss)
        assert len(loss) == 201
        assert np.all(np.diff(loss) <= 0)


def test_location_features_most_important(default_run):
    importance = json.loads(default_run.path("importance").read_text())
    top3 = {entry["feature"] for entry in importance["mean"][:3]}
    assert top3 & LOCATION_FEATURES


def test_largest_neurons_in_layer_iii(default_run):
    neurons = load_neurons(default_run.path("neurons"))
    truth = load_labels(default_run.path("truth"), "truth", neurons)
    composition = top_n_composition(neurons, truth, 500)
    assert composition.plurality.name == "III"


def test_cli_rerun_byte_identical(tmp_path):
    config = PipelineConfig(workdir=tmp_path / "a", seed=11)
    config.synth.width_um = 1500.0
    config_path = tmp_path / "cortolam.toml"
    config.to_toml(config_path)
    outputs = [
        "neurons.csv",
        "truth.csv",
        "labels_r1.csv",
        "calibration.json",
        "features.csv",
        "regions.csv",
        "ensemble.json",
        "models/r1.json",
        "predictions.csv",
        "explanations.csv",
        "importance.json",
        "report.json",
        "layers.svg",
    ]
    for workdir in ("a", "b"):
        args = [f"--config={config_path}", f"--workdir={tmp_path / workdir}"]
        for command in ("synth", "features", "regions", "train", "predict", "explain", "eval", "plot"):
            assert main([command] + args) == 0, command
    for name in outputs:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
