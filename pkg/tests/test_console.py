import argparse
import json
from pathlib import Path

import pytest

from cortolam import __version__
from cortolam.config import FeatureConfig, PipelineConfig, derive_seed
from cortolam.console import (
    cmd_features,
    cmd_plot,
    cmd_train,
    create_console_parser,
    main,
    parse_console,
)

from .conftest import small_pipeline_config


@pytest.fixture
def config_file(tmp_path: Path) -> Path:
    pth = tmp_path / "cortolam.toml"
    small_pipeline_config(tmp_path / "run").to_toml(pth)
    return pth


def test_default_config(default_config: PipelineConfig, tmp_path: Path):
    # Launch with the default settings
    command, config, extra = parse_console(["features", f"--workdir={tmp_path}"])
    assert command is cmd_features
    assert extra == {}
    assert config.workdir == tmp_path
    assert config.features == default_config.features
    assert config.train == default_config.train


def test_version_string_in_log(tmp_path: Path, caplog):
    parse_console(["features", f"--workdir={tmp_path}"])
    assert f"Running cortolam v{__version__} with parameters: features --workdir=" in caplog.text


def test_console_flags_override_config(config_file: Path):
    command, config, _ = parse_console(
        ["train", f"--config={config_file}", "--rounds=7", "--seed=9"]
    )
    assert command is cmd_train
    assert config.train.rounds == 7
    # Values not given as flags come from the file
    assert config.train.max_depth == 3
    assert config.workdir == config_file.parent / "run"
    assert config.seed == 9
    assert config.train.seed == derive_seed(9, "train")


def test_console_feature_flags(tmp_path: Path):
    _, config, _ = parse_console(
        [
            "features",
            f"--workdir={tmp_path}",
            "--k-set=60,20",
            "--region-k=60",
            "--sectors=4",
            "--k-slice=20",
            "--nni-mode=central",
            "--neighbor-size",
        ]
    )
    assert config.features == FeatureConfig(
        k_set=(20, 60),
        region_k=60,
        slices=config.features.slices,
        nni_mode="central",
        neighbor_size=True,
    )
    assert (config.features.slices.sectors, config.features.slices.k) == (4, 20)


def test_resolution_help():
    parser = create_console_parser()
    (subparsers,) = [a for a in parser._actions if isinstance(a, argparse._SubParsersAction)]
    help_text = " ".join(subparsers.choices["features"].format_help().split())
    assert "coordinates are in pixels of this resolution (shape columns are read as is)" in help_text


def test_console_invalid_k_set(tmp_path: Path):
    with pytest.raises(SystemExit):
        parse_console(["features", f"--workdir={tmp_path}", "--k-set=0,5"])


def test_console_labels(tmp_path: Path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    a.write_text("neuron_id,layer\n")
    b.write_text("neuron_id,layer\n")
    _, config, _ = parse_console(["train", f"--labels=r1={a}", f"--labels=r2={b}"])
    assert config.labels == {"r1": a, "r2": b}
    with pytest.raises(SystemExit):
        parse_console(["train", f"--labels=r1={a}", f"--labels=r1={b}"])


def test_console_plot_options(tmp_path: Path):
    command, config, extra = parse_console(
        ["plot", f"--workdir={tmp_path}", "--side-by-side", "--column=p_max"]
    )
    assert command is cmd_plot
    assert extra == {
        "sources": None,
        "output": None,
        "column": "p_max",
        "side_by_side": True,
        "titles": None,
    }


def test_missing_inputs(tmp_path: Path, caplog):
    assert main(["predict", f"--workdir={tmp_path}"]) == 2
    assert "[input] model not found at" in caplog.text
    assert main(["features", f"--workdir={tmp_path}"]) == 2
    assert "[input] neurons not found at" in caplog.text


def test_config_error(tmp_path: Path, caplog):
    pth = tmp_path / "bad.toml"
    pth.write_text("[train]\nbogus = 1\n")
    assert main(["train", f"--config={pth}"]) == 1
    assert "[config] Unknown TrainConfig option(s): bogus" in caplog.text


def test_console_end_to_end(config_file: Path, tmp_path: Path):
    cfg = [f"--config={config_file}"]
    for command in ("synth", "features", "regions", "train", "predict", "explain", "eval"):
        assert main([command] + cfg) == 0, command

    run = tmp_path / "run"
    for name in PipelineConfig.ARTIFACTS.values():
        assert (run / name).exists(), name
    assert sorted(p.name for p in (run / "models").iterdir()) == ["r1.json", "r2.json", "r3.json"]

    report = json.loads((run / "report.json").read_text())
    assert report["raters"] == ["r1", "r2", "r3"]
    assert 0.5 < report["accuracy_vs_truth"]["all"]["accuracy"] <= 1.0
    assert (run / "report.txt").read_text().startswith("cortolam evaluation report")
    assert (run / "contributions.txt").read_text().startswith("neuron ")

    assert main(["plot"] + cfg + ["--side-by-side", f"--source={run / 'truth.csv'}",
                                  f"--source={run / 'predictions.csv'}"]) == 0
    assert (run / "layers.svg").exists()
    assert main(["plot"] + cfg + ["--column=p_III", f"--output={run / 'p.svg'}"]) == 0
    assert (run / "p.svg").exists()

    # Same config and seed in another folder gives byte-identical artifacts
    again = tmp_path / "again"
    for command in ("synth", "features"):
        assert main([command] + cfg + [f"--workdir={again}"]) == 0
    for name in ("neurons.csv", "truth.csv", "labels_r1.csv", "features.csv"):
        assert (again / name).read_bytes() == (run / name).read_bytes(), name
