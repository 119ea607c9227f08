import argparse
from pathlib import Path
from typing import Dict

import pytest

from cortolam.argtype import KSetType, PathType, RaterLabelsType, collect_rater_labels


@pytest.fixture
def example_folder(tmp_path):
    """An existing work folder and neuron table, and a path that does not exist yet."""
    folder = tmp_path / "run"
    folder.mkdir()
    file = folder / "neurons.csv"
    file.write_text("id,x,y,area,mean_gray\n")
    return {
        "exist": {"folder": folder, "file": file},
        "not_exist": {"file": tmp_path / "labels_r9.csv"},
    }


def test_pathtype_exists(example_folder: Dict[str, Dict[str, Path]]):
    for pth in example_folder["exist"].values():
        assert PathType(exists=True)(str(pth)) == pth
    missing = example_folder["not_exist"]["file"]
    with pytest.raises(argparse.ArgumentTypeError, match="Path does not exist"):
        PathType(exists=True)(str(missing))
    # Output paths may be new
    assert PathType()(str(missing)) == missing


def test_pathtype_kind(example_folder: Dict[str, Dict[str, Path]]):
    folder, file = example_folder["exist"]["folder"], example_folder["exist"]["file"]
    assert PathType(exists=True, type="file")(str(file)) == file
    assert PathType(type="dir")(str(folder)) == folder
    with pytest.raises(argparse.ArgumentTypeError, match="Path is not a file"):
        PathType(type="file")(str(folder))
    with pytest.raises(argparse.ArgumentTypeError, match="Path is not a directory"):
        PathType(type="dir")(str(file))
    with pytest.raises(ValueError, match="Unknown path type"):
        PathType(type="pipe")


def test_ksettype():
    assert KSetType()("500, 50,100") == (50, 100, 500)
    assert KSetType()("7") == (7,)


@pytest.mark.parametrize(
    "value, message",
    [
        ("50,abc", "is not an integer: 'abc'"),
        ("50,0", "must be positive: 0"),
        ("50,100,50", "not distinct"),
    ],
)
def test_ksettype_invalid(value, message):
    with pytest.raises(argparse.ArgumentTypeError, match=message):
        KSetType()(value)


def test_raterlabelstype(example_folder: Dict[str, Dict[str, Path]]):
    file = example_folder["exist"]["file"]
    assert RaterLabelsType()(f"r1={file}") == ("r1", file)
    # Only the first equal sign separates the rater id
    assert RaterLabelsType(exists=False)("r=2=a.csv") == ("r", Path("2=a.csv"))

    with pytest.raises(argparse.ArgumentTypeError, match="Expect RATER=PATH"):
        RaterLabelsType()(str(file))
    with pytest.raises(argparse.ArgumentTypeError, match="Rater id is empty"):
        RaterLabelsType()(f"={file}")
    with pytest.raises(argparse.ArgumentTypeError, match="Path does not exist"):
        RaterLabelsType()(f"r1={example_folder['not_exist']['file']}")
    with pytest.raises(argparse.ArgumentTypeError, match="Path is not a file"):
        RaterLabelsType()(f"r1={example_folder['exist']['folder']}")


def test_collect_rater_labels():
    assert collect_rater_labels(None) == {}
    pairs = [("r2", Path("b.csv")), ("r1", Path("a.csv"))]
    assert collect_rater_labels(pairs) == {"r2": Path("b.csv"), "r1": Path("a.csv")}
    with pytest.raises(argparse.ArgumentTypeError, match="Rater r1 is given more than once"):
        collect_rater_labels(pairs + [("r1", Path("c.csv"))])
