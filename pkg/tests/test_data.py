import math
from pathlib import Path

import numpy as np
import pytest

from cortolam.data import (
    LAYER_NAMES,
    NEURON_COLUMNS,
    LabelSet,
    LayerClass,
    NeuronRecord,
    NeuronTable,
    load_labels,
    load_neurons,
    write_labels,
    write_neurons,
)
from cortolam.errors import (
    LabelParseError,
    RecordValidationError,
    SchemaError,
    UnknownIdError,
)

HEADER = "id,x_um,y_um,area_um2,perimeter_um,circularity,roundness"


@pytest.fixture
def neurons(test_root: Path) -> NeuronTable:
    return load_neurons(test_root / "test_files" / "neurons_small.csv")


def test_layer_class():
    assert LAYER_NAMES == ["I", "II", "III", "IV", "V", "VI", "WM"]
    assert LayerClass.parse("iii") is LayerClass.III
    assert LayerClass.parse(" wm ") is LayerClass.WM
    with pytest.raises(LabelParseError, match="Unknown layer token 'VII'"):
        LayerClass.parse("VII")


def test_load_neurons(neurons: NeuronTable):
    assert len(neurons) == 5
    np.testing.assert_array_equal(neurons.ids, [1, 2, 3, 4, 5])
    first = neurons.record(0)
    assert first == NeuronRecord(
        id=1,
        x_um=10.0,
        y_um=20.0,
        area_um2=50.0,
        perimeter_um=30.0,
        circularity=0.7,
        roundness=0.6,
        gray_mean=120.0,
        gray_median=118.0,
    )
    # Empty gray cells are missing values
    second = neurons.record(neurons.row_of(2))
    assert second.gray_mean is None and second.gray_median is None
    assert math.isnan(neurons.gray_mean[1])
    assert neurons.positions.shape == (5, 2)
    assert 3 in neurons and 6 not in neurons
    with pytest.raises(UnknownIdError, match="Unknown neuron id 6"):
        neurons.row_of(6)


def test_load_neurons_pixel_resolution(test_root: Path):
    neurons = load_neurons(test_root / "test_files" / "neurons_small.csv", 0.226)
    assert neurons.x_um[0] == pytest.approx(2.26)
    assert neurons.y_um[0] == pytest.approx(4.52)
    # Shape descriptors are not scaled
    assert neurons.area_um2[0] == 50.0


def test_load_neurons_pixel_columns(tmp_path: Path):
    pth = tmp_path / "px.csv"
    pth.write_text(
        "id,x_px,y_px,area_um2,perimeter_um,circularity,roundness\n1,100,200,50,30,0.7,0.6\n"
    )
    neurons = load_neurons(pth, 0.5)
    assert neurons.x_um[0] == 50.0 and neurons.y_um[0] == 100.0


def test_load_neurons_missing_column(tmp_path: Path):
    pth = tmp_path / "bad.csv"
    pth.write_text("id,x_um,y_um,perimeter_um,circularity,roundness\n1,1,1,30,0.7,0.6\n")
    with pytest.raises(SchemaError) as excinfo:
        load_neurons(pth)
    assert excinfo.value.column == "area_um2"


def test_load_neurons_duplicate_id(tmp_path: Path):
    pth = tmp_path / "dup.csv"
    pth.write_text(f"{HEADER}\n1,1,1,50,30,0.7,0.6\n1,2,2,50,30,0.7,0.6\n")
    with pytest.raises(RecordValidationError, match="duplicate neuron id 1") as excinfo:
        load_neurons(pth)
    assert excinfo.value.line == 3


@pytest.mark.parametrize(
    "row, message",
    [
        ("1,1,1,0,30,0.7,0.6", "area_um2 of neuron 1 must be positive"),
        ("1,1,1,50,-3,0.7,0.6", "perimeter_um of neuron 1 must be positive"),
        ("1,1,1,50,30,1.2,0.6", "circularity must be within"),
        ("1,1,1,50,30,0.7,nan", "roundness of neuron 1 is not finite"),
        ("1,1,abc,50,30,0.7,0.6", "cannot parse value"),
    ],
)
def test_load_neurons_invalid_row(tmp_path: Path, row, message):
    pth = tmp_path / "invalid.csv"
    pth.write_text(f"{HEADER}\n2,5,5,50,30,0.7,0.6\n{row}\n")
    with pytest.raises(RecordValidationError, match=message) as excinfo:
        load_neurons(pth)
    assert excinfo.value.line == 3
    assert str(excinfo.value).startswith("line 3: ")


def test_load_neurons_bad_resolution(test_root: Path):
    with pytest.raises(SchemaError, match="Resolution must be positive"):
        load_neurons(test_root / "test_files" / "neurons_small.csv", 0.0)


def test_neuron_table_unique_ids():
    with pytest.raises(RecordValidationError, match="not unique"):
        NeuronTable(
            ids=[1, 1],
            x_um=[0, 1],
            y_um=[0, 1],
            area_um2=[1, 1],
            perimeter_um=[1, 1],
            circularity=[0.5, 0.5],
            roundness=[0.5, 0.5],
            gray_mean=[np.nan, np.nan],
            gray_median=[np.nan, np.nan],
        )


def test_write_neurons_round_trip(neurons: NeuronTable, tmp_path: Path):
    pth = tmp_path / "neurons.csv"
    write_neurons(neurons, pth)
    again = load_neurons(pth)
    assert list(again) == list(neurons)


def test_neuron_table_columns(tmp_path: Path):
    record = NeuronRecord(
        id=7,
        x_um=1.000000004,
        y_um=2.0,
        area_um2=50.0,
        perimeter_um=30.0,
        circularity=0.7,
        roundness=0.6,
        gray_mean=None,
        gray_median=120.0,
    )
    table = NeuronTable.from_records([record])
    assert table.ids.tolist() == [7]
    columns = table.to_columns()
    assert list(columns) == NEURON_COLUMNS
    assert columns["id"].tolist() == [7]
    assert list(table) == [record]

    pth = tmp_path / "neurons.csv"
    write_neurons(table, pth)
    assert pth.read_text().splitlines()[1] == "7,1.000000004,2.0,50.0,30.0,0.7,0.6,,120.0"
    assert list(load_neurons(pth)) == [record]


def test_load_labels(test_root: Path, neurons: NeuronTable):
    labels = load_labels(test_root / "test_files" / "labels_r1.csv", "r1", neurons)
    assert labels.rater_id == "r1"
    assert labels.labels == {1: LayerClass.III, 2: LayerClass.WM, 4: LayerClass.I}
    assert labels.ids() == [1, 2, 4]
    np.testing.assert_array_equal(labels.encode([1, 2, 3, 4, 5]), [2, 6, -1, 0, -1])


def test_load_labels_unknown_token(tmp_path: Path, neurons: NeuronTable):
    pth = tmp_path / "labels.csv"
    pth.write_text("neuron_id,layer\n1,II\n3,VII\n")
    with pytest.raises(LabelParseError, match="line 3: Unknown layer token 'VII'"):
        load_labels(pth, "r1", neurons)


def test_load_labels_unknown_id(tmp_path: Path, neurons: NeuronTable):
    pth = tmp_path / "labels.csv"
    pth.write_text("neuron_id,layer\n1,II\n42,III\n")
    with pytest.raises(UnknownIdError, match="unknown neuron id 42"):
        load_labels(pth, "r1", neurons)


def test_load_labels_missing_column(tmp_path: Path, neurons: NeuronTable):
    pth = tmp_path / "labels.csv"
    pth.write_text("id,layer\n1,II\n")
    with pytest.raises(SchemaError) as excinfo:
        load_labels(pth, "r1", neurons)
    assert excinfo.value.column == "neuron_id"


def test_load_labels_header_only(tmp_path: Path, neurons: NeuronTable):
    pth = tmp_path / "labels.csv"
    pth.write_text("neuron_id,layer\n")
    assert len(load_labels(pth, "r1", neurons)) == 0
    pth.write_text("neuron,layer\n")
    with pytest.raises(SchemaError, match="Missing required column 'neuron_id'"):
        load_labels(pth, "r1", neurons)
    pth.write_text("")
    with pytest.raises(SchemaError, match="is empty"):
        load_labels(pth, "r1", neurons)


def test_write_labels(tmp_path: Path, neurons: NeuronTable):
    labels = LabelSet("r2", {5: LayerClass.VI, 1: LayerClass.II})
    pth = tmp_path / "labels.csv"
    write_labels(labels, pth)
    assert pth.read_text() == "neuron_id,layer\n1,II\n5,VI\n"
    assert load_labels(pth, "r2", neurons) == labels
