import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from cortolam.data import LabelSet, LayerClass
from cortolam.errors import LabelParseError, SchemaError, UnknownIdError
from cortolam.plot import (
    PALETTE,
    SVG_NS,
    UNLABELED_COLOR,
    Panel,
    class_panel,
    continuous_colors,
    load_panel,
    plot_layers,
    render_svg,
    value_panel,
)

from .conftest import make_neurons


def svg_tag(name: str) -> str:
    return f"{{{SVG_NS}}}{name}"


def legend_labels(root: ET.Element):
    legend = root.find(f"{svg_tag('g')}[@class='legend']")
    return [text.text for text in legend.iter(svg_tag("text"))]


@pytest.fixture
def three_neurons():
    return make_neurons([[0.0, 0.0], [100.0, 50.0], [200.0, 300.0]])


def test_plot_two_classes(three_neurons, tmp_path: Path):
    labels = LabelSet("r1", {1: LayerClass.II, 2: LayerClass.II, 3: LayerClass.V})
    pth = tmp_path / "layers.svg"
    plot_layers(three_neurons, [class_panel(three_neurons, labels)], pth)
    root = ET.parse(pth).getroot()
    assert root.tag == svg_tag("svg")
    circles = list(root.iter(svg_tag("circle")))
    assert len(circles) == 3
    assert [c.get("fill") for c in circles] == [PALETTE["II"], PALETTE["II"], PALETTE["V"]]
    assert legend_labels(root) == ["II", "V"]
    title = root.find(f"{svg_tag('g')}[@class='panel']/{svg_tag('text')}")
    assert title.text == "r1"


def test_plot_unlabeled_neurons(three_neurons):
    labels = LabelSet("r1", {2: LayerClass.I})
    root = render_svg(three_neurons, [class_panel(three_neurons, labels, title="partial")])
    fills = [c.get("fill") for c in root.iter("circle")]
    assert fills == [UNLABELED_COLOR, PALETTE["I"], UNLABELED_COLOR]
    legend = root.find("g[@class='legend']")
    assert [t.text for t in legend.iter("text")] == ["I", "unlabeled"]


def test_plot_side_by_side(three_neurons):
    panels = [
        class_panel(three_neurons, LabelSet("r1", {1: LayerClass.I})),
        class_panel(three_neurons, LabelSet("r2", {1: LayerClass.III})),
        value_panel("area_um2", [1.0, 2.0, 3.0]),
    ]
    root = render_svg(three_neurons, panels)
    groups = root.findall("g[@class='panel']")
    assert [g.get("id") for g in groups] == ["panel-0", "panel-1", "panel-2"]
    assert all(len(g.findall("circle")) == 3 for g in groups)
    # Panels share the neuron layout and are shifted horizontally
    first, second = (g.find("circle") for g in groups[:2])
    assert first.get("cy") == second.get("cy")
    assert float(second.get("cx")) > float(first.get("cx"))
    assert float(root.get("width")) > 3 * 600


def test_continuous_colors():
    assert continuous_colors([0.0, 0.5, 1.0]) == ["#440154", "#21918c", "#fde725"]
    assert continuous_colors([3.0, 3.0]) == ["#440154", "#440154"]
    assert continuous_colors(np.array([-10.0, 10.0])) == continuous_colors([0.0, 1.0])


def test_panel_errors(three_neurons):
    with pytest.raises(ValueError, match="either classes or values"):
        Panel(title="x")
    with pytest.raises(ValueError, match="either classes or values"):
        Panel(title="x", classes=np.zeros(3), values=np.zeros(3))
    with pytest.raises(ValueError, match="Nothing to plot"):
        render_svg(three_neurons, [])


def test_load_panel(three_neurons, tmp_path: Path):
    pth = tmp_path / "pred.csv"
    pth.write_text("id,layer,p_max\n3,WM,0.5\n1,IV,0.9\n2,I,0.7\n")
    panel = load_panel(pth, three_neurons)
    assert panel.title == "pred"
    assert panel.classes.tolist() == [LayerClass.IV, LayerClass.I, LayerClass.WM]
    values = load_panel(pth, three_neurons, column="p_max", title="confidence")
    assert values.title == "confidence"
    np.testing.assert_array_equal(values.values, [0.9, 0.7, 0.5])

    labels = tmp_path / "r1.csv"
    labels.write_text("neuron_id,layer\n2,VI\n")
    assert load_panel(labels, three_neurons).classes.tolist() == [-1, LayerClass.VI, -1]


def test_load_panel_errors(three_neurons, tmp_path: Path):
    pth = tmp_path / "bad.csv"
    pth.write_text("id,layer,score\n1,VII,0.1\n")
    with pytest.raises(LabelParseError, match="VII"):
        load_panel(pth, three_neurons)
    with pytest.raises(UnknownIdError, match="does not cover every neuron"):
        load_panel(pth, three_neurons, column="score")
    with pytest.raises(SchemaError, match="no column 'depth'"):
        load_panel(pth, three_neurons, column="depth")
    orphan = tmp_path / "orphan.csv"
    orphan.write_text("id,layer\n9,I\n")
    with pytest.raises(UnknownIdError):
        load_panel(orphan, three_neurons)
