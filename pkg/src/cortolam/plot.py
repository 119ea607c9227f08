"""Layer maps of a section as standalone SVG documents.

Every neuron is drawn as one ``<circle>`` at its position, colored by a layer class or by
a continuous value. Several label sources can be drawn side by side, one panel each.
"""
import xml.etree.ElementTree as ET
from pathlib import Path
from typing import List, Optional, Sequence

import attr
import numpy as np
from loguru import logger

from .data import LAYER_NAMES, LabelSet, LayerClass, NeuronTable
from .errors import SchemaError, UnknownIdError
from .io import numeric_columns, read_columns

logger.disable("cortolam")  # Disable emit logs by default

SVG_NS = "http://www.w3.org/2000/svg"

PALETTE = {
    "I": "#e6194b",
    "II": "#3cb44b",
    "III": "#4363d8",
    "IV": "#f58231",
    "V": "#911eb4",
    "VI": "#42d4f4",
    "WM": "#808080",
}
"""Fixed color of each layer class."""

UNLABELED_COLOR = "#d9d9d9"

VIRIDIS_ANCHORS = np.array(
    [
        [0x44, 0x01, 0x54],
        [0x3B, 0x52, 0x8B],
        [0x21, 0x91, 0x8C],
        [0x5E, 0xC9, 0x62],
        [0xFD, 0xE7, 0x25],
    ],
    dtype=np.float64,
)
"""Evenly spaced samples of the viridis colormap, interpolated linearly."""

PANEL_WIDTH_PX = 600.0
MARGIN_PX = 20.0
TITLE_PX = 24.0
LEGEND_WIDTH_PX = 120.0
LEGEND_ROW_PX = 18.0
RADIUS_PX = 1.5


@attr.s(auto_attribs=True, kw_only=True, eq=False)
class Panel:
    """One map: either class codes or continuous values per neuron row.

    Class code -1 marks an unlabeled neuron.
    """

    title: str
    classes: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None

    def __attrs_post_init__(self):
        if (self.classes is None) == (self.values is None):
            raise ValueError("A panel colors by either classes or values")

    @property
    def is_categorical(self) -> bool:
        return self.classes is not None


def class_panel(neurons: NeuronTable, labels: LabelSet, title: Optional[str] = None) -> Panel:
    return Panel(title=title or labels.rater_id, classes=labels.encode(neurons.ids.tolist()))


def value_panel(title: str, values: Sequence[float]) -> Panel:
    return Panel(title=title, values=np.asarray(values, dtype=np.float64))


def load_panel(path: Path, neurons: NeuronTable, column: str = "layer", title: Optional[str] = None) -> Panel:
    """Panel from any CSV holding an ``id`` (or ``neuron_id``) column and `column`.

    The ``layer`` column is parsed as layer class tokens; any other column as numbers.
    Neurons absent from the file are drawn unlabeled (classes) or raise (values).

    Raises:
        LabelParseError: Unknown layer token.
        SchemaError: Missing column.
    """
    header, columns = read_columns(path)
    id_col = "id" if "id" in columns else "neuron_id"
    if id_col not in columns:
        raise SchemaError(f"{path} has no id column", column="id")
    if column not in columns:
        raise SchemaError(f"{path} has no column {column!r}", column=column)
    ids = numeric_columns(columns, [id_col], dtype=np.int64)[id_col]
    rows = neurons.rows_of(ids)
    title = title or path.stem
    if column == "layer":
        classes = np.full(len(neurons), -1, dtype=np.int64)
        classes[rows] = [int(LayerClass.parse(token)) for token in columns[column]]
        return Panel(title=title, classes=classes)
    if len(set(rows.tolist())) != len(neurons):
        raise UnknownIdError(f"{path} does not cover every neuron")
    vals = numeric_columns(columns, [column])[column]
    values = np.empty(len(neurons))
    values[rows] = vals
    return Panel(title=title, values=values)


def continuous_colors(values: np.ndarray) -> List[str]:
    """Hex colors of `values` on a viridis-like ramp spanning their range."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = (float(values.min()), float(values.max())) if len(values) else (0.0, 1.0)
    t = np.zeros_like(values) if hi <= lo else (values - lo) / (hi - lo)
    pos = t * (len(VIRIDIS_ANCHORS) - 1)
    i = np.minimum(pos.astype(np.int64), len(VIRIDIS_ANCHORS) - 2)
    frac = (pos - i)[:, None]
    rgb = VIRIDIS_ANCHORS[i] * (1 - frac) + VIRIDIS_ANCHORS[i + 1] * frac
    return ["#{:02x}{:02x}{:02x}".format(*c) for c in np.rint(rgb).astype(int)]


def _fmt(value: float) -> str:
    return f"{value:.2f}"


def render_svg(neurons: NeuronTable, panels: Sequence[Panel]) -> ET.Element:
    """Draw `panels` side by side with a shared legend on the right."""
    if not panels:
        raise ValueError("Nothing to plot")
    x, y = neurons.x_um, neurons.y_um
    x0, y0 = (float(x.min()), float(y.min())) if len(neurons) else (0.0, 0.0)
    span_x = max(float(x.max()) - x0, 1.0) if len(neurons) else 1.0
    span_y = max(float(y.max()) - y0, 1.0) if len(neurons) else 1.0
    scale = PANEL_WIDTH_PX / span_x
    panel_h = span_y * scale
    width = MARGIN_PX + len(panels) * (PANEL_WIDTH_PX + MARGIN_PX) + LEGEND_WIDTH_PX
    height = TITLE_PX + panel_h + 2 * MARGIN_PX

    svg = ET.Element(
        "svg",
        {
            "xmlns": SVG_NS,
            "version": "1.1",
            "width": _fmt(width),
            "height": _fmt(height),
            "viewBox": f"0 0 {_fmt(width)} {_fmt(height)}",
        },
    )
    ET.SubElement(svg, "rect", {"width": "100%", "height": "100%", "fill": "white"})

    used = set()
    for p, panel in enumerate(panels):
        left = MARGIN_PX + p * (PANEL_WIDTH_PX + MARGIN_PX)
        group = ET.SubElement(svg, "g", {"class": "panel", "id": f"panel-{p}"})
        title = ET.SubElement(
            group, "text", {"x": _fmt(left), "y": _fmt(MARGIN_PX), "font-size": "14"}
        )
        title.text = panel.title
        if panel.is_categorical:
            codes = panel.classes
            colors = [PALETTE[LAYER_NAMES[c]] if c >= 0 else UNLABELED_COLOR for c in codes]
            used.update(int(c) for c in codes)
        else:
            colors = continuous_colors(panel.values)
        cx = left + (x - x0) * scale
        cy = MARGIN_PX + TITLE_PX + (y - y0) * scale
        for i in range(len(neurons)):
            ET.SubElement(
                group,
                "circle",
                {"cx": _fmt(cx[i]), "cy": _fmt(cy[i]), "r": _fmt(RADIUS_PX), "fill": colors[i]},
            )

    legend = ET.SubElement(svg, "g", {"class": "legend"})
    legend_x = MARGIN_PX + len(panels) * (PANEL_WIDTH_PX + MARGIN_PX)
    entries = []
    if any(panel.is_categorical for panel in panels):
        entries += [(name, PALETTE[name]) for c, name in enumerate(LAYER_NAMES) if c in used]
        if -1 in used:
            entries.append(("unlabeled", UNLABELED_COLOR))
    for panel in panels:
        if not panel.is_categorical and len(panel.values):
            lo, hi = float(panel.values.min()), float(panel.values.max())
            ramp = continuous_colors(np.linspace(lo, hi, 5)) if hi > lo else continuous_colors([lo])
            entries.append((f"{panel.title} {lo:.3g}", ramp[0]))
            entries.append((f"{panel.title} {hi:.3g}", ramp[-1]))
    for row, (label, color) in enumerate(entries):
        top = MARGIN_PX + TITLE_PX + row * LEGEND_ROW_PX
        entry = ET.SubElement(legend, "g", {"class": "legend-entry"})
        ET.SubElement(
            entry,
            "rect",
            {"x": _fmt(legend_x), "y": _fmt(top), "width": "12", "height": "12", "fill": color},
        )
        text = ET.SubElement(
            entry, "text", {"x": _fmt(legend_x + 18), "y": _fmt(top + 10), "font-size": "12"}
        )
        text.text = label
    return svg


def write_svg(svg: ET.Element, path: Path) -> None:
    ET.ElementTree(svg).write(path, encoding="utf-8", xml_declaration=True)
    logger.info(f"Wrote {path}")


def plot_layers(neurons: NeuronTable, panels: Sequence[Panel], path: Path) -> None:
    """Render `panels` and write them to `path`."""
    logger.info(f"Plotting {len(neurons):,d} neurons in {len(panels)} panel(s)")
    write_svg(render_svg(neurons, panels), path)
