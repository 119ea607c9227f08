import math
from enum import IntEnum
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Type

import attr
import numpy as np
from loguru import logger

from .errors import (
    LabelParseError,
    RecordValidationError,
    SchemaError,
    UnknownIdError,
)
from .io import read_csv, write_table

logger.disable("cortolam")  # Disable emit logs by default


class LayerClass(IntEnum):
    """Cortical layer of a neuron, with a fixed ordinal encoding.

    Examples:

        >>> LayerClass.parse("iii")
        <LayerClass.III: 2>
        >>> int(LayerClass.WM)
        6
    """

    I = 0  # noqa: E741
    II = 1
    III = 2
    IV = 3
    V = 4
    VI = 5
    WM = 6  #: White matter.

    @classmethod
    def parse(cls: Type["LayerClass"], token: str) -> "LayerClass":
        """Parse a layer token case-insensitively."""
        try:
            return cls[token.strip().upper()]
        except KeyError:
            raise LabelParseError(
                f"Unknown layer token {token!r}; expected one of {', '.join(LAYER_NAMES)}"
            ) from None


LAYER_NAMES: List[str] = [layer.name for layer in LayerClass]
"""Layer names ordered by their ordinal encoding."""

N_CLASSES: int = len(LayerClass)


NEURON_COLUMNS: List[str] = [
    "id",
    "x_um",
    "y_um",
    "area_um2",
    "perimeter_um",
    "circularity",
    "roundness",
    "gray_mean",
    "gray_median",
]
"""Columns of the neurons CSV. The two grayscale columns are optional."""

OPTIONAL_NEURON_COLUMNS = ("gray_mean", "gray_median")

LABEL_COLUMNS: List[str] = ["neuron_id", "layer"]
"""Columns of a labels CSV."""


def _check_unit_interval(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise RecordValidationError(f"{name} must be within [0, 1]; got {value}")


@attr.s(auto_attribs=True, frozen=True, slots=True)
class NeuronRecord:
    """One detected neuron.

    Positions are in micrometers in the section plane. Shape descriptors come from the
    upstream particle analysis.
    """

    id: int
    x_um: float
    y_um: float
    area_um2: float  #: Soma area.
    perimeter_um: float  #: Soma perimeter.
    circularity: float  #: Dimensionless, within [0, 1].
    roundness: float  #: Dimensionless, within [0, 1].
    gray_mean: Optional[float] = None  #: Mean gray level within [0, 255], if measured.
    gray_median: Optional[float] = None  #: Median gray level within [0, 255], if measured.

    def __attrs_post_init__(self):
        for name in ("x_um", "y_um", "area_um2", "perimeter_um", "circularity", "roundness"):
            if not math.isfinite(getattr(self, name)):
                raise RecordValidationError(f"{name} of neuron {self.id} is not finite")
        if self.area_um2 <= 0:
            raise RecordValidationError(
                f"area_um2 of neuron {self.id} must be positive; got {self.area_um2}"
            )
        if self.perimeter_um <= 0:
            raise RecordValidationError(
                f"perimeter_um of neuron {self.id} must be positive; got {self.perimeter_um}"
            )
        _check_unit_interval("circularity", self.circularity)
        _check_unit_interval("roundness", self.roundness)
        for name in OPTIONAL_NEURON_COLUMNS:
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 255.0:
                raise RecordValidationError(f"{name} must be within [0, 255]; got {value}")


@attr.s(auto_attribs=True, eq=False, repr=False)
class NeuronTable:
    """All neurons of a section stored column-wise.

    Missing grayscale values are stored as NaN. Use :meth:`from_records` to build the
    table from :class:`NeuronRecord` objects, or :func:`load_neurons` to read a CSV.
    """

    ids: np.ndarray
    x_um: np.ndarray
    y_um: np.ndarray
    area_um2: np.ndarray
    perimeter_um: np.ndarray
    circularity: np.ndarray
    roundness: np.ndarray
    gray_mean: np.ndarray
    gray_median: np.ndarray
    _id_to_row: Dict[int, int] = attr.ib(init=False, factory=dict)

    def __attrs_post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        for name in NEURON_COLUMNS[1:]:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self._id_to_row = {int(i): row for row, i in enumerate(self.ids)}
        if len(self._id_to_row) != len(self.ids):
            raise RecordValidationError("Neuron ids are not unique")

    @classmethod
    def from_records(cls, records: Iterable[NeuronRecord]) -> "NeuronTable":
        records = list(records)

        def column(name):
            values = [getattr(r, name) for r in records]
            if name in OPTIONAL_NEURON_COLUMNS:
                values = [math.nan if v is None else v for v in values]
            return np.asarray(values, dtype=np.int64 if name == "id" else np.float64)

        columns = {name: column(name) for name in NEURON_COLUMNS}
        return cls(ids=columns.pop("id"), **columns)

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[NeuronRecord]:
        for row in range(len(self)):
            yield self.record(row)

    def __repr__(self):
        return f"{type(self).__name__}({len(self):,d} neurons)"

    def record(self, row: int) -> NeuronRecord:
        """The :class:`NeuronRecord` at table row `row`."""
        gray = [getattr(self, name)[row] for name in OPTIONAL_NEURON_COLUMNS]
        return NeuronRecord(
            id=int(self.ids[row]),
            x_um=float(self.x_um[row]),
            y_um=float(self.y_um[row]),
            area_um2=float(self.area_um2[row]),
            perimeter_um=float(self.perimeter_um[row]),
            circularity=float(self.circularity[row]),
            roundness=float(self.roundness[row]),
            gray_mean=None if math.isnan(gray[0]) else float(gray[0]),
            gray_median=None if math.isnan(gray[1]) else float(gray[1]),
        )

    @property
    def positions(self) -> np.ndarray:
        """Neuron positions as an ``(n, 2)`` array in micrometers."""
        return np.column_stack([self.x_um, self.y_um])

    def row_of(self, neuron_id: int) -> int:
        """Table row of the given neuron id."""
        try:
            return self._id_to_row[int(neuron_id)]
        except KeyError:
            raise UnknownIdError(f"Unknown neuron id {neuron_id}") from None

    def rows_of(self, neuron_ids: Iterable[int]) -> np.ndarray:
        return np.asarray([self.row_of(i) for i in neuron_ids], dtype=np.int64)

    def __contains__(self, neuron_id) -> bool:
        return int(neuron_id) in self._id_to_row

    def to_columns(self) -> Dict[str, np.ndarray]:
        """Columns in the neurons CSV order, ready for :func:`~cortolam.io.write_table`."""
        columns = {"id": self.ids}
        columns.update((name, getattr(self, name)) for name in NEURON_COLUMNS[1:])
        return columns


def load_neurons(path: Path, resolution_um_per_px: Optional[float] = None) -> NeuronTable:
    """Read and validate a neurons CSV.

    The header must name the columns of :data:`NEURON_COLUMNS`; ``gray_mean`` and
    ``gray_median`` are optional and may have empty cells. Any other column (e.g. the gray
    level mode, standard deviation, minimum or maximum) is ignored.

    When `resolution_um_per_px` is given, the coordinates are in pixels (columns ``x_px``
    and ``y_px``, or ``x_um`` and ``y_um`` holding pixel values) and are multiplied by the
    resolution. Shape columns are read as they are.

    Raises:
        SchemaError: A required column is missing.
        RecordValidationError: A row is invalid or an id is duplicated. The message
            carries the line number.
    """
    if resolution_um_per_px is not None and not resolution_um_per_px > 0:
        raise SchemaError(f"Resolution must be positive; got {resolution_um_per_px}")

    reader = read_csv(path)
    try:
        header = [name.strip() for name in next(reader)]
    except StopIteration:
        raise SchemaError(f"{path} is empty; expected a header row") from None

    coord_cols = ["x_um", "y_um"]
    if resolution_um_per_px is not None and "x_px" in header and "y_px" in header:
        coord_cols = ["x_px", "y_px"]
    required = ["id"] + coord_cols + NEURON_COLUMNS[3:7]
    for col in required:
        if col not in header:
            raise SchemaError(f"Missing required column {col!r} in {path}", column=col)
    ignored = [
        col for col in header if col not in NEURON_COLUMNS and col not in coord_cols
    ]
    if ignored:
        logger.debug(f"Ignore neuron columns: {', '.join(ignored)}")

    col_ix = {name: ix for ix, name in enumerate(header)}
    scale = 1.0 if resolution_um_per_px is None else resolution_um_per_px
    records: List[NeuronRecord] = []
    seen: Dict[int, int] = {}
    for line, row in enumerate(reader, start=2):
        if not row:
            continue

        def cell(name: str) -> str:
            try:
                return row[col_ix[name]].strip()
            except IndexError:
                raise RecordValidationError(f"missing value of {name}", line) from None

        try:
            neuron_id = int(cell("id"))
            values = {name: float(cell(name)) for name in NEURON_COLUMNS[3:7]}
            gray = {
                name: float(cell(name)) if name in col_ix and cell(name) != "" else None
                for name in OPTIONAL_NEURON_COLUMNS
            }
            x = float(cell(coord_cols[0])) * scale
            y = float(cell(coord_cols[1])) * scale
        except ValueError as e:
            raise RecordValidationError(f"cannot parse value: {e}", line) from e

        if neuron_id in seen:
            raise RecordValidationError(
                f"duplicate neuron id {neuron_id} (first seen at line {seen[neuron_id]})", line
            )
        seen[neuron_id] = line
        try:
            records.append(NeuronRecord(id=neuron_id, x_um=x, y_um=y, **values, **gray))
        except RecordValidationError as e:
            raise RecordValidationError(str(e), line) from e

    neurons = NeuronTable.from_records(records)
    logger.success(f"Read {len(neurons):,d} neurons from {path}")
    return neurons


def write_neurons(neurons: NeuronTable, path: Path) -> None:
    write_table(neurons.to_columns(), path)


@attr.s(auto_attribs=True, eq=True, repr=False)
class LabelSet:
    """Layer labels of one rater (or any other label source) keyed by neuron id.

    Neurons without a label are allowed and are excluded from training.
    """

    rater_id: str
    labels: Dict[int, LayerClass] = attr.Factory(dict)

    def __len__(self) -> int:
        return len(self.labels)

    def __repr__(self):
        return f"{type(self).__name__}({self.rater_id!r}, {len(self):,d} labels)"

    def ids(self) -> List[int]:
        """Labeled neuron ids in ascending order."""
        return sorted(self.labels)

    def encode(self, neuron_ids: Iterable[int]) -> np.ndarray:
        """Ordinal class per neuron id; -1 for unlabeled neurons."""
        return np.asarray(
            [int(self.labels[i]) if i in self.labels else -1 for i in neuron_ids],
            dtype=np.int64,
        )

    def to_columns(self) -> Dict[str, list]:
        ids = self.ids()
        return {"neuron_id": ids, "layer": [self.labels[i].name for i in ids]}


def load_labels(path: Path, rater_id: str, neurons: NeuronTable) -> LabelSet:
    """Read the layer labels of one rater.

    Raises:
        SchemaError: The file is empty or misses the ``neuron_id`` or ``layer`` column.
        LabelParseError: A layer token is not one of I–VI, WM.
        UnknownIdError: A labeled id is not among `neurons`.
    """
    reader = read_csv(path)
    try:
        header = [name.strip() for name in next(reader)]
    except StopIteration:
        raise SchemaError(f"{path} is empty; expected a header row") from None
    for col in LABEL_COLUMNS:
        if col not in header:
            raise SchemaError(f"Missing required column {col!r} in {path}", column=col)
    id_ix, layer_ix = header.index("neuron_id"), header.index("layer")

    labels: Dict[int, LayerClass] = {}
    for line, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            neuron_id = int(row[id_ix])
        except (IndexError, ValueError) as e:
            raise RecordValidationError(f"cannot parse neuron_id: {e}", line) from e
        try:
            layer = LayerClass.parse(row[layer_ix] if layer_ix < len(row) else "")
        except LabelParseError as e:
            raise LabelParseError(f"line {line}: {e}") from None
        if neuron_id not in neurons:
            raise UnknownIdError(f"line {line}: label refers to unknown neuron id {neuron_id}")
        if neuron_id in labels:
            raise RecordValidationError(f"duplicate label of neuron {neuron_id}", line)
        labels[neuron_id] = layer

    label_set = LabelSet(rater_id=rater_id, labels=labels)
    logger.info(f"Read {len(label_set):,d} labels of rater {rater_id} from {path}")
    return label_set


def write_labels(label_set: LabelSet, path: Path) -> None:
    write_table(label_set.to_columns(), path)
