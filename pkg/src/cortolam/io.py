import csv
import gzip
import json
import math
from contextlib import closing
from numbers import Integral, Real
from pathlib import Path
from typing import Any, Dict, Generator, List, Literal, Mapping, Sequence, Tuple, overload

import numpy as np

from .errors import SchemaError


class unix_csv(csv.excel):
    """The :class:`csv.Dialect` of every CSV written by cortolam."""

    lineterminator = "\n"


csv.register_dialect("unix_csv", unix_csv)


@overload
def read_csv(
    path: Path, as_dict: Literal[False] = ..., **kwargs
) -> Generator[List[str], None, None]:
    ...


@overload
def read_csv(
    path: Path, as_dict: Literal[True], **kwargs
) -> Generator[Dict[str, str], None, None]:
    ...


def read_csv(path, as_dict=False, columns=None, **kwargs):
    """Read a plain-text or gzip compressed CSV table.

    When `as_dict` is `False`, return each row as a list using :func:`csv.reader`.

    When `as_dict` is `True`, return each row as a `dict` mapping from the
    column name to the corresponding value using :class:`csv.DictReader`.
    `columns` will be used as the column names. If `columns` is omitted, the
    first row will be treated as the column names.

    Additional arguments ``kwargs`` are passed to the underlying function.

    Examples:

        >>> reader = read_csv(Path('neurons.csv'))
        >>> header = next(reader); header[:3]
        ['id', 'x_um', 'y_um']
    """
    if path.suffix == ".gz":
        file_obj = gzip.open(path, "rt", newline="")
    else:
        file_obj = open(path, "rt", newline="")
    with closing(file_obj) as f:
        if as_dict:
            yield from csv.DictReader(f, fieldnames=columns, **kwargs)
        else:
            yield from csv.reader(f, **kwargs)


def read_columns(path: Path) -> Tuple[List[str], Dict[str, List[str]]]:
    """Read a CSV table column-wise.

    Returns:
        The header and a `dict` mapping each column name to its raw string values.
    """
    reader = read_csv(path)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError(f"{path} is empty; expected a header row") from None
    columns: Dict[str, List[str]] = {name: [] for name in header}
    for row in reader:
        if not row:
            continue
        for name, value in zip(header, row):
            columns[name].append(value)
    return header, columns


def numeric_columns(
    columns: Mapping[str, Sequence[str]], names: Sequence[str], dtype=float
) -> Dict[str, np.ndarray]:
    """Convert the named raw columns of :func:`read_columns` to numpy arrays."""
    converted = {}
    for name in names:
        if name not in columns:
            raise SchemaError(f"Missing required column {name!r}", column=name)
        try:
            converted[name] = np.asarray(columns[name], dtype=np.float64).astype(dtype)
        except ValueError as e:
            raise SchemaError(f"Column {name!r} is not numeric: {e}", column=name) from e
    return converted


def format_value(value: Any) -> str:
    """Serialize one table cell.

    Floats are written with the shortest repr that reads back to the same value.
    Missing values (`None` or NaN) become empty cells.

    Examples:

        >>> format_value(0.1 + 0.2)
        '0.30000000000000004'
        >>> format_value(np.int64(7))
        '7'
        >>> format_value(None)
        ''
    """
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, Integral):
        return str(int(value))
    if isinstance(value, Real):
        value = float(value)
        if math.isnan(value):
            return ""
        if value == 0.0:
            # Avoid writing negative zeros
            return "0"
        return repr(value)
    return str(value)


def write_table(columns: Mapping[str, Sequence[Any]], path: Path) -> None:
    """Write a column-ordered table as a CSV with a header row.

    Args:
        columns: Mapping from column name to its values. All columns must have the same
            length. The mapping order defines the column order.
        path: Output path. The parent folder must exist.
    """
    names = list(columns)
    lengths = {len(values) for values in columns.values()}
    if len(lengths) > 1:
        raise SchemaError(f"Columns have different lengths: {sorted(lengths)}")
    n_rows = lengths.pop() if lengths else 0
    with open(path, "wt", newline="") as f:
        writer = csv.writer(f, dialect="unix_csv")
        writer.writerow(names)
        cols = [columns[name] for name in names]
        for i in range(n_rows):
            writer.writerow([format_value(col[i]) for col in cols])


def write_json(obj: Any, path: Path) -> None:
    """Write `obj` as an indented JSON document ending with a newline."""
    with open(path, "wt") as f:
        json.dump(obj, f, indent=2, allow_nan=False)
        f.write("\n")


def read_json(path: Path) -> Any:
    """Read a JSON document."""
    with open(path, "rt") as f:
        return json.load(f)
