from argparse import ArgumentTypeError
from pathlib import Path
from typing import Dict, Final, Optional, Tuple


class PathType:
    """Parse a path argument as a :class:`pathlib.Path` object.

    Args:
        exists: Reject paths that do not exist.
        type: ``file`` or ``dir`` to also require the kind of an existing path.
            Skip the check when `None`.

    Examples:

        >>> parser = argparse.ArgumentParser()
        >>> parser.add_argument("--config", type=PathType(exists=True, type="file"))
    """

    def __init__(self, exists: bool = False, type: Optional[str] = None):
        if type not in (None, "file", "dir"):
            raise ValueError(f"Unknown path type {type!r}")
        self._exists = exists
        self._type = type

    def __call__(self, pth: str) -> Path:
        p = Path(pth)
        if self._exists and not p.exists():
            raise ArgumentTypeError(f"Path does not exist: {pth}")
        if self._type == "file" and p.exists() and not p.is_file():
            raise ArgumentTypeError(f"Path is not a file: {pth}")
        if self._type == "dir" and p.exists() and not p.is_dir():
            raise ArgumentTypeError(f"Path is not a directory: {pth}")
        return p


class KSetType:
    """Parse a comma separated list of neighbourhood sizes.

    Examples:

        >>> KSetType()('500,50,100')
        (50, 100, 500)
    """

    def __call__(self, value: str) -> Tuple[int, ...]:
        ks = []
        for token in value.split(","):
            token = token.strip()
            try:
                k = int(token)
            except ValueError:
                raise ArgumentTypeError(f"Neighbourhood size is not an integer: {token!r}")
            if k < 1:
                raise ArgumentTypeError(f"Neighbourhood size must be positive: {k}")
            ks.append(k)
        if len(set(ks)) != len(ks):
            raise ArgumentTypeError(f"Neighbourhood sizes are not distinct: {value}")
        return tuple(sorted(ks))


class RaterLabelsType:
    """Parse a ``RATER=PATH`` label file argument.

    The label file must exist. Used with ``action='append'`` to collect one file per rater.

    Examples:

        >>> RaterLabelsType()('r1=labels_r1.csv')
        ('r1', PosixPath('labels_r1.csv'))
    """

    def __init__(self, exists: bool = True):
        self._path_type: Final = PathType(exists=exists, type="file" if exists else None)

    def __call__(self, value: str) -> Tuple[str, Path]:
        if "=" not in value:
            raise ArgumentTypeError(f"Expect RATER=PATH; got {value!r}")
        rater, pth = value.split("=", 1)
        if not rater:
            raise ArgumentTypeError(f"Rater id is empty in {value!r}")
        return rater, self._path_type(pth)


def collect_rater_labels(pairs) -> Dict[str, Path]:
    """Turn the repeated ``--labels RATER=PATH`` arguments into a rater to path mapping."""
    labels: Dict[str, Path] = {}
    for rater, pth in pairs or []:
        if rater in labels:
            raise ArgumentTypeError(f"Rater {rater} is given more than once")
        labels[rater] = pth
    return labels
