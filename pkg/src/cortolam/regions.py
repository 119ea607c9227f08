from enum import IntEnum
from typing import Dict, Sequence, Tuple

import attr
import numpy as np
from loguru import logger

from .errors import DegenerateDataError, FeatureUnavailableError
from .spatial import SpatialIndex

logger.disable("cortolam")  # Disable emit logs by default

OTSU_BINS = 256
OTSU_TIE_RTOL = 1e-12
"""Threshold tuples whose within-class variance is this close to the minimum are tied."""


class Population(IntEnum):
    """Density population of a neuron."""

    SPARSE = 0
    AVERAGE = 1
    DENSE = 2

    @property
    def label(self) -> str:
        return self.name.lower()


class SparseKind(IntEnum):
    """Which sparse region a sparse neuron belongs to."""

    NONE = 0
    LAYER_I = 1
    WHITE_MATTER = 2

    @property
    def label(self) -> str:
        return {0: "none", 1: "layer_I", 2: "white_matter"}[self.value]


class SizeClass(IntEnum):
    SMALLER = 0
    LARGER = 1

    @property
    def label(self) -> str:
        return self.name.lower()


REGION_COLUMNS = [
    "sparse_flag",
    "dense_flag",
    "depth_um",
    "thickness_um",
    "depth_norm",
    "dist_to_dense_um",
]
"""Feature columns of the region block."""


@attr.s(auto_attribs=True, kw_only=True, frozen=True, eq=False)
class OtsuSplit:
    """Multi-level Otsu split of a set of values."""

    thresholds: np.ndarray
    """Ascending class boundaries in value units (lower bin edges of classes 1, 2, ...)."""

    bin_thresholds: Tuple[int, ...]
    """The class boundaries as histogram bin indices."""

    assignment: np.ndarray
    """Class of each value, 0 being the lowest."""

    within_variance: float
    """Total within-class sum of squares at the optimum, in bin units."""


def otsu_thresholds(values: Sequence[float], n_classes: int, n_bins: int = OTSU_BINS) -> OtsuSplit:
    """Exhaustive multi-level Otsu thresholding.

    The values are binned into `n_bins` equal-width bins over ``[min, max]``. Every tuple of
    bin boundaries leaving each class non-empty is scored by the total within-class sum of
    squared deviations of the bin indices; the minimum wins and ties (within
    :data:`OTSU_TIE_RTOL`) go to the lexicographically lowest tuple.

    Raises:
        DegenerateDataError: Fewer than `n_classes` occupied bins, e.g. all values identical.

    Examples:

        >>> split = otsu_thresholds([1, 1, 2, 8, 9, 9], 2)
        >>> split.assignment.tolist()
        [0, 0, 0, 1, 1, 1]
    """
    if n_classes not in (2, 3):
        raise ValueError(f"Only 2 or 3 classes are supported; got {n_classes}")
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0 or not np.all(np.isfinite(v)):
        raise DegenerateDataError("Otsu thresholding needs finite values")
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        raise DegenerateDataError(f"All {len(v):,d} values are identical ({lo})")

    bins = np.clip(np.floor((v - lo) / (hi - lo) * n_bins).astype(np.int64), 0, n_bins - 1)
    hist = np.bincount(bins, minlength=n_bins).astype(np.int64)
    if np.count_nonzero(hist) < n_classes:
        raise DegenerateDataError(
            f"Only {np.count_nonzero(hist)} occupied histogram bins for {n_classes} classes"
        )

    b = np.arange(n_bins, dtype=np.int64)
    # Exclusive prefix sums: P[t] sums bins [0, t)
    w = np.concatenate([[0], np.cumsum(hist)])
    s = np.concatenate([[0], np.cumsum(hist * b)])
    q_total = float(np.sum(hist * b * b))

    def between(lo_t, hi_t):
        # Σ S²/W of bins [lo_t, hi_t); integer sums are exact
        cnt = w[hi_t] - w[lo_t]
        tot = s[hi_t] - s[lo_t]
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(cnt > 0, (tot * tot).astype(np.float64) / cnt, 0.0), cnt > 0

    cuts = np.arange(1, n_bins)
    if n_classes == 2:
        t1 = cuts
        b0, ok0 = between(0, t1)
        b1, ok1 = between(t1, n_bins)
        valid = ok0 & ok1
        score = q_total - (b0 + b1)
        tuples = t1[:, None]
    else:
        t1, t2 = np.meshgrid(cuts, cuts, indexing="ij")
        t1, t2 = t1.ravel(), t2.ravel()
        ordered = t1 < t2
        t1, t2 = t1[ordered], t2[ordered]
        b0, ok0 = between(0, t1)
        b1, ok1 = between(t1, t2)
        b2, ok2 = between(t2, n_bins)
        valid = ok0 & ok1 & ok2
        score = q_total - (b0 + b1 + b2)
        tuples = np.stack([t1, t2], axis=1)

    score = np.where(valid, score, np.inf)
    best = float(score.min())
    # Candidates are enumerated in lexicographic order, so the first tie is the lowest
    tied = np.flatnonzero(score <= best + OTSU_TIE_RTOL * abs(best))
    chosen = tuple(int(t) for t in tuples[tied[0]])
    thresholds = lo + np.asarray(chosen, dtype=np.float64) * (hi - lo) / n_bins
    assignment = np.searchsorted(np.asarray(chosen), bins, side="right")
    return OtsuSplit(
        thresholds=thresholds,
        bin_thresholds=chosen,
        assignment=assignment,
        within_variance=max(float(score[tied[0]]), 0.0),
    )


def classify_population(density: Sequence[float]) -> np.ndarray:
    """Tag neurons sparse, average or dense by a 3-class Otsu split of their density.

    Returns:
        :class:`Population` codes per neuron.

    Raises:
        DegenerateDataError: Fewer than three distinct density levels.
    """
    split = otsu_thresholds(density, 3)
    n_sparse, n_average, n_dense = np.bincount(split.assignment, minlength=3).tolist()
    logger.info(
        f"Population split at {', '.join(f'{t:.1f}' for t in split.thresholds)} neurons/mm²: "
        f"{n_sparse:,d} sparse, {n_average:,d} average, {n_dense:,d} dense"
    )
    return split.assignment.astype(np.int64)


def split_sparse(hull_area: Sequence[float]) -> Tuple[np.ndarray, bool]:
    """Split sparse neurons into layer I and white matter by a 2-class Otsu on hull area.

    Neurons in the larger-area class are white matter. When the areas cannot be split,
    every neuron is tagged white matter.

    Returns:
        :class:`SparseKind` codes per neuron and whether the split was degenerate.
    """
    area = np.asarray(hull_area, dtype=np.float64)
    try:
        split = otsu_thresholds(area, 2)
    except DegenerateDataError as e:
        logger.warning(f"Cannot split {len(area):,d} sparse neurons ({e}); all tagged white matter")
        return np.full(len(area), SparseKind.WHITE_MATTER, dtype=np.int64), True
    kinds = np.where(split.assignment == 1, SparseKind.WHITE_MATTER, SparseKind.LAYER_I)
    return kinds.astype(np.int64), False


def depth_thickness(
    points: np.ndarray,
    layer_i: np.ndarray,
    white_matter: np.ndarray,
    dense: np.ndarray,
) -> Dict[str, np.ndarray]:
    """Cortical depth and thickness of each point from the tagged neuron sets.

    depth is the distance to the nearest layer I neuron, thickness adds the distance to the
    nearest white matter neuron, and depth_norm is their ratio (0 where thickness is 0).

    Args:
        points: ``(n, 2)`` positions of the neurons to measure.
        layer_i, white_matter, dense: ``(m, 2)`` positions of the tagged neurons.

    Raises:
        FeatureUnavailableError: A tagged set is empty.
    """
    for name, tagged in (("layer I", layer_i), ("white matter", white_matter), ("dense", dense)):
        if len(tagged) == 0:
            raise FeatureUnavailableError(f"No {name} neurons to measure cortical depth from")
    depth, _ = SpatialIndex(layer_i).nearest(points)
    to_wm, _ = SpatialIndex(white_matter).nearest(points)
    to_dense, _ = SpatialIndex(dense).nearest(points)
    thickness = depth + to_wm
    with np.errstate(divide="ignore", invalid="ignore"):
        depth_norm = np.where(thickness > 0, depth / thickness, 0.0)
    return {
        "depth_um": depth,
        "thickness_um": thickness,
        "depth_norm": depth_norm,
        "dist_to_dense_um": to_dense,
    }


@attr.s(auto_attribs=True, kw_only=True, eq=False)
class RegionTags:
    """Per-neuron region tags and cortical location."""

    ids: np.ndarray
    population: np.ndarray
    """:class:`Population` codes."""

    sparse_kind: np.ndarray
    """:class:`SparseKind` codes; none exactly for non-sparse neurons."""

    depth_um: np.ndarray
    thickness_um: np.ndarray
    depth_norm: np.ndarray
    dist_to_dense_um: np.ndarray
    sparse_split_degenerate: bool = False

    def feature_block(self) -> Dict[str, np.ndarray]:
        """The region block of the feature vector, see :data:`REGION_COLUMNS`."""
        return {
            "sparse_flag": (self.population == Population.SPARSE).astype(np.float64),
            "dense_flag": (self.population == Population.DENSE).astype(np.float64),
            "depth_um": self.depth_um,
            "thickness_um": self.thickness_um,
            "depth_norm": self.depth_norm,
            "dist_to_dense_um": self.dist_to_dense_um,
        }

    def to_columns(self) -> Dict[str, list]:
        """Columns of ``regions.csv``."""
        return {
            "id": self.ids.tolist(),
            "population": [Population(p).label for p in self.population],
            "sparse_kind": [SparseKind(k).label for k in self.sparse_kind],
            "depth_um": self.depth_um.tolist(),
            "thickness_um": self.thickness_um.tolist(),
            "depth_norm": self.depth_norm.tolist(),
            "dist_to_dense_um": self.dist_to_dense_um.tolist(),
        }


def derive_regions(
    ids: np.ndarray, positions: np.ndarray, density: np.ndarray, hull_area: np.ndarray
) -> RegionTags:
    """Derive the populations, sparse kinds and cortical location of all neurons.

    Args:
        ids: Neuron ids.
        positions: ``(n, 2)`` neuron positions.
        density: Local density of each neuron (neurons per mm²).
        hull_area: Neighbourhood hull area of each neuron, used to split the sparse
            population.

    Raises:
        DegenerateDataError: The densities cannot be split into three populations.
        FeatureUnavailableError: No layer I or white matter neurons are found.
    """
    population = classify_population(density)
    sparse = population == Population.SPARSE
    sparse_kind = np.full(len(ids), SparseKind.NONE, dtype=np.int64)
    kinds, degenerate = split_sparse(hull_area[sparse])
    sparse_kind[sparse] = kinds
    logger.info(
        f"Sparse neurons split into {np.sum(kinds == SparseKind.LAYER_I):,d} layer I "
        f"and {np.sum(kinds == SparseKind.WHITE_MATTER):,d} white matter"
    )
    location = depth_thickness(
        positions,
        positions[sparse_kind == SparseKind.LAYER_I],
        positions[sparse_kind == SparseKind.WHITE_MATTER],
        positions[population == Population.DENSE],
    )
    return RegionTags(
        ids=np.asarray(ids),
        population=population,
        sparse_kind=sparse_kind,
        sparse_split_degenerate=degenerate,
        **location,
    )


def size_populations(area_um2: Sequence[float]) -> np.ndarray:
    """Split neurons into larger and smaller somata by a 2-class Otsu on soma area.

    Returns:
        :class:`SizeClass` codes per neuron.
    """
    split = otsu_thresholds(area_um2, 2)
    logger.info(f"Soma size split at {split.thresholds[0]:.1f}µm²")
    return split.assignment.astype(np.int64)


def nni_zscore(nni: np.ndarray, n: np.ndarray) -> np.ndarray:
    """Z-score of a nearest neighbour index against complete spatial randomness.

    The standard error of the mean nearest-neighbour distance of `n` random points over an
    area A is ``sqrt((4 - π) A / (4π n²))``; relative to the expected distance
    ``0.5 sqrt(A / n)`` this gives ``(nni - 1) sqrt(n) / 0.52272``.
    """
    se_rel = 2.0 * np.sqrt((4.0 - np.pi) / (4.0 * np.pi))
    return (np.asarray(nni, dtype=np.float64) - 1.0) * np.sqrt(n) / se_rel
