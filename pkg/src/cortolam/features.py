"""Per-neuron neighbourhood features and the feature table files."""
import warnings
from concurrent.futures import ThreadPoolExecutor
from enum import Flag
from pathlib import Path
from typing import Dict, List, NamedTuple, Sequence, Tuple

import attr
import numpy as np
from loguru import logger
from scipy.spatial import cKDTree
from scipy.stats import kurtosis, skew

from .config import FeatureConfig, SliceConfig
from .data import NeuronTable
from .errors import DegenerateDataError, DegenerateHullError, SchemaError
from .io import numeric_columns, read_columns, read_json, write_json, write_table
from .regions import REGION_COLUMNS, RegionTags, derive_regions
from .spatial import SpatialIndex, convex_hull

logger.disable("cortolam")  # Disable emit logs by default


class FeatureFlag(Flag):
    """Degenerate situations met while computing the features of a neuron.

    Flagged features hold finite substitutes (usually 0) instead of NaN.
    """

    NONE = 0
    K_CLAMPED = 1
    """A neighbourhood size exceeded the number of other neurons."""
    FEW_NEIGHBORS = 2
    """Fewer than three neighbours; distance statistics beyond the mean are 0."""
    DEGENERATE_HULL = 4
    """The neighbours have no hull area; hull, density and NNI features are 0."""
    GRAY_IMPUTED = 8
    """Missing grayscale values were replaced by the column median."""
    REGION_UNAVAILABLE = 16
    """The region block could not be derived and is 0."""
    SPARSE_SPLIT_DEGENERATE = 32
    """The sparse population could not be split; all sparse neurons are white matter."""

    @classmethod
    def parse(cls, value: str) -> "FeatureFlag":
        """Parse the ``|`` separated flag names of a flags file.

        Examples:

            >>> FeatureFlag.parse("K_CLAMPED|FEW_NEIGHBORS") == (
            ...     FeatureFlag.K_CLAMPED | FeatureFlag.FEW_NEIGHBORS)
            True
        """
        flags = cls.NONE
        for name in filter(None, value.split("|")):
            try:
                flags |= cls[name]
            except KeyError:
                raise SchemaError(f"Unknown feature flag {name!r}") from None
        return flags

    def names(self) -> List[str]:
        return [f.name for f in type(self) if f.value and f in self]


SHAPE_COLUMNS = ["area_um2", "perimeter_um", "circularity", "roundness", "gray_mean", "gray_median"]
"""Feature columns of the shape block."""

PER_K_COLUMNS = [
    "mean",
    "std",
    "skew",
    "kurt",
    "entropy",
    "hull_area",
    "hull_perimeter",
    "hull_mean_nnd",
    "hull_std_nnd",
    "density",
    "nni",
]
"""Feature columns of each neighbourhood size, suffixed with ``_<k>``."""

AREA_PER_MM2 = 1e-6
"""Square millimetres per square micrometre."""


def feature_schema(config: FeatureConfig) -> List[str]:
    """Ordered feature column names.

    Examples:

        >>> len(feature_schema(FeatureConfig()))
        71
    """
    columns = list(SHAPE_COLUMNS)
    for k in config.k_set:
        columns.extend(f"{name}_{k}" for name in PER_K_COLUMNS)
    k, r = config.slices.k, config.slices.sectors
    columns.extend([f"shannon_{k}_{r}", f"simpson_{k}_{r}", "slice_min_frac", "slice_max_frac"])
    if config.neighbor_size:
        columns.extend(f"nbr_area_mean_{k}" for k in config.k_set)
    columns.extend(REGION_COLUMNS)
    return columns


class DistanceStats(NamedTuple):
    mean: float
    std: float
    skew: float
    kurt: float
    entropy: float
    flags: FeatureFlag = FeatureFlag.NONE


class HullFeatures(NamedTuple):
    hull_area: float
    hull_perimeter: float
    hull_mean_nnd: float
    hull_std_nnd: float
    flags: FeatureFlag = FeatureFlag.NONE


def distance_block(dists: np.ndarray, entropy_bins: int = 16) -> Dict[str, np.ndarray]:
    """Statistics of the neighbour distances of each row of `dists`.

    Args:
        dists: ``(m, k)`` neighbour distances.
        entropy_bins: Equal-width bins over ``[0, max distance]`` of each row.

    Returns:
        ``mean``, ``std``, ``skew`` (g1), ``kurt`` (excess g2) and ``entropy`` (natural
        log) per row. With fewer than three distances every statistic beyond the mean
        is 0; zero-variance rows have zero skew and kurtosis.
    """
    m, k = dists.shape
    out = {name: np.zeros(m) for name in ("mean", "std", "skew", "kurt", "entropy")}
    if k == 0:
        return out
    out["mean"] = dists.mean(axis=1)
    if k < 3:
        return out
    out["std"] = dists.std(axis=1)
    flat = out["std"] <= 1e-12 * np.maximum(out["mean"], 1.0)
    with warnings.catch_warnings(), np.errstate(all="ignore"):
        warnings.simplefilter("ignore", RuntimeWarning)
        g1 = skew(dists, axis=1, bias=True)
        g2 = kurtosis(dists, axis=1, fisher=True, bias=True)
    out["skew"] = np.where(flat, 0.0, g1)
    out["kurt"] = np.where(flat, 0.0, g2)

    top = dists.max(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = np.where(top[:, None] > 0, dists / top[:, None], 0.0)
    bins = np.clip(np.floor(scaled * entropy_bins).astype(np.int64), 0, entropy_bins - 1)
    counts = np.bincount(
        (np.arange(m)[:, None] * entropy_bins + bins).ravel(), minlength=m * entropy_bins
    ).reshape(m, entropy_bins)
    p = counts / k
    with np.errstate(divide="ignore", invalid="ignore"):
        out["entropy"] = -np.sum(np.where(p > 0, p * np.log(p), 0.0), axis=1)
    return out


def distance_stats(index: SpatialIndex, neuron_id: int, k: int, entropy_bins: int = 16) -> DistanceStats:
    """Statistics of the distances from a neuron to its `k` nearest neighbours."""
    nbrs = index.knn(neuron_id, k)
    flags = FeatureFlag.K_CLAMPED if nbrs.clamped else FeatureFlag.NONE
    if len(nbrs) < 3:
        flags |= FeatureFlag.FEW_NEIGHBORS
    block = distance_block(nbrs.distances[None, :], entropy_bins)
    return DistanceStats(*(float(block[name][0]) for name in DistanceStats._fields[:-1]), flags)


def member_nnd(members: np.ndarray) -> np.ndarray:
    """Distance from each member to its nearest other member."""
    dists, _ = cKDTree(members).query(members, k=2)
    return dists[:, 1]


def hull_of_members(members: np.ndarray) -> HullFeatures:
    """Hull descriptors of a neighbour set (the query neuron excluded)."""
    try:
        hull = convex_hull(members)
    except DegenerateHullError:
        return HullFeatures(0.0, 0.0, 0.0, 0.0, FeatureFlag.DEGENERATE_HULL)
    nnd = member_nnd(members)
    return HullFeatures(hull.area_um2, hull.perimeter_um, float(nnd.mean()), float(nnd.std()))


def hull_features(index: SpatialIndex, neuron_id: int, k: int) -> HullFeatures:
    """Hull area, perimeter and member nearest-neighbour distance statistics.

    Examples:

        >>> hull_features(index, 1, 4)
        HullFeatures(hull_area=1.0, hull_perimeter=4.0, hull_mean_nnd=1.0, hull_std_nnd=0.0, ...)
    """
    nbrs = index.knn(neuron_id, k)
    result = hull_of_members(index.positions[nbrs.rows])
    if nbrs.clamped:
        result = result._replace(flags=result.flags | FeatureFlag.K_CLAMPED)
    return result


def density_from_hull(k: int, hull_area_um2: float) -> float:
    """Neurons per mm² of `k` neighbours spread over their hull; 0 without hull area."""
    if hull_area_um2 <= 0:
        return 0.0
    return k / (hull_area_um2 * AREA_PER_MM2)


def local_density(index: SpatialIndex, neuron_id: int, k: int) -> Tuple[float, FeatureFlag]:
    """Local density around a neuron in neurons per mm².

    Examples:

        k=4 neighbours on the corners of a 100µm square:

        >>> local_density(index, 0, 4)
        (400.0, <FeatureFlag.NONE: 0>)
    """
    hull = hull_features(index, neuron_id, k)
    k_eff, _ = index.effective_k(k)
    return density_from_hull(k_eff, hull.hull_area), hull.flags


def nni_value(mean_distance: float, k: int, hull_area_um2: float) -> float:
    """Observed mean distance over the expected ``0.5 sqrt(A / k)`` of random points."""
    if hull_area_um2 <= 0 or k == 0:
        return 0.0
    return mean_distance / (0.5 * np.sqrt(hull_area_um2 / k))


def nni(index: SpatialIndex, neuron_id: int, k: int, mode: str = "nearest") -> Tuple[float, FeatureFlag]:
    """Nearest neighbour index of a neuron's neighbourhood.

    With ``mode="nearest"`` the observed distance is the mean over the k neighbours of
    each neighbour's nearest-neighbour distance within the neighbour set; with
    ``mode="central"`` it is the mean distance from the neuron to its neighbours.
    Values below 1 indicate clustering, near 1 randomness and above 1 regular spacing.
    """
    nbrs = index.knn(neuron_id, k)
    hull = hull_of_members(index.positions[nbrs.rows])
    observed = hull.hull_mean_nnd if mode == "nearest" else float(np.mean(nbrs.distances))
    flags = hull.flags | (FeatureFlag.K_CLAMPED if nbrs.clamped else FeatureFlag.NONE)
    return nni_value(observed, len(nbrs), hull.hull_area), flags


def sector_of(dx: np.ndarray, dy: np.ndarray, sectors: int) -> np.ndarray:
    """Angular sector of each offset; sector 0 starts east and sectors run counter-clockwise."""
    angle = np.mod(np.arctan2(dy, dx), 2 * np.pi)
    return np.clip(np.floor(angle / (2 * np.pi / sectors)).astype(np.int64), 0, sectors - 1)


def slice_block(offsets_x: np.ndarray, offsets_y: np.ndarray, sectors: int) -> np.ndarray:
    """``(m, sectors)`` proportions of the neighbours of each row falling in each sector."""
    m, k = offsets_x.shape
    if k == 0:
        return np.zeros((m, sectors))
    sec = sector_of(offsets_x, offsets_y, sectors)
    counts = np.bincount(
        (np.arange(m)[:, None] * sectors + sec).ravel(), minlength=m * sectors
    ).reshape(m, sectors)
    return counts / k


def slice_partition(index: SpatialIndex, neuron_id: int, cfg: SliceConfig) -> np.ndarray:
    """Proportions of a neuron's neighbours in each angular sector; they sum to 1."""
    nbrs = index.knn(neuron_id, cfg.k)
    center = index.positions[index.row_of(neuron_id)]
    offsets = index.positions[nbrs.rows] - center
    return slice_block(offsets[None, :, 0], offsets[None, :, 1], cfg.sectors)[0]


def shannon_index(p: np.ndarray) -> np.ndarray:
    """Shannon diversity ``-Σ p ln p`` over the last axis; empty classes contribute 0.

    Examples:

        >>> float(shannon_index(np.full(8, 1 / 8)))  # ln 8
        2.0794415416798357
    """
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.sum(np.where(p > 0, p * np.log(p), 0.0), axis=-1)


def simpson_index(p: np.ndarray) -> np.ndarray:
    """Simpson index ``Σ p²`` over the last axis."""
    p = np.asarray(p, dtype=np.float64)
    return np.sum(p * p, axis=-1)


@attr.s(auto_attribs=True, kw_only=True, eq=False, repr=False)
class FeatureTable:
    """Per-neuron feature vectors with a fixed, named column order."""

    ids: np.ndarray
    columns: List[str]
    values: np.ndarray
    """``(n, len(columns))`` float matrix."""

    flags: np.ndarray
    """Integer :class:`FeatureFlag` value per neuron."""

    def __attrs_post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(len(self.ids), -1)
        self.flags = np.asarray(self.flags, dtype=np.int64)
        if self.values.shape[1] != len(self.columns):
            raise SchemaError(
                f"{self.values.shape[1]} feature values but {len(self.columns)} columns"
            )
        self._row_of = {int(i): row for row, i in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def __repr__(self):
        return f"{type(self).__name__}({len(self):,d} neurons × {len(self.columns)} features)"

    def column(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.columns.index(name)]
        except ValueError:
            raise SchemaError(f"No feature column {name!r}", column=name) from None

    def rows_of(self, neuron_ids: Sequence[int]) -> np.ndarray:
        try:
            return np.asarray([self._row_of[int(i)] for i in neuron_ids], dtype=np.int64)
        except KeyError as e:
            raise SchemaError(f"Neuron {e.args[0]} has no feature row") from None

    def select(self, neuron_ids: Sequence[int]) -> "FeatureTable":
        rows = self.rows_of(neuron_ids)
        return FeatureTable(
            ids=self.ids[rows], columns=list(self.columns), values=self.values[rows],
            flags=self.flags[rows],
        )

    def flag_of(self, neuron_id: int) -> FeatureFlag:
        return FeatureFlag(int(self.flags[self._row_of[int(neuron_id)]]))

    def check_finite(self) -> None:
        bad = ~np.isfinite(self.values)
        if bad.any():
            row, col = np.argwhere(bad)[0]
            raise SchemaError(
                f"Feature {self.columns[col]} of neuron {self.ids[row]} is not finite",
                column=self.columns[col],
            )

    def to_columns(self) -> Dict[str, np.ndarray]:
        columns: Dict[str, np.ndarray] = {"id": self.ids}
        for j, name in enumerate(self.columns):
            columns[name] = self.values[:, j]
        return columns


def schema_path_of(path: Path) -> Path:
    """``features.schema.json`` next to ``features.csv``."""
    return path.with_name(path.name.split(".")[0] + ".schema.json")


def flags_path_of(path: Path) -> Path:
    return path.with_name(path.name.split(".")[0] + ".flags.csv")


def write_features(table: FeatureTable, path: Path) -> None:
    """Write the features CSV with its schema and flags sidecars."""
    write_table(table.to_columns(), path)
    write_json(list(table.columns), schema_path_of(path))
    write_table(
        {
            "id": table.ids,
            "flags": ["|".join(FeatureFlag(int(f)).names()) for f in table.flags],
        },
        flags_path_of(path),
    )


def load_features(path: Path) -> FeatureTable:
    """Read a features CSV, checking it against its schema sidecar when present.

    Raises:
        SchemaError: The columns differ from the schema, or a value is missing.
    """
    header, raw = read_columns(path)
    if not header or header[0] != "id":
        raise SchemaError(f"{path} must start with an id column", column="id")
    columns = header[1:]
    schema_path = schema_path_of(path)
    if schema_path.exists():
        schema = read_json(schema_path)
        if schema != columns:
            raise SchemaError(f"Columns of {path} do not match {schema_path}")
    ids = numeric_columns(raw, ["id"], dtype=np.int64)["id"]
    numeric = numeric_columns(raw, columns)
    values = np.column_stack([numeric[c] for c in columns]) if columns else np.empty((len(ids), 0))
    flags = np.zeros(len(ids), dtype=np.int64)
    flags_path = flags_path_of(path)
    if flags_path.exists():
        _, flag_cols = read_columns(flags_path)
        parsed = {
            int(i): FeatureFlag.parse(f).value
            for i, f in zip(flag_cols.get("id", []), flag_cols.get("flags", []))
        }
        flags = np.asarray([parsed.get(int(i), 0) for i in ids], dtype=np.int64)
    table = FeatureTable(ids=ids, columns=columns, values=values, flags=flags)
    table.check_finite()
    logger.success(f"Read {len(table):,d} feature vectors of {len(columns)} features from {path}")
    return table


def impute_gray(neurons: NeuronTable) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """Grayscale columns with missing values replaced by the column median.

    Returns:
        The imputed columns and a boolean mask of the neurons that had a missing value.
    """
    imputed = {}
    missing_any = np.zeros(len(neurons), dtype=bool)
    for name in ("gray_mean", "gray_median"):
        col = getattr(neurons, name).copy()
        missing = np.isnan(col)
        if missing.any():
            fill = float(np.median(col[~missing])) if (~missing).any() else 0.0
            col[missing] = fill
            logger.warning(f"Imputed {missing.sum():,d} missing {name} values with {fill:g}")
        imputed[name] = col
        missing_any |= missing
    return imputed, missing_any


class _ChunkFeatures:
    """Neighbourhood features of one block of query neurons."""

    def __init__(self, index: SpatialIndex, neurons: NeuronTable, config: FeatureConfig):
        self.index = index
        self.neurons = neurons
        self.config = config
        self.k_max = max(max(config.k_set), config.slices.k)
        self.k_max_eff = min(self.k_max, len(index) - 1)

    def __call__(self, rows: np.ndarray) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
        config = self.config
        pos = self.index.positions
        nbr_rows, nbr_dists = self.index.knn_rows(rows, self.k_max_eff)
        m = len(rows)
        out: Dict[str, np.ndarray] = {}
        flags = np.zeros(m, dtype=np.int64)

        for k in config.k_set:
            k_eff = min(k, self.k_max_eff)
            if k_eff < k:
                flags |= FeatureFlag.K_CLAMPED.value
            if k_eff < 3:
                flags |= FeatureFlag.FEW_NEIGHBORS.value
            d = nbr_dists[:, :k_eff]
            for name, values in distance_block(d, config.entropy_bins).items():
                out[f"{name}_{k}"] = values

            hull_cols = np.zeros((m, 4))
            for i in range(m):
                hull = hull_of_members(pos[nbr_rows[i, :k_eff]])
                hull_cols[i] = hull[:4]
                flags[i] |= hull.flags.value
            area = hull_cols[:, 0]
            out[f"hull_area_{k}"] = area
            out[f"hull_perimeter_{k}"] = hull_cols[:, 1]
            out[f"hull_mean_nnd_{k}"] = hull_cols[:, 2]
            out[f"hull_std_nnd_{k}"] = hull_cols[:, 3]

            has_area = area > 0
            with np.errstate(divide="ignore", invalid="ignore"):
                out[f"density_{k}"] = np.where(has_area, k_eff / (area * AREA_PER_MM2), 0.0)
                observed = hull_cols[:, 2] if config.nni_mode == "nearest" else out[f"mean_{k}"]
                expected = 0.5 * np.sqrt(area / max(k_eff, 1))
                out[f"nni_{k}"] = np.where(has_area, observed / expected, 0.0)
            if config.neighbor_size:
                nbr_area = self.neurons.area_um2[nbr_rows[:, :k_eff]]
                out[f"nbr_area_mean_{k}"] = (
                    nbr_area.mean(axis=1) if k_eff else np.zeros(m)
                )

        slices = config.slices
        k_eff = min(slices.k, self.k_max_eff)
        if k_eff < slices.k:
            flags |= FeatureFlag.K_CLAMPED.value
        sel = nbr_rows[:, :k_eff]
        p = slice_block(
            pos[sel, 0] - pos[rows, 0][:, None], pos[sel, 1] - pos[rows, 1][:, None], slices.sectors
        )
        occupied = k_eff > 0
        out[f"shannon_{slices.k}_{slices.sectors}"] = shannon_index(p)
        out[f"simpson_{slices.k}_{slices.sectors}"] = simpson_index(p) if occupied else np.zeros(m)
        out["slice_min_frac"] = p.min(axis=1)
        out["slice_max_frac"] = p.max(axis=1)
        return out, flags


def assemble_features(
    neurons: NeuronTable, index: SpatialIndex, config: FeatureConfig
) -> FeatureTable:
    """Compute the feature vectors of every neuron of a section.

    Neighbourhood features are computed in blocks of ``config.chunk_size`` neurons on
    ``config.jobs`` threads; the result does not depend on either. The region block is
    derived last from ``density_<region_k>`` and ``hull_area_<region_k>``; when it cannot
    be derived it is zero-filled and flagged.
    """
    n = len(neurons)
    schema = feature_schema(config)
    logger.info(
        f"Compute {len(schema)} features of {n:,d} neurons "
        f"(K-set {', '.join(map(str, config.k_set))}, {config.jobs} thread(s))"
    )
    values = np.zeros((n, len(schema)))
    col = {name: j for j, name in enumerate(schema)}
    flags = np.zeros(n, dtype=np.int64)

    for name in ("area_um2", "perimeter_um", "circularity", "roundness"):
        values[:, col[name]] = getattr(neurons, name)
    gray, imputed = impute_gray(neurons)
    for name, column in gray.items():
        values[:, col[name]] = column
    flags[imputed] |= FeatureFlag.GRAY_IMPUTED.value

    compute = _ChunkFeatures(index, neurons, config)
    chunks = [
        np.arange(start, min(start + config.chunk_size, n))
        for start in range(0, n, config.chunk_size)
    ]
    with ThreadPoolExecutor(max_workers=config.jobs) as executor:
        for rows, (block, chunk_flags) in zip(chunks, executor.map(compute, chunks)):
            for name, column in block.items():
                values[rows, col[name]] = column
            flags[rows] |= chunk_flags

    n_clamped = np.count_nonzero(flags & FeatureFlag.K_CLAMPED.value)
    if n_clamped:
        logger.warning(f"Neighbourhood sizes were clamped for {n_clamped:,d} neurons")
    n_degenerate = np.count_nonzero(flags & FeatureFlag.DEGENERATE_HULL.value)
    if n_degenerate:
        logger.warning(f"{n_degenerate:,d} neurons have a degenerate neighbourhood hull")

    region_k = config.region_k
    try:
        tags = derive_regions(
            neurons.ids,
            index.positions,
            values[:, col[f"density_{region_k}"]],
            values[:, col[f"hull_area_{region_k}"]],
        )
    except DegenerateDataError as e:
        logger.error(f"[{e.category}] Region features are unavailable: {e}")
        flags |= FeatureFlag.REGION_UNAVAILABLE.value
    else:
        for name, column in tags.feature_block().items():
            values[:, col[name]] = column
        if tags.sparse_split_degenerate:
            flags |= FeatureFlag.SPARSE_SPLIT_DEGENERATE.value

    table = FeatureTable(ids=neurons.ids, columns=schema, values=values, flags=flags)
    table.check_finite()
    logger.success(f"Computed {len(schema)} features of {n:,d} neurons")
    return table


def region_tags_from_features(neurons: NeuronTable, features: FeatureTable, config: FeatureConfig) -> RegionTags:
    """Re-derive the region tags of a section from its feature table."""
    rows = features.rows_of(neurons.ids)
    return derive_regions(
        neurons.ids,
        neurons.positions,
        features.column(f"density_{config.region_k}")[rows],
        features.column(f"hull_area_{config.region_k}")[rows],
    )
