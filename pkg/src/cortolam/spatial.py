"""Exact neighbour queries and planar convex hulls."""
from typing import Iterator, Optional, Sequence, Tuple

import attr
import numpy as np
from loguru import logger
from scipy.spatial import cKDTree

from .data import NeuronTable
from .errors import DegenerateDataError, DegenerateHullError, UnknownIdError

logger.disable("cortolam")  # Disable emit logs by default

LEAF_SIZE = 16
"""Bucket size of the kd-tree leaves."""

_TIE_RTOL = 1e-9
_TIE_ATOL = 1e-12


def euclidean(dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Euclidean length of coordinate offsets.

    Every distance reported by this module is computed by this exact expression, so equal
    offsets always give bit-identical distances regardless of how they were found.
    """
    return np.sqrt(dx * dx + dy * dy)


@attr.s(auto_attribs=True, frozen=True, eq=False)
class Neighbors:
    """Neighbours of one query neuron, nearest first (ties by ascending id)."""

    ids: np.ndarray
    distances: np.ndarray
    rows: np.ndarray
    """Row positions of the neighbours in the indexed table."""

    clamped: bool = False
    """The requested k exceeded ``n - 1`` and was clamped."""

    def __len__(self) -> int:
        return len(self.ids)


class SpatialIndex:
    """Immutable kd-tree over neuron positions with exact k-nearest-neighbour queries.

    Queries are answered by the kd-tree and made exact on top of it: the distances of the
    candidates are recomputed with :func:`euclidean`, ties at equal distance are ordered
    by ascending neuron id, and a candidate list whose k-th distance is not strictly
    inside the searched radius is completed by a radius query.

    Args:
        positions: ``(n, 2)`` coordinates in µm.
        ids: Neuron ids of the rows. Default to the row positions.
    """

    def __init__(self, positions: np.ndarray, ids: Optional[Sequence[int]] = None):
        positions = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 2)
        if len(positions) == 0:
            raise DegenerateDataError("Cannot build a spatial index over zero neurons")
        if ids is None:
            ids = np.arange(len(positions))
        self.positions: np.ndarray = positions
        self.positions.setflags(write=False)
        self.ids: np.ndarray = np.asarray(ids, dtype=np.int64)
        self.ids.setflags(write=False)
        if len(self.ids) != len(positions):
            raise ValueError("ids and positions have different lengths")
        self._row_of = {int(i): row for row, i in enumerate(self.ids)}
        self._tree = cKDTree(positions, leafsize=LEAF_SIZE, balanced_tree=True, compact_nodes=True)

    @classmethod
    def from_table(cls, neurons: NeuronTable) -> "SpatialIndex":
        return cls(neurons.positions, neurons.ids)

    def __len__(self) -> int:
        return len(self.positions)

    def row_of(self, neuron_id: int) -> int:
        try:
            return self._row_of[int(neuron_id)]
        except KeyError:
            raise UnknownIdError(f"Neuron {neuron_id} is not in the index") from None

    def effective_k(self, k: int) -> Tuple[int, bool]:
        """Clamp `k` to the number of other neurons.

        Returns:
            The effective k and whether it was clamped.
        """
        if k < 1:
            raise ValueError(f"k must be positive; got {k}")
        k_max = len(self) - 1
        return min(k, k_max), k > k_max

    def knn(self, neuron_id: int, k: int) -> Neighbors:
        """The `k` nearest neighbours of an indexed neuron, excluding the neuron itself."""
        row = self.row_of(neuron_id)
        k_eff, clamped = self.effective_k(k)
        if clamped:
            logger.warning(f"k={k} exceeds the {len(self) - 1:,d} other neurons; clamped")
        rows, dists = self.knn_rows(np.array([row]), k_eff)
        return Neighbors(
            ids=self.ids[rows[0]], distances=dists[0], rows=rows[0], clamped=clamped
        )

    def knn_rows(self, rows: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
        """Batched exact neighbour query of indexed rows.

        Args:
            rows: Row positions of the query neurons.
            k: Number of neighbours; must not exceed ``n - 1`` (see :meth:`effective_k`).

        Returns:
            ``(m, k)`` neighbour rows and ``(m, k)`` distances, nearest first.
        """
        rows = np.asarray(rows, dtype=np.int64)
        n = len(self)
        if k > n - 1:
            raise ValueError(f"k={k} exceeds the {n - 1} other neurons")
        if k == 0 or len(rows) == 0:
            return np.empty((len(rows), k), dtype=np.int64), np.empty((len(rows), k))

        # Over-fetch a few candidates so ties at the k-th distance are usually resolved
        n_candidates = min(n, k + 1 + max(8, k // 16))
        query = self.positions[rows]
        tree_dists, cand = self._tree.query(query, k=n_candidates)
        tree_dists = np.atleast_2d(tree_dists)
        cand = np.atleast_2d(cand)

        dists = euclidean(
            self.positions[cand, 0] - query[:, 0:1], self.positions[cand, 1] - query[:, 1:2]
        )
        dists[cand == rows[:, None]] = np.inf
        order = np.lexsort((self.ids[cand], dists), axis=-1)[:, :k]
        nbr_rows = np.take_along_axis(cand, order, axis=1)
        nbr_dists = np.take_along_axis(dists, order, axis=1)

        if n_candidates < n:
            kth = nbr_dists[:, -1]
            incomplete = np.flatnonzero(kth * (1 + _TIE_RTOL) + _TIE_ATOL >= tree_dists[:, -1])
            for i in incomplete:
                nbr_rows[i], nbr_dists[i] = self._knn_by_radius(rows[i], k, kth[i])
        return nbr_rows, nbr_dists

    def _knn_by_radius(self, row: int, k: int, radius: float) -> Tuple[np.ndarray, np.ndarray]:
        """Resolve the k nearest neighbours of `row` among every neuron within `radius`."""
        point = self.positions[row]
        cand = np.asarray(
            self._tree.query_ball_point(point, radius * (1 + _TIE_RTOL) + _TIE_ATOL),
            dtype=np.int64,
        )
        cand = cand[cand != row]
        dists = euclidean(self.positions[cand, 0] - point[0], self.positions[cand, 1] - point[1])
        order = np.lexsort((self.ids[cand], dists))[:k]
        return cand[order], dists[order]

    def iter_knn(
        self, k: int, chunk_size: int = 2048
    ) -> Iterator[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """Query every indexed neuron in blocks of `chunk_size` rows.

        Yields:
            The query rows, their neighbour rows and distances (see :meth:`knn_rows`).
        """
        for start in range(0, len(self), chunk_size):
            rows = np.arange(start, min(start + chunk_size, len(self)))
            nbr_rows, nbr_dists = self.knn_rows(rows, k)
            yield rows, nbr_rows, nbr_dists

    def nearest(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Distance from each of `points` to the nearest indexed neuron (ties by id).

        Returns:
            Distances and the rows of the nearest indexed neurons.
        """
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        if len(points) == 0:
            return np.empty(0), np.empty(0, dtype=np.int64)
        n_candidates = min(len(self), 4)
        tree_dists, cand = self._tree.query(points, k=n_candidates)
        tree_dists = tree_dists.reshape(len(points), -1)
        cand = cand.reshape(len(points), -1)
        dists = euclidean(
            self.positions[cand, 0] - points[:, 0:1], self.positions[cand, 1] - points[:, 1:2]
        )
        order = np.lexsort((self.ids[cand], dists), axis=-1)[:, 0]
        best = cand[np.arange(len(points)), order]
        best_dists = dists[np.arange(len(points)), order]
        if n_candidates < len(self):
            unsure = np.flatnonzero(
                best_dists * (1 + _TIE_RTOL) + _TIE_ATOL >= tree_dists[:, -1]
            )
            for i in unsure:
                near = np.asarray(
                    self._tree.query_ball_point(
                        points[i], best_dists[i] * (1 + _TIE_RTOL) + _TIE_ATOL
                    ),
                    dtype=np.int64,
                )
                d = euclidean(self.positions[near, 0] - points[i, 0],
                              self.positions[near, 1] - points[i, 1])
                j = np.lexsort((self.ids[near], d))[0]
                best[i], best_dists[i] = near[j], d[j]
        return best_dists, best


def build_index(neurons: NeuronTable) -> SpatialIndex:
    """Build the spatial index of a section.

    Raises:
        DegenerateDataError: The section has no neurons.
    """
    if len(neurons) == 0:
        raise DegenerateDataError("Cannot build a spatial index over zero neurons")
    index = SpatialIndex.from_table(neurons)
    logger.debug(f"Built a kd-tree over {len(index):,d} neurons")
    return index


def knn(index: SpatialIndex, query_id: int, k: int) -> Neighbors:
    """The `k` nearest neighbours of neuron `query_id`, see :meth:`SpatialIndex.knn`."""
    return index.knn(query_id, k)


@attr.s(auto_attribs=True, frozen=True, eq=False)
class Hull:
    """Strictly convex polygon with counter-clockwise vertices."""

    vertices: np.ndarray
    area_um2: float
    perimeter_um: float

    def contains(self, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        """Whether each point lies inside or within `tol` µm of the hull."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        a = self.vertices
        b = np.roll(a, -1, axis=0)
        edge = b - a
        length = euclidean(edge[:, 0], edge[:, 1])
        # Signed distance of every point to every edge line, positive inside
        cross = edge[None, :, 0] * (points[:, None, 1] - a[None, :, 1]) - edge[None, :, 1] * (
            points[:, None, 0] - a[None, :, 0]
        )
        return np.all(cross / length[None, :] >= -tol, axis=1)


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _interior_mask(pts: np.ndarray) -> np.ndarray:
    """Points strictly inside the polygon of the eight extreme points.

    Those points cannot be hull vertices and are dropped before the monotone chain.
    """
    x, y = pts[:, 0], pts[:, 1]
    extremes = [
        np.argmin(x), np.argmin(x + y), np.argmin(y), np.argmax(x - y),
        np.argmax(x), np.argmax(x + y), np.argmax(y), np.argmax(y - x),
    ]
    poly = []
    for i in extremes:
        if not poly or not np.array_equal(pts[i], poly[-1]):
            poly.append(pts[i])
    if len(poly) > 1 and np.array_equal(poly[0], poly[-1]):
        poly.pop()
    if len(poly) < 3:
        return np.zeros(len(pts), dtype=bool)
    poly_arr = np.array(poly)
    a = poly_arr
    b = np.roll(poly_arr, -1, axis=0)
    extent = max(np.ptp(x), np.ptp(y))
    tol = 1e-12 * extent * extent
    cross = (b[None, :, 0] - a[None, :, 0]) * (y[:, None] - a[None, :, 1]) - (
        b[None, :, 1] - a[None, :, 1]
    ) * (x[:, None] - a[None, :, 0])
    return np.all(cross > tol, axis=1)


def convex_hull(points: np.ndarray) -> Hull:
    """Convex hull of planar points by Andrew's monotone chain.

    Collinear and duplicated points are not hull vertices.

    Raises:
        DegenerateHullError: Fewer than three points, or all points collinear.

    Examples:

        >>> hull = convex_hull(np.array([[0, 0], [1, 0], [1, 1], [0, 1]]))
        >>> hull.area_um2, hull.perimeter_um
        (1.0, 4.0)
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 3:
        raise DegenerateHullError(f"A hull needs at least 3 points; got {len(pts)}")
    if len(pts) > 16:
        pts = pts[~_interior_mask(pts)]
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    coords = pts.tolist()

    lower: list = []
    for p in coords:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(coords):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    vertices = lower[:-1] + upper[:-1]
    if len(vertices) < 3:
        raise DegenerateHullError("All hull points are collinear")

    v = np.array(vertices)
    nxt = np.roll(v, -1, axis=0)
    area = 0.5 * float(np.sum(v[:, 0] * nxt[:, 1] - nxt[:, 0] * v[:, 1]))
    perimeter = float(np.sum(euclidean(nxt[:, 0] - v[:, 0], nxt[:, 1] - v[:, 1])))
    return Hull(vertices=v, area_um2=area, perimeter_um=perimeter)
