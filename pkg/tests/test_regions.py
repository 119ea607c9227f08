from itertools import combinations

import numpy as np
import pytest

from cortolam.errors import DegenerateDataError, FeatureUnavailableError
from cortolam.regions import (
    OTSU_TIE_RTOL,
    Population,
    SizeClass,
    SparseKind,
    classify_population,
    depth_thickness,
    derive_regions,
    nni_zscore,
    otsu_thresholds,
    size_populations,
    split_sparse,
)


def brute_force_otsu(values, n_classes, n_bins):
    """Score every threshold tuple by the within-class sum of squares of its bin indices."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    bins = np.clip(np.floor((v - lo) / (hi - lo) * n_bins).astype(np.int64), 0, n_bins - 1)
    best, best_tuple = np.inf, None
    scores = {}
    for cuts in combinations(range(1, n_bins), n_classes - 1):
        classes = np.searchsorted(np.asarray(cuts), bins, side="right")
        if len(np.unique(classes)) < n_classes:
            continue
        score = sum(
            float(np.sum((bins[classes == c] - bins[classes == c].mean()) ** 2))
            for c in range(n_classes)
        )
        scores[cuts] = score
        best = min(best, score)
    for cuts, score in scores.items():
        if score <= best + OTSU_TIE_RTOL * abs(best) + 1e-9:
            best_tuple = cuts
            break
    return best_tuple, best


def test_otsu_two_clusters():
    split = otsu_thresholds([1, 1, 2, 8, 9, 9], 2)
    assert split.assignment.tolist() == [0, 0, 0, 1, 1, 1]
    assert len(split.thresholds) == 1
    assert 2 < split.thresholds[0] <= 8


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("n_classes, n_bins", [(2, 256), (2, 16), (3, 32)])
def test_otsu_matches_exhaustive_scan(seed, n_classes, n_bins):
    rng = np.random.default_rng(seed)
    values = np.concatenate([rng.normal(0, 1, 40), rng.normal(4, 1.5, 60), rng.exponential(3, 30)])
    split = otsu_thresholds(values, n_classes, n_bins)
    expected, best = brute_force_otsu(values, n_classes, n_bins)
    assert split.bin_thresholds == expected
    assert split.within_variance == pytest.approx(best, rel=1e-9, abs=1e-9)


def test_otsu_three_gaussians():
    rng = np.random.default_rng(10)
    truth = np.repeat([0, 1, 2], 300)
    values = rng.normal(np.array([10.0, 50.0, 90.0])[truth], 2.0)
    split = otsu_thresholds(values, 3)
    assert 10 < split.thresholds[0] < 50
    assert 50 < split.thresholds[1] < 90
    assert np.all(np.diff(split.thresholds) > 0)
    np.testing.assert_array_equal(split.assignment, truth)


def test_otsu_scaling_invariance():
    rng = np.random.default_rng(11)
    values = rng.lognormal(5, 0.8, 500)
    base = otsu_thresholds(values, 3).assignment
    for factor in (2.0, 4.0, 0.5):
        np.testing.assert_array_equal(otsu_thresholds(values * factor, 3).assignment, base)


def test_otsu_permutation_equivariance():
    rng = np.random.default_rng(12)
    values = rng.gamma(3, 2, 300)
    perm = rng.permutation(300)
    base = otsu_thresholds(values, 3).assignment
    np.testing.assert_array_equal(otsu_thresholds(values[perm], 3).assignment, base[perm])


def test_otsu_degenerate():
    with pytest.raises(DegenerateDataError, match="identical"):
        otsu_thresholds([5, 5, 5, 5], 2)
    with pytest.raises(DegenerateDataError, match="occupied histogram bins"):
        otsu_thresholds([1, 2], 3)
    with pytest.raises(DegenerateDataError, match="finite"):
        otsu_thresholds([1, np.nan, 2], 2)
    with pytest.raises(ValueError, match="Only 2 or 3 classes"):
        otsu_thresholds([1, 2, 3, 4], 4)


def test_classify_population():
    rng = np.random.default_rng(13)
    truth = np.repeat([0, 1, 2], [200, 500, 300])
    density = rng.normal(np.array([1000.0, 5000.0, 11000.0])[truth], 400.0)
    population = classify_population(density)
    assert np.mean(population == truth) >= 0.95
    with pytest.raises(DegenerateDataError):
        classify_population([100.0, 200.0])


def test_split_sparse():
    rng = np.random.default_rng(14)
    area = np.concatenate([rng.normal(10_000, 800, 50), rng.normal(500_000, 30_000, 40)])
    kinds, degenerate = split_sparse(area)
    assert not degenerate
    assert np.all(kinds[:50] == SparseKind.LAYER_I)
    assert np.all(kinds[50:] == SparseKind.WHITE_MATTER)


def test_split_sparse_degenerate(caplog):
    kinds, degenerate = split_sparse([20.0, 20.0, 20.0])
    assert degenerate
    assert kinds.tolist() == [SparseKind.WHITE_MATTER] * 3
    assert "all tagged white matter" in caplog.text


def test_depth_thickness():
    points = np.array([[0.0, 0.0], [0.0, 5.0], [3.0, 5.0]])
    location = depth_thickness(
        points,
        layer_i=np.array([[0.0, 0.0]]),
        white_matter=np.array([[0.0, 10.0]]),
        dense=np.array([[0.0, 4.0]]),
    )
    # A layer I neuron itself has zero depth
    assert location["depth_um"][0] == 0.0
    assert location["depth_norm"][0] == 0.0
    # Equidistant to layer I and white matter
    assert location["depth_norm"][1] == 0.5
    assert location["thickness_um"][1] == 10.0
    assert location["depth_norm"][2] == pytest.approx(0.5)
    np.testing.assert_allclose(location["dist_to_dense_um"], [4.0, 1.0, np.hypot(3, 1)])


def test_depth_thickness_empty_set():
    with pytest.raises(FeatureUnavailableError, match="No layer I neurons"):
        depth_thickness(np.zeros((2, 2)), np.empty((0, 2)), np.ones((1, 2)), np.ones((1, 2)))


def test_derive_regions_banded():
    # Top to bottom: layer I, a dense band, an average band and white matter
    y = np.arange(40, dtype=float) * 10
    positions = np.column_stack([np.zeros(40), y])
    density = np.repeat([100.0, 1000.0, 500.0, 120.0], 10)
    hull_area = np.repeat([10.0, 20.0, 30.0, 1000.0], 10)
    tags = derive_regions(np.arange(1, 41), positions, density, hull_area)
    assert tags.population.tolist() == (
        [Population.SPARSE] * 10 + [Population.DENSE] * 10 + [Population.AVERAGE] * 10
        + [Population.SPARSE] * 10
    )
    assert tags.sparse_kind.tolist() == (
        [SparseKind.LAYER_I] * 10 + [SparseKind.NONE] * 20 + [SparseKind.WHITE_MATTER] * 10
    )
    assert not tags.sparse_split_degenerate
    assert np.all((tags.sparse_kind != SparseKind.NONE) == (tags.population == Population.SPARSE))
    assert np.all(tags.depth_um <= tags.thickness_um)
    assert np.all((tags.depth_norm >= 0) & (tags.depth_norm <= 1))
    # Depth grows with the band index
    assert np.all(np.diff(tags.depth_norm) >= 0)
    assert tags.depth_um[14] == 50.0
    assert tags.thickness_um[14] == 50.0 + 160.0

    block = tags.feature_block()
    assert block["sparse_flag"].sum() == 20
    assert block["dense_flag"].sum() == 10
    columns = tags.to_columns()
    assert columns["population"][:3] == ["sparse"] * 3
    assert columns["sparse_kind"][0] == "layer_I"
    assert columns["sparse_kind"][-1] == "white_matter"
    assert columns["sparse_kind"][15] == "none"


def test_size_populations():
    classes = size_populations([50.0, 55.0, 60.0, 300.0, 320.0])
    assert classes.tolist() == [SizeClass.SMALLER] * 3 + [SizeClass.LARGER] * 2
    assert SizeClass.LARGER.label == "larger"


def test_nni_zscore():
    np.testing.assert_allclose(nni_zscore(np.array([1.0, 0.5]), 100), [0.0, -9.5653], rtol=1e-4)
