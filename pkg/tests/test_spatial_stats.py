import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from visitflow.spatial_stats import (
    NOT_SIGNIFICANT,
    SpatialWeights,
    StatisticalError,
    bivariate_moran,
    global_moran,
    kmeans,
    knn_weights,
    level_bins,
    level_of,
    local_bivariate_moran,
    rook_grid,
)


def brute_moran(x, w):
    n = len(x)
    xbar = sum(x) / n
    num = sum(w[i][j] * (x[i] - xbar) * (x[j] - xbar) for i in range(n) for j in range(n))
    den = sum((xi - xbar) ** 2 for xi in x)
    s0 = sum(sum(row) for row in w)
    return n / s0 * num / den


def loop_bivariate(x, y, w):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    num = 0.0
    for i in range(n):
        for j in range(n):
            num += w[i][j] * (x[i] - mx) * (y[j] - my)
    sx = sum((v - mx) ** 2 for v in x)
    sy = sum((v - my) ** 2 for v in y)
    s0 = sum(w[i][j] for i in range(n) for j in range(n))
    return n / s0 * num / np.sqrt(sx * sy)


def hot_spot_field():
    field = np.zeros((9, 9))
    field[3:6, 3:6] = 10.0
    return field.reshape(-1)


# --- weights ----------------------------------------------------------------------


def test_rook_grid_neighbours():
    w = rook_grid(3, 3, standardize=False)
    assert list(w.neighbors(4)) == [1, 3, 5, 7]
    assert list(w.neighbors(0)) == [1, 3]
    np.testing.assert_allclose(rook_grid(3, 3).matrix.sum(axis=1), 1.0)


def test_weights_validation():
    with pytest.raises(ValueError):
        SpatialWeights(np.eye(3))
    with pytest.raises(ValueError):
        SpatialWeights(-np.ones((2, 2)) + np.eye(2))


def test_knn_weights_symmetric_before_standardizing():
    rng = np.random.default_rng(0)
    w = knn_weights(rng.uniform(30, 40, 12), rng.uniform(-100, -90, 12), k=4, standardize=False)
    assert np.array_equal(w.matrix, w.matrix.T)
    assert (w.matrix.sum(axis=1) >= 4).all()


# --- global and bivariate Moran ------------------------------------------------------


def test_checkerboard_is_perfectly_negative():
    res = global_moran([1.0, -1.0, -1.0, 1.0], rook_grid(2, 2), permutations=99)
    assert abs(res.statistic + 1.0) < 1e-12
    assert brute_moran([1, -1, -1, 1], rook_grid(2, 2).matrix.tolist()) == pytest.approx(-1.0, abs=1e-12)


def test_two_components_maximal_among_permutations():
    # two disconnected triangles: values equal within each component
    m = np.zeros((6, 6))
    for a, b in [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)]:
        m[a, b] = m[b, a] = 1.0
    w = SpatialWeights(m).standardized()
    x = np.array([1.0, 1.0, 1.0, 5.0, 5.0, 5.0])
    res = global_moran(x, w, permutations=199)
    assert res.statistic > 0
    for perm in itertools.permutations(range(6)):
        assert brute_moran(list(x[list(perm)]), w.matrix.tolist()) <= res.statistic + 1e-12


def test_expectation_closed_form():
    res = global_moran([1.0, 3.0, 2.0, 5.0, 4.0], rook_grid(1, 5), permutations=9)
    assert res.expectation == -0.25


def test_constant_attribute_is_rejected():
    with pytest.raises(StatisticalError, match="constant attribute"):
        global_moran(np.ones(4), rook_grid(2, 2))
    with pytest.raises(StatisticalError):
        bivariate_moran(np.arange(4.0), np.ones(4), rook_grid(2, 2))


def test_moran_needs_three_units():
    with pytest.raises(StatisticalError):
        global_moran([1.0, 2.0], rook_grid(1, 2))


def test_bivariate_self_and_negation():
    rng = np.random.default_rng(1)
    x = rng.normal(size=16)
    w = rook_grid(4, 4)
    i_xx = bivariate_moran(x, x, w, permutations=9).statistic
    assert i_xx == pytest.approx(global_moran(x, w, permutations=9).statistic, abs=1e-14)
    assert bivariate_moran(x, -x, w, permutations=9).statistic == pytest.approx(-i_xx, abs=1e-14)


def test_bivariate_against_double_loop():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=9), rng.normal(size=9)
    for w in (rook_grid(3, 3), rook_grid(3, 3, standardize=False)):
        got = bivariate_moran(x, y, w, permutations=9).statistic
        assert abs(got - loop_bivariate(list(x), list(y), w.matrix.tolist())) < 1e-12


def test_pseudo_p_range_and_determinism():
    rng = np.random.default_rng(3)
    x = rng.normal(size=25)
    a = global_moran(x, rook_grid(5, 5), permutations=99, seed=4)
    b = global_moran(x, rook_grid(5, 5), permutations=99, seed=4)
    assert 0 < a.pseudo_p <= 1
    assert a.pseudo_p == b.pseudo_p and np.array_equal(a.simulated, b.simulated)


def test_clustered_field_is_significant():
    res = global_moran(hot_spot_field(), rook_grid(9, 9), permutations=999)
    assert res.statistic > 0 and res.pseudo_p == 0.001 and res.z_score > 3


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 100), st.floats(-100, 100), st.booleans())
def test_affine_invariance(seed, a, b, flip):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=16)
    a = -a if flip else a
    w = rook_grid(4, 4)
    i1 = global_moran(x, w, permutations=0).statistic
    i2 = global_moran(a * x + b, w, permutations=0).statistic
    assert abs(i1 - i2) < 1e-10


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 5), st.integers(2, 5))
def test_row_standardized_bounds(seed, rows, cols):
    x = np.random.default_rng(seed).normal(size=rows * cols)
    if rows * cols < 3:
        return
    assert abs(global_moran(x, rook_grid(rows, cols), permutations=0).statistic) <= 1 + 1e-9


# --- local bivariate Moran --------------------------------------------------------------


def test_local_values_average_to_global():
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=16), rng.normal(size=16)
    for w in (rook_grid(4, 4), rook_grid(4, 4, standardize=False)):
        res = local_bivariate_moran(x, y, w, permutations=9)
        assert abs(res.local.mean() - res.statistic * w.s0 / w.n) < 1e-10


def test_local_sign_rule_for_hot_spot_centre():
    x = hot_spot_field()
    res = local_bivariate_moran(x, x, rook_grid(9, 9), permutations=999, alpha=0.05, seed=0)
    assert res.classes[4 * 9 + 4] == "HH"
    # the centre and the four edge midpoints have at least three high neighbours
    for r, c in [(4, 4), (3, 4), (5, 4), (4, 3), (4, 5)]:
        assert res.classes[r * 9 + c] == "HH", (r, c)
    high = {r * 9 + c for r in range(3, 6) for c in range(3, 6)}
    assert all(res.classes[i] in ("LL", NOT_SIGNIFICANT, "LH") for i in range(81) if i not in high)


def test_local_is_seed_deterministic():
    x = hot_spot_field()
    a = local_bivariate_moran(x, x, rook_grid(9, 9), permutations=199, seed=3)
    b = local_bivariate_moran(x, x, rook_grid(9, 9), permutations=199, seed=3)
    assert a.classes == b.classes and np.array_equal(a.local_p, b.local_p)


def test_alpha_zero_marks_nothing_significant():
    x = hot_spot_field()
    res = local_bivariate_moran(x, x, rook_grid(9, 9), permutations=99, alpha=0.0)
    assert set(res.classes) == {NOT_SIGNIFICANT}


def test_global_results_have_no_classes():
    res = bivariate_moran(np.arange(9.0), np.arange(9.0)[::-1], rook_grid(3, 3), permutations=9)
    assert res.classes is None and res.local is None


def test_low_low_and_mixed_classes():
    # high western band, low eastern band, middling centre: both bands are minorities
    field = np.full((7, 7), 5.0)
    field[:, :2] = 10.0
    field[:, 5:] = 0.0
    x = field.reshape(-1)
    res = local_bivariate_moran(x, x, rook_grid(7, 7), permutations=999, seed=1)
    assert res.classes[3 * 7 + 0] == "HH"
    assert res.classes[3 * 7 + 6] == "LL"
    y = -x
    res = local_bivariate_moran(x, y, rook_grid(7, 7), permutations=999, seed=1)
    assert res.classes[3 * 7 + 0] == "HL"
    assert res.classes[3 * 7 + 6] == "LH"


# --- K-means ---------------------------------------------------------------------------------


def test_kmeans_two_identical_pairs():
    pts = np.array([[0.0, 0.0], [0.0, 0.0], [5.0, 5.0], [5.0, 5.0]])
    res = kmeans(pts, 2, seed=0)
    assert res.inertia == 0.0
    assert res.labels[0] == res.labels[1] != res.labels[2] == res.labels[3]


def test_kmeans_single_cluster_is_mean():
    pts = np.random.default_rng(0).normal(size=(20, 3))
    np.testing.assert_allclose(kmeans(pts, 1).centroids[0], pts.mean(axis=0), atol=1e-14)


def test_kmeans_too_many_clusters():
    with pytest.raises(ValueError):
        kmeans(np.array([[0.0], [0.0], [1.0]]), 3)


def blobs(seed, sigma=0.05, per=20):
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0], [1.5, 0.0], [0.0, 1.5]])
    pts = np.vstack([c + rng.normal(0, sigma, size=(per, 2)) for c in centers])
    return pts, np.repeat(np.arange(3), per)


def best_agreement(labels, truth, k):
    return max(np.mean(np.array(p)[labels] == truth) for p in itertools.permutations(range(k)))


@pytest.mark.parametrize("seed", range(5))
def test_kmeans_recovers_blobs(seed):
    pts, truth = blobs(seed)
    res = kmeans(pts, 3, seed=seed)
    assert best_agreement(res.labels, truth, 3) == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 6), st.integers(8, 40))
def test_kmeans_inertia_never_increases(seed, k, n):
    pts = np.random.default_rng(seed).normal(size=(n, 2))
    res = kmeans(pts, k, seed=seed, n_init=2)
    h = res.inertia_history
    assert all(b <= a + 1e-12 for a, b in zip(h, h[1:]))
    assert res.inertia == pytest.approx(h[-1], abs=1e-9)


def test_kmeans_fixed_order_is_deterministic():
    pts, _ = blobs(1)
    a, b = kmeans(pts, 3, seed=2), kmeans(pts, 3, seed=2)
    assert np.array_equal(a.labels, b.labels) and np.array_equal(a.centroids, b.centroids)


# --- levels ----------------------------------------------------------------------------------


@pytest.mark.parametrize(
    "value, level",
    [(0.10, 1), (0.50, 3), (0.84, 6), (0.0, 1), (1.0, 6), (0.17, 1), (0.18, 2),
     (0.33, 2), (0.34, 3), (0.67, 4), (0.68, 5), (0.83, 5)],
)
def test_level_of_bin_edges(value, level):
    assert level_of(value) == level


def test_level_bins_normalizes_first():
    res = level_bins([10.0, 20.0, 60.0, 110.0])
    np.testing.assert_allclose(res.normalized, [0.0, 0.1, 0.5, 1.0])
    assert list(res.levels) == [1, 1, 3, 6] and not res.constant


def test_level_bins_constant_and_empty():
    res = level_bins([3.0, 3.0])
    assert res.constant and list(res.levels) == [1, 1]
    with pytest.raises(ValueError):
        level_bins([])
    with pytest.raises(ValueError):
        level_bins([1.0, float("nan")])


@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=40))
def test_level_bins_monotone(values):
    res = level_bins(values)
    order = np.argsort(values, kind="stable")
    assert np.all(np.diff(res.levels[order]) >= 0)
    assert set(res.levels) <= set(range(1, 7))
