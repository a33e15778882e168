import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from visitflow.geoshapley import (
    CapacityError,
    FeatureSchema,
    GeoShapleyDecomposition,
    RidgePredictor,
    coalition_value,
    explain,
    geoshapley_exact,
    geoshapley_kernel,
    make_background,
    summarize_importance,
)

SCHEMA_2 = FeatureSchema(["lat", "x1"], geo=[0])


def permutation_shapley(v, q):
    """Average marginal contribution over all q! orderings."""
    phi = np.zeros(q)
    for order in itertools.permutations(range(q)):
        members = 0
        for p in order:
            phi[p] += v(members | 1 << p) - v(members)
            members |= 1 << p
    return phi / math.factorial(q)


def brute_value(f, x, bg, schema, mask):
    cols = [c for i, cs in enumerate(schema.player_columns()) if mask >> i & 1 for c in cs]
    rows = bg.copy()
    rows[:, cols] = x[cols]
    return float(np.mean(f(rows)))


def test_schema_players():
    s = FeatureSchema(["a", "lat", "b", "lon"], geo=[1, 3])
    assert s.q == 3 and s.nongeo_names == ["a", "b"]
    assert s.player_columns() == [(0,), (2,), (1, 3)]
    with pytest.raises(ValueError):
        FeatureSchema(["a", "b"], geo=[])
    with pytest.raises(ValueError):
        FeatureSchema(["a", "b"], geo=[5])


# --- coalition values -----------------------------------------------------------


def test_coalition_value_extremes():
    rng = np.random.default_rng(0)
    bg = rng.normal(size=(7, 2))
    x = np.array([1.5, -0.5])

    def f(z):
        return np.sin(z[:, 0]) * z[:, 1]

    assert coalition_value(f, x, [0, 1], SCHEMA_2, bg) == pytest.approx(float(f(x[None])[0]), abs=1e-15)
    assert coalition_value(f, x, [], SCHEMA_2, bg) == pytest.approx(float(f(bg).mean()), abs=1e-15)


def test_coalition_value_linear_substitution():
    bg = np.array([[2.0, -1.0, 4.0]])
    x = np.array([0.5, 3.0, -2.0])
    schema = FeatureSchema(["a", "lat", "b"], geo=[1])
    coef = np.array([1.5, -2.0, 0.25])

    def f(z):
        return z @ coef + 1.0

    # players: a (0), b (1), GEO (2); coalition {a, GEO} keeps a and lat from x
    expected = 1.0 + 1.5 * 0.5 - 2.0 * 3.0 + 0.25 * 4.0
    assert abs(coalition_value(f, x, [0, 2], schema, bg) - expected) < 1e-12


def test_coalition_value_schema_mismatch():
    with pytest.raises(ValueError):
        coalition_value(lambda z: z[:, 0], [1.0, 2.0, 3.0], [0], SCHEMA_2, np.zeros((1, 2)))
    with pytest.raises(ValueError):
        coalition_value(lambda z: z[:, 0], [1.0, 2.0], [5], SCHEMA_2, np.zeros((1, 2)))


# --- exact decomposition ----------------------------------------------------------


def test_constant_function():
    d = geoshapley_exact(lambda z: np.full(len(z), 4.0), [1.0, 2.0], SCHEMA_2, np.zeros((3, 2)))
    assert d.phi_0 == 4.0 and d.phi_geo == 0.0
    assert np.all(d.phi == 0.0) and np.all(d.phi_geo_x == 0.0)


def test_additive_function():
    d = geoshapley_exact(lambda z: 3 * z[:, 0] + 2 * z[:, 1], [1.0, 1.0], SCHEMA_2, np.zeros((1, 2)))
    assert d.phi_0 == pytest.approx(0.0, abs=1e-15)
    assert d.phi_geo == pytest.approx(3.0, abs=1e-14)
    assert d.phi[0] == pytest.approx(2.0, abs=1e-14)
    assert d.phi_geo_x[0] == pytest.approx(0.0, abs=1e-14)


def test_multiplicative_function():
    d = geoshapley_exact(lambda z: z[:, 0] * z[:, 1], [1.0, 1.0], SCHEMA_2, np.zeros((1, 2)))
    # four coalitions: v(0)=v(GEO)=v(x1)=0, v(all)=1
    assert d.phi_geo_x[0] == pytest.approx(1.0, abs=1e-15)
    assert d.phi_geo == pytest.approx(0.0, abs=1e-15) and d.phi[0] == pytest.approx(0.0, abs=1e-15)
    assert abs(d.total() - 1.0) < 1e-12


def random_poly(rng, p):
    """A random quadratic model with every pairwise product."""
    lin = rng.normal(size=p)
    quad = np.triu(rng.normal(size=(p, p)))

    def f(z):
        return z @ lin + np.einsum("ni,ij,nj->n", z, quad, z)

    return f


def test_matches_permutation_oracle():
    rng = np.random.default_rng(1)
    schema = FeatureSchema(["h", "lat", "e", "lon", "c"], geo=[1, 3])
    f = random_poly(rng, 5)
    x, bg = rng.normal(size=5), rng.normal(size=(6, 5))
    d = geoshapley_exact(f, x, schema, bg)
    q = schema.q

    def v(mask):
        return brute_value(f, x, bg, schema, mask)

    psi = permutation_shapley(v, q)
    geo = q - 1
    inter = []
    for j in range(q - 1):
        # Shapley interaction: average over orderings of the joint marginal effect
        total = 0.0
        others = [p for p in range(q) if p not in (j, geo)]
        for size in range(len(others) + 1):
            for s in itertools.combinations(others, size):
                m = sum(1 << p for p in s)
                w = math.factorial(size) * math.factorial(q - size - 2) / math.factorial(q - 1)
                total += w * (v(m | 1 << j | 1 << geo) - v(m | 1 << geo) - v(m | 1 << j) + v(m))
        inter.append(total)
    inter = np.array(inter)
    np.testing.assert_allclose(d.phi_geo_x, inter, atol=1e-12)
    np.testing.assert_allclose(d.phi, psi[:-1] - inter / 2, atol=1e-12)
    assert d.phi_geo == pytest.approx(psi[-1] - inter.sum() / 2, abs=1e-12)


def test_capacity_limit():
    names = [f"f{i}" for i in range(22)]
    with pytest.raises(CapacityError, match="geoshapley_kernel"):
        geoshapley_exact(lambda z: z[:, 0], np.zeros(22), FeatureSchema(names, [0]), np.zeros((1, 22)))


def test_components_naming():
    d = geoshapley_exact(lambda z: z[:, 0] * z[:, 1], [1.0, 1.0], SCHEMA_2, np.zeros((1, 2)))
    assert list(d.components()) == ["GEO", "x1", "GEO x x1"]


# --- axioms over random ridge models --------------------------------------------------------


def social_schema():
    names = ["health", "education", "crime", "work", "economy", "housing", "lat", "lon"]
    return FeatureSchema(names, geo=[6, 7])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.booleans())
def test_efficiency_on_ridge_models(seed, interactions):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(40, 8))
    y = x @ rng.normal(size=8) + rng.normal(0, 0.1, 40)
    f = RidgePredictor(alpha=0.5, interactions=interactions).fit(x, y)
    bg = make_background(x, 20, seed)
    d = geoshapley_exact(f, x[0], social_schema(), bg)
    assert abs(d.total() - d.prediction) < 1e-12
    assert d.prediction == pytest.approx(float(f(x[:1])[0]), abs=1e-12)


def test_null_player():
    rng = np.random.default_rng(3)
    coef = rng.normal(size=8)
    coef[2] = 0.0  # crime is ignored

    def f(z):
        return z @ coef + z[:, 6] * z[:, 0]

    x, bg = rng.uniform(size=8), rng.uniform(size=(10, 8))
    d = geoshapley_exact(f, x, social_schema(), bg)
    assert abs(d.phi[2]) < 1e-10 and abs(d.phi_geo_x[2]) < 1e-10


def test_symmetry():
    rng = np.random.default_rng(4)

    def f(z):
        return (z[:, 0] + z[:, 1]) ** 2 + z[:, 6] * (z[:, 0] + z[:, 1]) + z[:, 3]

    x = rng.uniform(size=8)
    x[1] = x[0]
    bg = rng.uniform(size=(12, 8))
    bg[:, 1] = bg[:, 0]
    d = geoshapley_exact(f, x, social_schema(), bg)
    assert abs(d.phi[0] - d.phi[1]) < 1e-10
    assert abs(d.phi_geo_x[0] - d.phi_geo_x[1]) < 1e-10


def flat(d: GeoShapleyDecomposition):
    return np.concatenate([[d.phi_0, d.phi_geo], d.phi, d.phi_geo_x])


def test_linearity():
    rng = np.random.default_rng(5)
    x = rng.uniform(size=(30, 8))
    f = RidgePredictor(interactions=True).fit(x, rng.normal(size=30))
    g = RidgePredictor().fit(x, rng.normal(size=30))
    a, b = 2.5, -0.75

    def h(z):
        return a * f(z) + b * g(z)

    bg = x[:10]
    for row in x[10:15]:
        lhs = flat(geoshapley_exact(h, row, social_schema(), bg))
        rhs = a * flat(geoshapley_exact(f, row, social_schema(), bg)) + b * flat(geoshapley_exact(g, row, social_schema(), bg))
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)


# --- kernel estimator ------------------------------------------------------------------------


def test_kernel_matches_exact_at_full_enumeration():
    rng = np.random.default_rng(6)
    schema = FeatureSchema(["a", "b", "lat", "c", "d", "lon"], geo=[2, 5])
    assert schema.q == 5
    f = random_poly(rng, 6)
    x, bg = rng.normal(size=6), rng.normal(size=(8, 6))
    exact = geoshapley_exact(f, x, schema, bg)
    kern = geoshapley_kernel(f, x, schema, bg, samples=2**5)
    np.testing.assert_allclose(flat(kern), flat(exact), atol=1e-8)


def test_kernel_constant_function():
    d = geoshapley_kernel(lambda z: np.full(len(z), 2.0), np.ones(8), social_schema(), np.zeros((3, 8)), samples=64)
    assert d.phi_0 == 2.0
    np.testing.assert_allclose(flat(d)[1:], 0.0, atol=1e-12)


def test_kernel_sampled_is_efficient_and_deterministic():
    rng = np.random.default_rng(7)
    f = random_poly(rng, 8)
    x, bg = rng.normal(size=8), rng.normal(size=(5, 8))
    a = geoshapley_kernel(f, x, social_schema(), bg, samples=40, seed=3)
    b = geoshapley_kernel(f, x, social_schema(), bg, samples=40, seed=3)
    assert np.array_equal(flat(a), flat(b))
    assert abs(a.total() - a.prediction) < 1e-8


def test_kernel_needs_enough_samples():
    with pytest.raises(ValueError):
        geoshapley_kernel(lambda z: z[:, 0], np.ones(8), social_schema(), np.zeros((1, 8)), samples=10)


# --- importance ---------------------------------------------------------------------------------


def test_single_decomposition_importance():
    d = geoshapley_exact(lambda z: -3 * z[:, 0] + 2 * z[:, 1] + z[:, 0] * z[:, 1], [1.0, 1.0], SCHEMA_2,
                         np.zeros((1, 2)))
    rows = summarize_importance([d])
    values = {r.component: r.mean_abs_value for r in rows}
    assert values == {k: abs(v) for k, v in d.components().items()}
    assert [r.rank for r in rows] == [1, 2, 3]


def test_zero_components_are_dropped():
    d = geoshapley_exact(lambda z: np.full(len(z), 1.0), [1.0, 1.0], SCHEMA_2, np.zeros((1, 2)))
    assert summarize_importance([d]) == []


def test_importance_requires_consistent_schema():
    d1 = geoshapley_exact(lambda z: z[:, 1], [1.0, 1.0], SCHEMA_2, np.zeros((1, 2)))
    d2 = geoshapley_exact(lambda z: z[:, 1], [1.0, 1.0], FeatureSchema(["lat", "x2"], [0]), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        summarize_importance([d1, d2])
    with pytest.raises(ValueError):
        summarize_importance([])


def test_geo_dominates_ordering():
    rng = np.random.default_rng(8)
    x = rng.uniform(size=(50, 2))

    def f(z):
        return 5 * z[:, 0] + z[:, 1]

    rows = summarize_importance(explain(f, x, SCHEMA_2, make_background(x, 20)))
    assert [r.component for r in rows][:2] == ["GEO", "x1"]


# --- ridge and background ----------------------------------------------------------------------------


def test_ridge_recovers_linear_model():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(200, 3))
    y = x @ np.array([1.0, -2.0, 0.5]) + 3.0
    f = RidgePredictor(alpha=1e-8).fit(x, y)
    np.testing.assert_allclose(f(x), y, atol=1e-6)
    with pytest.raises(RuntimeError):
        RidgePredictor().predict(x)


def test_background_subsampling():
    x = np.arange(300.0).reshape(150, 2)
    bg = make_background(x, 100, seed=1)
    assert bg.shape == (100, 2)
    assert np.array_equal(bg, make_background(x, 100, seed=1))
    assert np.array_equal(make_background(x[:50], 100), x[:50])
