"""GeoShapley attribution for black-box predictors.

The location columns of an instance move together as one player, ``GEO``,
so a model with ``p`` features of which ``g`` are coordinates becomes a
``q = p - g + 1`` player game. A prediction is split as::

    prediction = phi_0 + phi_geo + sum(phi_j) + sum(phi_geo_j)

``phi_geo_j`` is the Shapley interaction index between GEO and feature
``j``. Half of each interaction is taken out of the plain Shapley values of
GEO and of ``j`` respectively, so the four parts add up exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

PredictFunction = Callable[[np.ndarray], np.ndarray]

MAX_EXACT_PLAYERS = 20


class CapacityError(ValueError):
    """Too many players for exact enumeration."""


class EstimationError(ValueError):
    """The sampled kernel regression is not identifiable."""


@dataclass(frozen=True)
class FeatureSchema:
    names: tuple[str, ...]
    geo: tuple[int, ...]

    def __init__(self, names: Sequence[str], geo: Sequence[int]):
        names, geo = tuple(names), tuple(int(i) for i in geo)
        if len(set(names)) != len(names):
            raise ValueError("feature names must be unique")
        if not geo:
            raise ValueError("at least one location column is required")
        if len(set(geo)) != len(geo) or not all(0 <= i < len(names) for i in geo):
            raise ValueError(f"geo indices {geo} are invalid for {len(names)} features")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "geo", geo)

    @property
    def p(self) -> int:
        return len(self.names)

    @property
    def nongeo(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.p) if i not in self.geo)

    @property
    def nongeo_names(self) -> list[str]:
        return [self.names[i] for i in self.nongeo]

    @property
    def q(self) -> int:
        """Number of players: every non-location feature plus GEO."""
        return len(self.nongeo) + 1

    def player_columns(self) -> list[tuple[int, ...]]:
        """Columns owned by each player; GEO is the last player."""
        return [(i,) for i in self.nongeo] + [self.geo]


@dataclass
class GeoShapleyDecomposition:
    phi_0: float
    phi_geo: float
    phi: np.ndarray  # per non-geo feature
    phi_geo_x: np.ndarray  # GEO x feature interactions
    prediction: float
    feature_names: list[str] = field(default_factory=list)

    def total(self) -> float:
        return self.phi_0 + self.phi_geo + float(self.phi.sum()) + float(self.phi_geo_x.sum())

    def components(self) -> dict[str, float]:
        out = {"GEO": self.phi_geo}
        out.update({name: float(v) for name, v in zip(self.feature_names, self.phi)})
        out.update({f"GEO x {name}": float(v) for name, v in zip(self.feature_names, self.phi_geo_x)})
        return out


def make_background(x, max_rows: int = 100, seed: int = 0) -> np.ndarray:
    """Use ``x`` as background data, subsampled without replacement if large."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("background must be a non-empty 2-D array")
    if len(x) <= max_rows:
        return x.copy()
    idx = np.sort(np.random.default_rng(seed).choice(len(x), size=max_rows, replace=False))
    return x[idx]


def _prepare(instance, schema: FeatureSchema, background) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(instance, dtype=np.float64).reshape(-1)
    bg = np.asarray(background, dtype=np.float64)
    if bg.ndim == 1:
        bg = bg[None, :]
    if x.size != schema.p or bg.ndim != 2 or bg.shape[1] != schema.p or len(bg) < 1:
        raise ValueError(
            f"instance {x.shape} / background {bg.shape} do not match the {schema.p}-feature schema"
        )
    return x, bg


class _Game:
    """Coalition values of one instance, evaluated in batches and cached."""

    def __init__(self, f: PredictFunction, x, schema: FeatureSchema, background):
        self.f = f
        self.x, self.bg = _prepare(x, schema, background)
        self.columns = schema.player_columns()
        self.q = schema.q
        self.cache: dict[int, float] = {}

    def values(self, masks) -> np.ndarray:
        masks = [int(m) for m in masks]
        todo = sorted({m for m in masks if m not in self.cache})
        if todo:
            b = len(self.bg)
            rows = np.tile(self.bg, (len(todo), 1))
            for k, mask in enumerate(todo):
                cols = [c for i, cs in enumerate(self.columns) if mask >> i & 1 for c in cs]
                rows[k * b:(k + 1) * b, cols] = self.x[cols]
            preds = np.asarray(self.f(rows), dtype=np.float64).reshape(-1)
            if preds.size != len(rows):
                raise ValueError("predict function returned the wrong number of outputs")
            for k, mask in enumerate(todo):
                self.cache[mask] = float(preds[k * b:(k + 1) * b].mean())
        return np.array([self.cache[m] for m in masks])


def coalition_value(f: PredictFunction, instance, coalition: Sequence[int],
                    schema: FeatureSchema, background) -> float:
    """Mean prediction with the players in ``coalition`` fixed to ``instance``.

    Players are numbered ``0 .. q-2`` for the non-location features in
    schema order and ``q-1`` for GEO.
    """
    mask = 0
    for i in coalition:
        if not 0 <= i < schema.q:
            raise ValueError(f"player {i} out of range for {schema.q} players")
        mask |= 1 << i
    return float(_Game(f, instance, schema, background).values([mask])[0])


def _shapley_weights(n: int) -> np.ndarray:
    """``s! (n - s - 1)! / n!`` for s = 0 .. n-1."""
    return np.array([math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n) for s in range(n)])


def _assemble(v0, vfull, psi, inter, names) -> GeoShapleyDecomposition:
    psi = np.asarray(psi, dtype=np.float64)
    inter = np.asarray(inter, dtype=np.float64)
    phi = psi[:-1] - 0.5 * inter
    phi_geo = psi[-1] - 0.5 * inter.sum()
    return GeoShapleyDecomposition(float(v0), float(phi_geo), phi, inter, float(vfull), list(names))


def geoshapley_exact(f: PredictFunction, instance, schema: FeatureSchema, background) -> GeoShapleyDecomposition:
    """Decompose ``f(instance)`` by enumerating all ``2**q`` coalitions."""
    q = schema.q
    if q > MAX_EXACT_PLAYERS:
        raise CapacityError(f"{q} players exceed exact enumeration (max {MAX_EXACT_PLAYERS}); use geoshapley_kernel")
    game = _Game(f, instance, schema, background)
    masks = np.arange(1 << q)
    v = game.values(masks)
    sizes = np.array([bin(m).count("1") for m in masks])
    geo = q - 1

    w = _shapley_weights(q)
    psi = np.empty(q)
    for i in range(q):
        without = masks[(masks >> i & 1) == 0]
        psi[i] = np.dot(w[sizes[without]], v[without | (1 << i)] - v[without])

    inter = np.empty(q - 1)
    if q > 1:
        wi = _shapley_weights(q - 1)  # s!(q-s-2)!/(q-1)! over coalitions avoiding both players
        for j in range(q - 1):
            rest = masks[((masks >> j & 1) == 0) & ((masks >> geo & 1) == 0)]
            gbit, jbit = 1 << geo, 1 << j
            delta = v[rest | gbit | jbit] - v[rest | gbit] - v[rest | jbit] + v[rest]
            inter[j] = np.dot(wi[sizes[rest]], delta)
    out = _assemble(v[0], v[-1], psi, inter, schema.nongeo_names)
    gap = abs(out.total() - out.prediction)
    if gap > 1e-9 * max(1.0, abs(out.prediction)):
        raise ArithmeticError(f"decomposition misses the prediction by {gap:g}")
    return out


def _kernel_weight(m: int, s: int) -> float:
    return (m - 1) / (math.comb(m, s) * s * (m - s))


def _kernel_solve(value: Callable[[list[int]], np.ndarray], players: list[int],
                  samples: int, rng: np.random.Generator) -> np.ndarray:
    """Constrained weighted least squares for the Shapley values of ``players``.

    ``value`` maps bitmasks (built from the bits in ``players``) to
    coalition values. When ``samples`` covers every proper coalition the
    full enumeration is used with exact kernel weights.
    """
    m = len(players)
    full = sum(1 << b for b in players)
    v0, vfull = value([0, full])
    if m == 1:
        return np.array([vfull - v0])
    n_proper = (1 << m) - 2
    if samples >= n_proper:
        codes = np.arange(1, (1 << m) - 1)
        z = ((codes[:, None] >> np.arange(m)) & 1).astype(float)
        weights = np.array([_kernel_weight(m, int(k)) for k in z.sum(axis=1)])
    else:
        sizes = np.arange(1, m)
        p_size = np.array([(m - 1) / (s * (m - s)) for s in sizes])
        p_size /= p_size.sum()
        counts: dict[tuple, int] = {}
        for s in rng.choice(sizes, size=samples, p=p_size):
            members = np.zeros(m, dtype=int)
            members[rng.choice(m, size=int(s), replace=False)] = 1
            key = tuple(members)
            counts[key] = counts.get(key, 0) + 1
        keys = sorted(counts)
        z = np.array(keys, dtype=float)
        weights = np.array([counts[k] for k in keys], dtype=float)
    masks = [sum(1 << players[b] for b in range(m) if row[b]) for row in z.astype(int)]
    y = value(masks) - v0
    delta = vfull - v0
    # eliminate the last player through the efficiency constraint
    a = z[:, :-1] - z[:, -1:]
    rhs = y - z[:, -1] * delta
    sw = np.sqrt(weights)
    a_w, r_w = a * sw[:, None], rhs * sw
    if np.linalg.matrix_rank(a_w) < m - 1:
        raise EstimationError("sampled coalitions do not identify every player; draw more samples")
    head, *_ = np.linalg.lstsq(a_w, r_w, rcond=None)
    return np.append(head, delta - head.sum())


def geoshapley_kernel(f: PredictFunction, instance, schema: FeatureSchema, background,
                      samples: int = 512, seed: int = 0) -> GeoShapleyDecomposition:
    """Kernel-SHAP style estimate of the GeoShapley decomposition.

    Shapley values come from one constrained regression over the full game.
    Each GEO interaction is the change in a feature's Shapley value when
    GEO is switched from absent to present, estimated by two further
    regressions over the non-location players.
    """
    q = schema.q
    if samples < 2 * q:
        raise ValueError(f"need at least {2 * q} samples for {q} players")
    rng = np.random.default_rng(seed)
    game = _Game(f, instance, schema, background)
    geo_bit = 1 << (q - 1)
    everyone = list(range(q))
    psi = _kernel_solve(game.values, everyone, samples, rng)
    if q > 1:
        others = list(range(q - 1))
        with_geo = _kernel_solve(lambda ms: game.values([m | geo_bit for m in ms]), others, samples, rng)
        without = _kernel_solve(game.values, others, samples, rng)
        inter = with_geo - without
    else:
        inter = np.zeros(0)
    v0, vfull = game.values([0, (1 << q) - 1])
    return _assemble(v0, vfull, psi, inter, schema.nongeo_names)


def explain(f: PredictFunction, x, schema: FeatureSchema, background, method: str = "exact",
            **kwargs) -> list[GeoShapleyDecomposition]:
    """Decompose every row of ``x``."""
    fn = {"exact": geoshapley_exact, "kernel": geoshapley_kernel}[method]
    return [fn(f, row, schema, background, **kwargs) for row in np.asarray(x, dtype=np.float64)]


@dataclass
class ImportanceRow:
    component: str
    mean_abs_value: float
    rank: int


def summarize_importance(decompositions: Sequence[GeoShapleyDecomposition]) -> list[ImportanceRow]:
    """Rank components by mean absolute value across instances.

    Components that are zero for every instance are left out.
    """
    if not decompositions:
        raise ValueError("no decompositions to summarize")
    names = decompositions[0].feature_names
    if any(d.feature_names != names for d in decompositions):
        raise ValueError("decompositions use different feature schemas")
    comps = [d.components() for d in decompositions]
    keys = list(comps[0])
    means = {k: float(np.mean([abs(c[k]) for c in comps])) for k in keys}
    ordered = sorted((k for k in keys if means[k] > 0), key=lambda k: -means[k])
    return [ImportanceRow(k, means[k], r + 1) for r, k in enumerate(ordered)]


class RidgePredictor:
    """Closed-form ridge regression on standardized inputs.

    With ``interactions=True`` every pairwise product of standardized
    columns is added as a feature, which lets the surrogate express
    location-by-feature effects.
    """

    def __init__(self, alpha: float = 1.0, interactions: bool = False):
        self.alpha = float(alpha)
        self.interactions = interactions
        self.mean_ = self.scale_ = self.coef_ = None
        self.intercept_ = 0.0

    def _design(self, x: np.ndarray) -> np.ndarray:
        z = (x - self.mean_) / self.scale_
        if not self.interactions:
            return z
        i, j = np.triu_indices(z.shape[1], k=1)
        return np.hstack([z, z[:, i] * z[:, j]])

    def fit(self, x, y) -> "RidgePredictor":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        self.mean_ = x.mean(axis=0)
        sd = x.std(axis=0)
        self.scale_ = np.where(sd > 0, sd, 1.0)
        d = self._design(x)
        dm = d.mean(axis=0)
        dc = d - dm
        ym = y.mean()
        gram = dc.T @ dc + self.alpha * np.eye(d.shape[1])
        self.coef_ = np.linalg.solve(gram, dc.T @ (y - ym))
        self.intercept_ = float(ym - dm @ self.coef_)
        return self

    def predict(self, x) -> np.ndarray:
        if self.coef_ is None:
            raise RuntimeError("predictor is not fitted")
        x = np.asarray(x, dtype=np.float64)
        return self._design(np.atleast_2d(x)) @ self.coef_ + self.intercept_

    __call__ = predict
