"""Cluster levels and Moran's I spatial autocorrelation.

Weights are dense ``(n, n)`` arrays wrapped in :class:`SpatialWeights`.
Permutation inference follows the usual ESDA conventions: the pseudo
p-value is ``(m + 1) / (permutations + 1)`` where ``m`` counts simulated
statistics at least as extreme as the observed one, folded to the
smaller tail.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import SpatialGraph, haversine_km

LEVEL_EDGES = np.array([0.175, 0.335, 0.505, 0.675, 0.835])
CLASS_LABELS = ("HH", "LH", "LL", "HL")
NOT_SIGNIFICANT = "NotSignificant"


class StatisticalError(ValueError):
    """The statistic is undefined for the given data."""


@dataclass(frozen=True)
class SpatialWeights:
    matrix: np.ndarray
    row_standardized: bool = False

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("weights must be a square matrix")
        if (m < 0).any():
            raise ValueError("weights must be non-negative")
        if np.any(np.diag(m) != 0):
            raise ValueError("weights must have a zero diagonal")
        object.__setattr__(self, "matrix", m)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def s0(self) -> float:
        return float(self.matrix.sum())

    def standardized(self) -> "SpatialWeights":
        rows = self.matrix.sum(axis=1, keepdims=True)
        m = np.divide(self.matrix, rows, out=np.zeros_like(self.matrix), where=rows > 0)
        return SpatialWeights(m, True)

    def neighbors(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.matrix[i])


def knn_weights(lat, lon, k: int = 4, standardize: bool = True) -> SpatialWeights:
    """Symmetric k-nearest-neighbour weights by great-circle distance."""
    lat, lon = np.asarray(lat, float), np.asarray(lon, float)
    n = lat.size
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < n, got k={k}, n={n}")
    d = haversine_km(lat[:, None], lon[:, None], lat[None, :], lon[None, :])
    np.fill_diagonal(d, np.inf)
    m = np.zeros((n, n))
    for i in range(n):
        m[i, np.argsort(d[i], kind="stable")[:k]] = 1.0
    m = np.maximum(m, m.T)
    w = SpatialWeights(m)
    return w.standardized() if standardize else w


def rook_grid(nrows: int, ncols: int, standardize: bool = True) -> SpatialWeights:
    """Rook contiguity on a row-major ``nrows x ncols`` lattice."""
    n = nrows * ncols
    m = np.zeros((n, n))
    for r in range(nrows):
        for c in range(ncols):
            i = r * ncols + c
            if c + 1 < ncols:
                m[i, i + 1] = m[i + 1, i] = 1.0
            if r + 1 < nrows:
                m[i, i + ncols] = m[i + ncols, i] = 1.0
    w = SpatialWeights(m)
    return w.standardized() if standardize else w


def graph_weights(graph: SpatialGraph, standardize: bool = True) -> SpatialWeights:
    w = SpatialWeights(graph.adjacency())
    return w.standardized() if standardize else w


# ---------------------------------------------------------------------------
# Levels and K-means


def level_of(normalized) -> np.ndarray:
    """Level 1..6 for values already scaled to [0, 1]."""
    v = np.asarray(normalized, dtype=np.float64)
    return np.searchsorted(LEVEL_EDGES, v, side="right") + 1


@dataclass
class LevelBinning:
    normalized: np.ndarray
    levels: np.ndarray
    constant: bool = False


def level_bins(values) -> LevelBinning:
    """Min-max scale ``values`` to [0, 1] and assign six cluster levels.

    Constant input maps every unit to level 1 and sets ``constant``.
    """
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("no values to bin")
    if not np.isfinite(v).all():
        raise ValueError("values must be finite")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return LevelBinning(np.zeros_like(v), np.ones(v.size, dtype=int), True)
    norm = (v - lo) / (hi - lo)
    return LevelBinning(norm, level_of(norm))


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_history: list[float] = field(default_factory=list)
    n_iter: int = 0


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total == 0:
            idx = rng.integers(len(x))
        else:
            idx = rng.choice(len(x), p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int) -> KMeansResult:
    history = []
    labels = None
    for it in range(1, max_iter + 1):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = d2.argmin(axis=1)
        history.append(float(d2[np.arange(len(x)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(len(centers)):
            members = x[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                # refill an empty cluster with the worst-fitted point
                far = d2[np.arange(len(x)), labels].argmax()
                centers[j] = x[far]
    final = ((x - centers[labels]) ** 2).sum()
    return KMeansResult(labels, centers, float(final), history, it)


def kmeans(points, k: int, seed: int = 0, n_init: int = 10, max_iter: int = 300) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeds; the best of ``n_init`` restarts is kept."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if k < 1:
        raise ValueError("k must be positive")
    distinct = len(np.unique(x, axis=0))
    if k > distinct:
        raise ValueError(f"k={k} exceeds the {distinct} distinct points")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        res = _lloyd(x, _kmeans_pp(x, k, rng), max_iter)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


# ---------------------------------------------------------------------------
# Moran's I


@dataclass
class MoranResult:
    statistic: float
    expectation: float
    z_score: float
    pseudo_p: float
    simulated: np.ndarray = field(repr=False, default=None)
    local: np.ndarray | None = None
    local_p: np.ndarray | None = None
    classes: list[str] | None = None


def _zscores(v: np.ndarray, name: str) -> np.ndarray:
    z = v - v.mean()
    if not np.any(z):
        raise StatisticalError(f"constant attribute: {name} has zero variance")
    return z


def _check(x, w: SpatialWeights, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if v.size != w.n:
        raise ValueError(f"{name} has {v.size} values for {w.n} units")
    if v.size < 3:
        raise StatisticalError("Moran's I needs at least 3 units")
    return v


def _folded_p(observed: float, sims: np.ndarray) -> float:
    larger = int((sims >= observed).sum())
    if len(sims) - larger < larger:
        larger = len(sims) - larger
    return (larger + 1.0) / (len(sims) + 1.0)


def _summary(i_obs: float, sims: np.ndarray, n: int) -> MoranResult:
    if len(sims) == 0:
        return MoranResult(i_obs, -1.0 / (n - 1), float("nan"), 1.0, sims)
    sd = sims.std()
    z = (i_obs - sims.mean()) / sd if sd > 0 else 0.0
    return MoranResult(i_obs, -1.0 / (n - 1), float(z), _folded_p(i_obs, sims), sims)


def _bivariate_stat(zx, zy, w: np.ndarray, s0: float) -> float:
    n = len(zx)
    return float(n / s0 * (zx @ w @ zy) / np.sqrt((zx @ zx) * (zy @ zy)))


def global_moran(x, w: SpatialWeights, permutations: int = 999, seed: int = 0) -> MoranResult:
    """``I = (n / S0) * z'Wz / z'z`` with a random-relabelling test."""
    if permutations < 0:
        raise ValueError("permutations must be non-negative")
    v = _check(x, w, "x")
    z = _zscores(v, "x")
    s0 = w.s0
    n = len(v)
    i_obs = float(n / s0 * (z @ w.matrix @ z) / (z @ z))
    rng = np.random.default_rng(seed)
    sims = np.empty(permutations)
    for p in range(permutations):
        zp = z[rng.permutation(n)]
        sims[p] = n / s0 * (zp @ w.matrix @ zp) / (z @ z)
    return _summary(i_obs, sims, n)


def bivariate_moran(x, y, w: SpatialWeights, permutations: int = 999, seed: int = 0) -> MoranResult:
    """Correlation of ``x`` with the spatial lag of ``y``; the test shuffles ``y`` only."""
    if permutations < 0:
        raise ValueError("permutations must be non-negative")
    zx = _zscores(_check(x, w, "x"), "x")
    zy = _zscores(_check(y, w, "y"), "y")
    s0 = w.s0
    i_obs = _bivariate_stat(zx, zy, w.matrix, s0)
    rng = np.random.default_rng(seed)
    n = len(zx)
    sims = np.array([_bivariate_stat(zx, zy[rng.permutation(n)], w.matrix, s0)
                     for _ in range(permutations)])
    return _summary(i_obs, sims, n)


def local_bivariate_moran(
    x, y, w: SpatialWeights, permutations: int = 999, alpha: float = 0.05, seed: int = 0
) -> MoranResult:
    """Per-unit ``I_i = zx_i * sum_j w_ij zy_j`` with conditional permutation.

    Values are standardized by their population standard deviation, so
    ``mean(local) == I * S0 / n`` for the matching global statistic. Each
    unit keeps its own ``x`` while its neighbours' ``y`` values are drawn
    from the other units. Significant units are classed by the signs of
    ``zx_i`` and the lag: HH, LL, HL (high x, low lag) or LH.
    """
    vx, vy = _check(x, w, "x"), _check(y, w, "y")
    zx = _zscores(vx, "x")
    zy = _zscores(vy, "y")
    zx = zx / np.sqrt((zx @ zx) / len(zx))
    zy = zy / np.sqrt((zy @ zy) / len(zy))
    m = w.matrix
    lag = m @ zy
    local = zx * lag
    n = len(zx)
    rng = np.random.default_rng(seed)
    pvals = np.ones(n)
    for i in range(n):
        nbrs = np.flatnonzero(m[i])
        k = len(nbrs)
        if k == 0:
            continue
        others = np.delete(np.arange(n), i)
        draws = others[rng.random((permutations, n - 1)).argsort(axis=1)[:, :k]]
        sims = zx[i] * (zy[draws] @ m[i, nbrs])
        pvals[i] = _folded_p(local[i], sims)
    classes = []
    for i in range(n):
        if pvals[i] > alpha:
            classes.append(NOT_SIGNIFICANT)
        elif zx[i] > 0:
            classes.append("HH" if lag[i] > 0 else "HL")
        else:
            classes.append("LH" if lag[i] > 0 else "LL")
    result = bivariate_moran(vx, vy, w, permutations, seed)
    result.local, result.local_p, result.classes = local, pvals, classes
    return result
