"""Training loop and checkpoint I/O for next-week prediction."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..graph import Node, SpatialGraph
from ..tensor import Parameter, Tape, mse
from .flowtensor import FlowTensor
from .model import BiTransGCN, BiTransGCNConfig

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class DataError(ValueError):
    """Input data cannot support the requested operation."""


class FingerprintError(ValueError):
    """History does not belong to the graph a checkpoint was trained on."""


@dataclass
class SplitPlan:
    """Chronological split of the forecastable target weeks."""

    window: int
    targets: np.ndarray  # week indices that have a full history window
    n_train: int

    @property
    def train_targets(self) -> np.ndarray:
        return self.targets[: self.n_train]

    @property
    def test_targets(self) -> np.ndarray:
        return self.targets[self.n_train:]


def plan_split(n_weeks: int, window: int, split_ratio: float) -> SplitPlan:
    if not 0.0 < split_ratio < 1.0:
        raise ValueError(f"split_ratio must lie in (0, 1), got {split_ratio}")
    if n_weeks <= window + 1:
        raise DataError(
            f"need at least {window + 2} weeks for a {window}-week history window, got {n_weeks}"
        )
    targets = np.arange(window, n_weeks)
    # round first so 0.8 * 50 is not pushed to 41 by representation error
    n_train = min(math.ceil(round(split_ratio * len(targets), 9)), len(targets) - 1)
    return SplitPlan(window, targets, max(n_train, 1))


@dataclass
class Checkpoint:
    config: BiTransGCNConfig
    state: dict[str, np.ndarray]
    graph: SpatialGraph
    feature_names: list[str]
    norm_min: np.ndarray  # (N, C)
    norm_max: np.ndarray  # (N, C)
    n_train: int = 0
    loss_curve: list[float] = field(default_factory=list)
    _model: BiTransGCN | None = field(default=None, repr=False, compare=False)

    @property
    def fingerprint(self) -> str:
        return self.graph.fingerprint()

    def model(self) -> BiTransGCN:
        if self._model is None:
            m = BiTransGCN(self.config, self.graph, len(self.feature_names))
            m.load_state(self.state)
            self._model = m
        return self._model

    def normalize(self, values: np.ndarray) -> np.ndarray:
        """Scale ``(N, C, T)`` values by the stored per-node min/max."""
        lo, span = self.norm_min[:, :, None], (self.norm_max - self.norm_min)[:, :, None]
        return (values - lo) / np.where(span > 0, span, 1.0)

    def denormalize(self, y: np.ndarray) -> np.ndarray:
        """Invert normalization of target (feature 0) forecasts shaped ``(..., N)``."""
        span = self.norm_max[:, 0] - self.norm_min[:, 0]
        return y * np.where(span > 0, span, 1.0) + self.norm_min[:, 0]


def _windows(norm_values: np.ndarray, targets, window: int) -> np.ndarray:
    """Stack inputs shaped ``(B, T, N, C)`` for each target week index."""
    return np.stack([norm_values[:, :, t - window:t].transpose(2, 0, 1) for t in targets])


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: list[Parameter], lr: float, weight_decay: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.wd = lr, weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.wd * p.data
            p.data = p.data - self.lr * update


def _minmax(values: np.ndarray, upto: int) -> tuple[np.ndarray, np.ndarray]:
    seen = values[:, :, : upto + 1]
    return seen.min(axis=2), seen.max(axis=2)


def train(
    model: BiTransGCN,
    data: FlowTensor,
    split_ratio: float = 0.8,
    progress_every: int = 0,
) -> Checkpoint:
    """Fit ``model`` on chronologically earliest windows of ``data``.

    Normalization statistics use only weeks up to the last training target,
    so the held-out weeks never leak into scaling.
    """
    cfg = model.config
    if data.node_ids != model.graph.ids:
        raise FingerprintError("flow tensor node order differs from the model graph")
    if data.n_features != model.in_features:
        raise DataError(f"model expects {model.in_features} features, data has {data.n_features}")
    plan = plan_split(data.n_weeks, cfg.history_window, split_ratio)
    lo, hi = _minmax(data.values, int(plan.train_targets[-1]))
    ckpt = Checkpoint(cfg, {}, model.graph, list(data.feature_names), lo, hi, plan.n_train)
    norm = ckpt.normalize(data.values)

    x_all = _windows(norm, plan.train_targets, cfg.history_window)
    y_all = norm[:, 0, plan.train_targets].T  # (B, N)

    params = model.parameters()
    opt = AdamW(params, cfg.learning_rate, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 1)
    n = len(x_all)
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            with Tape() as tape:
                loss = mse(model.forward(x_all[idx], training=True, rng=rng), y_all[idx])
            tape.backward(loss)
            opt.step()
            total += float(loss.data) * len(idx)
        curve.append(total / n)
        if progress_every and (epoch + 1) % progress_every == 0:
            log.info("epoch %d mse %.6g", epoch + 1, curve[-1])

    ckpt.state = model.state()
    ckpt.loss_curve = curve
    ckpt._model = None
    return ckpt


def _check_history(ckpt: Checkpoint, history: FlowTensor) -> None:
    if history.node_ids != ckpt.graph.ids:
        raise FingerprintError(
            "history node order does not match the checkpoint graph "
            f"(fingerprint {ckpt.fingerprint[:12]})"
        )
    if history.feature_names != ckpt.feature_names:
        raise FingerprintError("history features do not match the checkpoint")


def predict_windows(ckpt: Checkpoint, data: FlowTensor, targets) -> np.ndarray:
    """Forecasts shaped ``(len(targets), N)`` in original units, clamped at zero."""
    _check_history(ckpt, data)
    w = ckpt.config.history_window
    targets = list(targets)
    if min(targets) < w:
        raise DataError(f"each target needs {w} preceding weeks")
    x = _windows(ckpt.normalize(data.values), targets, w)
    y = ckpt.model().forward(x, training=False).data
    return np.maximum(ckpt.denormalize(y), 0.0)


def predict_next(ckpt: Checkpoint, history: FlowTensor) -> np.ndarray:
    """Forecast the week after the last one in ``history`` for every node."""
    _check_history(ckpt, history)
    w = ckpt.config.history_window
    if history.n_weeks < w:
        raise DataError(f"history has {history.n_weeks} weeks; the model needs {w}")
    return predict_windows(ckpt, history, [history.n_weeks])[0]


def historical_average(data: FlowTensor, targets, feature: int = 0) -> np.ndarray:
    """Baseline: each node's mean over all weeks before the target week."""
    v = data.values[:, feature, :]
    return np.stack([v[:, :t].mean(axis=1) for t in targets])


# ---------------------------------------------------------------------------
# Checkpoint file
#
# A "key = value" header, then bracketed sections. Floats are written with
# 17 significant digits so they parse back to the identical double.


def _fmt(values) -> str:
    return " ".join(f"{v:.17g}" for v in np.asarray(values, dtype=np.float64).reshape(-1))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    for nid in ckpt.graph.ids + ckpt.feature_names:
        if not nid or any(ch.isspace() for ch in nid):
            raise ValueError(f"identifier {nid!r} cannot be stored (contains whitespace)")
    lines = [f"format_version = {CHECKPOINT_VERSION}"]
    for key, value in ckpt.config.to_dict().items():
        lines.append(f"config.{key} = {value!r}")
    lines.append(f"graph_fingerprint = {ckpt.fingerprint}")
    lines.append(f"feature_names = {' '.join(ckpt.feature_names)}")
    lines.append(f"n_train = {ckpt.n_train}")
    lines.append("[nodes]")
    for nd in ckpt.graph.nodes:
        lines.append(f"{nd.id} {nd.latitude:.17g} {nd.longitude:.17g}")
    lines.append("[edges]")
    for (i, j), w in sorted(ckpt.graph.edges.items()):
        lines.append(f"{i} {j} {w:.17g}")
    lines.append("[norm_min]")
    lines.append(_fmt(ckpt.norm_min))
    lines.append("[norm_max]")
    lines.append(_fmt(ckpt.norm_max))
    lines.append("[loss_curve]")
    lines.append(_fmt(ckpt.loss_curve))
    for name, values in ckpt.state.items():
        lines.append(f"[parameter {name}]")
        lines.append("shape = " + " ".join(str(s) for s in values.shape))
        lines.append(_fmt(values))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> Checkpoint:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    header: dict[str, str] = {}
    sections: dict[str, list[str]] = {}
    current = None
    for line in text:
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
        elif current is None:
            if line.strip():
                key, _, value = line.partition("=")
                header[key.strip()] = value.strip()
        else:
            sections[current].append(line)
    if int(header.get("format_version", -1)) != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format")

    config = BiTransGCNConfig.from_dict(
        {k[len("config."):]: v for k, v in header.items() if k.startswith("config.")}
    )
    nodes = []
    for line in sections["nodes"]:
        nid, lat, lon = line.split()
        nodes.append(Node(nid, float(lat), float(lon)))
    graph = SpatialGraph(nodes)
    for line in sections["edges"]:
        i, j, w = line.split()
        graph.edges[(int(i), int(j))] = float(w)
    if graph.fingerprint() != header["graph_fingerprint"]:
        raise FingerprintError(f"{path}: stored graph does not match its fingerprint")

    def floats(lines):
        return np.array([float(v) for v in " ".join(lines).split()], dtype=np.float64)

    features = header["feature_names"].split()
    shape = (len(nodes), len(features))
    state = {}
    for name, body in sections.items():
        if name.startswith("parameter "):
            dims = tuple(int(d) for d in body[0].partition("=")[2].split())
            state[name[len("parameter "):]] = floats(body[1:]).reshape(dims)
    return Checkpoint(
        config=config,
        state=state,
        graph=graph,
        feature_names=features,
        norm_min=floats(sections["norm_min"]).reshape(shape),
        norm_max=floats(sections["norm_max"]).reshape(shape),
        n_train=int(header["n_train"]),
        loss_curve=floats(sections["loss_curve"]).tolist(),
    )


def write_loss_curve(ckpt: Checkpoint, path) -> None:
    rows = ["epoch,mse"] + [f"{i + 1},{v:.17g}" for i, v in enumerate(ckpt.loss_curve)]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")
