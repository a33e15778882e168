"""The BiTransGCN network: GCN spatial encoder, attention temporal encoder, one-step head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from ..attention import AttentionParams, EncoderLayer, encode_sequence, glorot, multi_head
from ..graph import GcnLayer, NormalizedAdjacency, SpatialGraph, gcn_forward, normalize_symmetric
from ..tensor import (
    Parameter,
    ShapeError,
    Tensor,
    add_bias,
    dropout,
    matmul,
    permute,
    reshape,
    scale,
    tile,
)


@dataclass
class BiTransGCNConfig:
    """Training and architecture settings.

    The defaults reproduce the reference training setup. ``encoder_layers``,
    ``ff_hidden`` and ``batch_size`` were chosen here.
    """

    dropout: float = 0.05
    learning_rate: float = 1e-4
    hidden: int = 128
    weight_decay: float = 1e-5
    epochs: int = 600
    gcn_layers: int = 2
    n_heads: int = 4
    history_window: int = 12
    seed: int = 0
    encoder_layers: int = 1
    ff_hidden: int = 256
    batch_size: int = 4

    def validate(self) -> "BiTransGCNConfig":
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        for name in ("hidden", "epochs", "gcn_layers", "n_heads", "history_window",
                     "encoder_layers", "ff_hidden", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")
        if self.hidden % self.n_heads:
            raise ValueError(f"hidden={self.hidden} is not divisible by n_heads={self.n_heads}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BiTransGCNConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(types)
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        kw = {k: (float(v) if types[k] == "float" else int(v)) for k, v in d.items()}
        return cls(**kw).validate()


class BiTransGCN:
    """Forecasts one value per node from a window of past weeks.

    Each week's ``(N, C)`` snapshot goes through the GCN layers; the
    resulting per-node sequences are embedded, encoded by bidirectional
    self-attention and read out by a learned query that cross-attends to
    the encoded sequence.
    """

    def __init__(self, config: BiTransGCNConfig, graph: SpatialGraph, in_features: int = 1):
        config.validate()
        self.config = config
        self.graph = graph
        self.norm: NormalizedAdjacency = normalize_symmetric(graph)
        self.in_features = in_features
        rng = np.random.default_rng(config.seed)
        h = config.hidden

        widths = [in_features] + [h] * config.gcn_layers
        self.gcn = [
            GcnLayer(Parameter(glorot(rng, a, b), f"gcn.{i}.weight"), "relu")
            for i, (a, b) in enumerate(zip(widths, widths[1:]))
        ]
        self.embed = Parameter(glorot(rng, h, h), "embed.weight")
        self.embed_bias = Parameter(np.zeros(h), "embed.bias")
        self.encoder = [
            EncoderLayer(h, config.n_heads, config.ff_hidden, rng, f"encoder.{i}")
            for i in range(config.encoder_layers)
        ]
        self.query = Parameter(glorot(rng, 1, h)[0], "decoder.query")
        self.cross = AttentionParams.init(h, config.n_heads, rng, "decoder.attn")
        self.head = Parameter(glorot(rng, h, 1), "head.weight")
        self.head_bias = Parameter(np.zeros(1), "head.bias")

    def parameters(self) -> list[Parameter]:
        params = [layer.weight for layer in self.gcn]
        params += [self.embed, self.embed_bias]
        for layer in self.encoder:
            params += layer.parameters()
        params += [self.query, *self.cross.parameters(), self.head, self.head_bias]
        return params

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        if set(state) != set(named):
            missing = sorted(set(named) ^ set(state))
            raise KeyError(f"parameter sets differ: {missing}")
        for name, values in state.items():
            values = np.asarray(values, dtype=np.float64)
            if values.shape != named[name].shape:
                raise ShapeError(f"{name}: stored shape {values.shape} != model shape {named[name].shape}")
            named[name].data = values.copy()

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Map windows ``x`` of shape ``(B, T, N, C)`` to forecasts of shape ``(B, N)``."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[2] != self.graph.n or x.shape[3] != self.in_features:
            raise ShapeError(
                f"expected windows of shape (B, T, {self.graph.n}, {self.in_features}), got {x.shape}"
            )
        b, t, n, c = x.shape
        h = self.config.hidden
        rate = self.config.dropout

        z = Tensor(x.reshape(b * t, n, c))
        for layer in self.gcn:
            z = dropout(gcn_forward(z, self.norm, layer), rate, rng, training)
        # (B*T, N, H) -> per-node sequences (B*N, T, H)
        z = permute(reshape(z, (b, t, n, h)), (0, 2, 1, 3))
        z = reshape(z, (b * n, t, h))
        # sqrt(d_model) keeps the embedded values on the scale of the positional code
        z = scale(add_bias(matmul(z, self.embed), self.embed_bias), float(np.sqrt(h)))
        z = encode_sequence(z, self.encoder, rate, rng, training)

        q = tile(reshape(self.query, (1, h)), b * n)
        ctx = multi_head(q, self.cross, context=z)
        out = add_bias(matmul(reshape(ctx, (b * n, h)), self.head), self.head_bias)
        return reshape(out, (b, n))


def expected_parameter_count(config: BiTransGCNConfig, in_features: int = 1) -> int:
    """Closed-form parameter count for :class:`BiTransGCN`."""
    h, f = config.hidden, config.ff_hidden
    gcn = in_features * h + (config.gcn_layers - 1) * h * h
    embed = h * h + h
    attn = 4 * h * h  # n heads of three (h x h/n) projections, plus the (h x h) output
    encoder = config.encoder_layers * (attn + h * f + f + f * h + h + 4 * h)
    decoder = h + attn + h + 1
    return gcn + embed + encoder + decoder


def assemble(config: BiTransGCNConfig, graph: SpatialGraph, in_features: int = 1) -> BiTransGCN:
    return BiTransGCN(config, graph, in_features)
