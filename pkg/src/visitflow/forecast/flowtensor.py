from __future__ import annotations

import datetime as dt
import re
from dataclasses import dataclass, field

import numpy as np

_ISO_WEEK = re.compile(r"^(\d{4})-W(\d{2})$")


def parse_iso_week(label: str) -> tuple[int, int]:
    """``"2022-W07"`` -> ``(2022, 7)``; raises ``ValueError`` on bad labels."""
    m = _ISO_WEEK.match(label.strip())
    if not m:
        raise ValueError(f"not an ISO week label: {label!r}")
    year, week = int(m.group(1)), int(m.group(2))
    dt.date.fromisocalendar(year, week, 1)  # rejects W53 in 52-week years
    return year, week


def iso_weeks(start: str, count: int) -> list[str]:
    """``count`` consecutive ISO week labels beginning at ``start``."""
    year, week = parse_iso_week(start)
    monday = dt.date.fromisocalendar(year, week, 1)
    out = []
    for i in range(count):
        y, w, _ = (monday + dt.timedelta(weeks=i)).isocalendar()
        out.append(f"{y:04d}-W{w:02d}")
    return out


@dataclass
class FlowTensor:
    """Node features over consecutive weeks, shaped ``(N, C, T)``.

    ``coordinates`` optionally holds ``(lat, lon)`` per node.
    """

    values: np.ndarray
    node_ids: list[str]
    feature_names: list[str]
    week_labels: list[str]
    coordinates: np.ndarray | None = None
    sparsity: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"flow values must be N x C x T, got shape {self.values.shape}")
        n, c, t = self.values.shape
        if (len(self.node_ids), len(self.feature_names), len(self.week_labels)) != (n, c, t):
            raise ValueError("label lengths do not match the value array")
        if not np.isfinite(self.values).all() or (self.values < 0).any():
            raise ValueError("flow values must be finite and non-negative")
        keys = [parse_iso_week(w) for w in self.week_labels]
        if any(a >= b for a, b in zip(keys, keys[1:])):
            raise ValueError("week labels must be strictly increasing")
        if self.coordinates is not None:
            self.coordinates = np.asarray(self.coordinates, dtype=np.float64)
            if self.coordinates.shape != (n, 2):
                raise ValueError("coordinates must have shape (N, 2)")

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    @property
    def n_weeks(self) -> int:
        return self.values.shape[2]

    def window(self, stop: int, length: int) -> "FlowTensor":
        """The ``length`` weeks ending just before index ``stop``."""
        if length > stop or stop > self.n_weeks:
            raise ValueError(f"cannot take {length} weeks ending before index {stop}")
        return FlowTensor(
            self.values[:, :, stop - length:stop],
            list(self.node_ids),
            list(self.feature_names),
            self.week_labels[stop - length:stop],
            self.coordinates,
        )

    def total(self, feature: int = 0) -> float:
        return float(self.values[:, feature, :].sum())
