from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .train import DataError

METRIC_COLUMNS = ("MAE", "RMSE", "R2", "MAPE")


@dataclass
class MetricsReport:
    """Accuracy of one set of forecasts.

    ``r_squared`` is NaN when the truth is constant; ``mape`` skips zero
    truth values and counts them in ``mape_excluded``.
    """

    mae: float
    rmse: float
    r_squared: float
    mape: float
    n: int
    mape_excluded: int = 0
    notes: list[str] = field(default_factory=list)
    residuals: dict[str, float] = field(default_factory=dict)

    def row(self) -> tuple[float, float, float, float]:
        return (self.mae, self.rmse, self.r_squared, self.mape)


def evaluate(predictions, truth) -> MetricsReport:
    pred = np.asarray(predictions, dtype=np.float64).reshape(-1)
    y = np.asarray(truth, dtype=np.float64).reshape(-1)
    if pred.size == 0:
        raise DataError("no predictions to evaluate")
    if pred.shape != y.shape:
        raise DataError(f"{pred.size} predictions for {y.size} truth values")
    err = pred - y
    notes = []
    mae = float(np.mean(np.abs(err)))
    rmse = float(math.sqrt(np.mean(err * err)))
    # RMSE >= MAE holds exactly; clear rounding noise in the last ulp
    rmse = max(rmse, mae)
    sst = float(np.sum((y - y.mean()) ** 2))
    sse = float(np.sum(err * err))
    if sst == 0.0:
        r2 = float("nan")
        notes.append("R2 undefined: truth values are constant")
    else:
        r2 = 1.0 - sse / sst
    nonzero = y != 0
    excluded = int((~nonzero).sum())
    if nonzero.any():
        mape = float(np.mean(np.abs(err[nonzero] / y[nonzero])) * 100.0)
    else:
        mape = float("nan")
        notes.append("MAPE undefined: every truth value is zero")
    if excluded:
        notes.append(f"MAPE excludes {excluded} zero truth value(s)")
    abs_err = np.abs(err)
    residuals = {
        "mean": float(err.mean()),
        "median_abs": float(np.median(abs_err)),
        "max_abs": float(abs_err.max()),
    }
    return MetricsReport(mae, rmse, r2, mape, int(pred.size), excluded, notes, residuals)


def _cell(v: float, pct: bool = False) -> str:
    if math.isnan(v):
        return "n/a"
    return f"{v:.2f}%" if pct else f"{v:.3f}"


def format_metrics_table(rows: dict[str, MetricsReport]) -> str:
    """Plain-text table: one row per category, columns MAE, RMSE, R2, MAPE."""
    width = max([len("Category")] + [len(k) for k in rows])
    head = f"{'Category':<{width}}  {'MAE':>9}  {'RMSE':>9}  {'R2':>9}  {'MAPE':>9}"
    lines = [head, "-" * len(head)]
    for name, rep in rows.items():
        lines.append(
            f"{name:<{width}}  {_cell(rep.mae):>9}  {_cell(rep.rmse):>9}  "
            f"{_cell(rep.r_squared):>9}  {_cell(rep.mape, pct=True):>9}"
        )
    return "\n".join(lines)


@dataclass
class RateOfChange:
    percent: np.ndarray  # NaN where the unit was excluded
    average: float
    excluded: list[int]


def rate_of_change(previous, following) -> RateOfChange:
    """Week-on-week percent change per unit; units with zero previous flow are skipped."""
    prev = np.asarray(previous, dtype=np.float64)
    nxt = np.asarray(following, dtype=np.float64)
    if prev.shape != nxt.shape:
        raise DataError("previous and next flows differ in length")
    ok = prev > 0
    if not ok.any():
        raise DataError("every unit has zero previous flow; no rate of change is defined")
    pct = np.full(prev.shape, np.nan)
    pct[ok] = 100.0 * (nxt[ok] - prev[ok]) / prev[ok]
    return RateOfChange(pct, float(pct[ok].mean()), [int(i) for i in np.flatnonzero(~ok)])
