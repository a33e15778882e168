"""Next-week flow forecasting with BiTransGCN."""

from .flowtensor import FlowTensor, iso_weeks, parse_iso_week
from .metrics import MetricsReport, RateOfChange, evaluate, format_metrics_table, rate_of_change
from .model import BiTransGCN, BiTransGCNConfig, assemble, expected_parameter_count
from .train import (
    AdamW,
    Checkpoint,
    DataError,
    FingerprintError,
    historical_average,
    load_checkpoint,
    plan_split,
    predict_next,
    predict_windows,
    save_checkpoint,
    train,
    write_loss_curve,
)

__all__ = [
    "AdamW",
    "BiTransGCN",
    "BiTransGCNConfig",
    "Checkpoint",
    "DataError",
    "FingerprintError",
    "FlowTensor",
    "MetricsReport",
    "RateOfChange",
    "assemble",
    "evaluate",
    "expected_parameter_count",
    "format_metrics_table",
    "historical_average",
    "iso_weeks",
    "load_checkpoint",
    "parse_iso_week",
    "plan_split",
    "predict_next",
    "predict_windows",
    "rate_of_change",
    "save_checkpoint",
    "train",
    "write_loss_curve",
]
