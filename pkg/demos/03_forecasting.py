"""
Forecasting next week's visits
==============================

Generate planted flows, aggregate them into a node-by-week tensor, train a
narrow BiTransGCN and compare it with the historical-average baseline.
The default width (128) trains in a few minutes; this demo uses a
smaller network so it finishes in seconds.
"""

import numpy as np

from visitflow.data import IndustryClass, aggregate, generate_synthetic
from visitflow.forecast import (
    BiTransGCNConfig,
    assemble,
    evaluate,
    format_metrics_table,
    historical_average,
    plan_split,
    predict_next,
    predict_windows,
    rate_of_change,
    train,
)
from visitflow.graph import Node, build_knn_graph

data = generate_synthetic(seed=7, n_units=12, weeks=60)
tensor = aggregate(data.records, "cbg", IndustryClass.AUTOMOTIVE)
print(tensor.values.shape, tensor.sparsity["text"])

nodes = [Node(u, float(lat), float(lon)) for u, (lat, lon) in zip(tensor.node_ids, tensor.coordinates)]
graph = build_knn_graph(nodes, k=4)

config = BiTransGCNConfig(hidden=32, ff_hidden=64, epochs=120, learning_rate=1e-3, seed=7)
checkpoint = train(assemble(config, graph), tensor, split_ratio=0.8)
print("loss: first", round(checkpoint.loss_curve[0], 4), "last", round(checkpoint.loss_curve[-1], 4))

# %%
# Held-out accuracy
# -----------------
# The split is chronological: the last fifth of the target weeks is never seen
# in training, and normalization statistics come from the training span only.

plan = plan_split(tensor.n_weeks, config.history_window, 0.8)
truth = tensor.values[:, 0, plan.test_targets].T
reports = {
    "BiTransGCN": evaluate(predict_windows(checkpoint, tensor, plan.test_targets), truth),
    "historical average": evaluate(historical_average(tensor, plan.test_targets), truth),
}
print(format_metrics_table(reports))

# %%
# Week-on-week change
# -------------------
forecast = predict_next(checkpoint, tensor)
change = rate_of_change(tensor.values[:, 0, -1], forecast)
for unit, pct in zip(tensor.node_ids[:4], change.percent[:4]):
    print(f"{unit}  {pct:+6.2f}%")
print(f"average {change.average:+.2f}%")
