"""
Gradients on a tape, then one graph convolution
===============================================

Every model in visitflow is built from a small set of numpy primitives that
record themselves on a tape. Calling ``backward`` walks the tape in reverse
and fills ``.grad`` on each parameter.
"""

import numpy as np

from visitflow.graph import GcnLayer, Node, build_knn_graph, gcn_forward, normalize_symmetric
from visitflow.tensor import Parameter, Tape, Tensor, finite_difference_check, matmul, mse, relu

rng = np.random.default_rng(0)

# A two-layer perceptron written directly with tape primitives.
w1 = Parameter(rng.normal(size=(3, 5)), "w1")
w2 = Parameter(rng.normal(size=(5, 1)), "w2")
x = Tensor(rng.normal(size=(8, 3)))
y = rng.normal(size=(8, 1))


def loss():
    return mse(matmul(relu(matmul(x, w1)), w2), y)


with Tape() as tape:
    value = loss()
tape.backward(value)
print("loss", float(value.data))
print("dL/dw2", w2.grad.ravel().round(4))

# Central differences agree with the tape to many digits.
print("max relative gap", finite_difference_check(loss, [w1, w2]))

# %%
# Symmetric normalization and propagation
# ---------------------------------------
# Five places on a line, each joined to its two nearest neighbours. The
# normalized matrix adds self-loops and scales by inverse square-root degree.

nodes = [Node(f"p{i}", 35.0, -100.0 + i) for i in range(5)]
graph = build_knn_graph(nodes, k=2)
norm = normalize_symmetric(graph)
print(np.round(norm.matrix, 3))

# A GCN layer with identity weights simply smooths node features over the graph.
features = Tensor(np.array([[10.0], [0.0], [0.0], [0.0], [0.0]]))
layer = GcnLayer(Parameter(np.eye(1), "w"), "identity")
print("after one hop ", gcn_forward(features, norm, layer).data.ravel().round(3))
print("after two hops", gcn_forward(gcn_forward(features, norm, layer), norm, layer).data.ravel().round(3))
