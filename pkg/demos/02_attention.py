"""
Attention over a short weekly sequence
======================================

Scaled dot-product attention, its multi-head form, and the encoder stack
that turns a node's weekly sequence into context vectors.
"""

import numpy as np

from visitflow.attention import AttentionParams, EncoderLayer, attention_weights, encode_sequence, multi_head
from visitflow.attention import positional_encoding
from visitflow.tensor import Tensor

rng = np.random.default_rng(1)

# Three queries against four keys. Each row of the weight matrix sums to one.
q, k = rng.normal(size=(3, 4)), rng.normal(size=(4, 4))
weights = attention_weights(q, k)
print(np.round(weights, 3), weights.sum(axis=1))

# Multi-head attention splits d_model = 8 into two heads of width 4.
x = Tensor(rng.normal(size=(6, 8)))
params = AttentionParams.init(8, 2, rng, "demo")
print("multi-head output", multi_head(x, params).shape)

# %%
# Positional code and encoder
# ---------------------------
# The encoder has no mask: every week may attend to every other week, in
# both directions. Sinusoidal positions tell the weeks apart.

print(np.round(positional_encoding(4, 8), 3))

layers = [EncoderLayer(8, 2, 16, rng, "enc.0"), EncoderLayer(8, 2, 16, rng, "enc.1")]
encoded = encode_sequence(Tensor(rng.normal(size=(12, 8))), layers)
# Post-norm layout: each position leaves the stack with unit variance.
print("per-position variance", encoded.data.var(axis=1).round(3))
