"""
Channel attention on a handful of tokens
========================================

Walks through one attention stage by hand and checks it against the
library version.
"""

import numpy as np

from csvt import tensor as T
from csvt.model import CsvtConfig, CsvtModel, cba_forward, channel_attention
from csvt.tensor import Tensor

cfg = CsvtConfig(image_size=32, patch_size=8, embed_dim=8, num_heads=2, num_layers=1)
p = CsvtModel(cfg, seed=0).block(0)
rng = np.random.default_rng(0)

# 16 tokens of width 8, the patch grid of a 32x32 image
x = rng.standard_normal((16, 8))

# project, then split the 8 channels into 2 heads of 4
q = x @ p["wq"].data + p["bq"].data
k = x @ p["wk"].data + p["bk"].data
v = x @ p["wv"].data + p["bv"].data

heads = []
for h in range(2):
    cols = slice(4 * h, 4 * h + 4)
    # each column scaled to unit length over the tokens
    qh = q[:, cols] / np.linalg.norm(q[:, cols], axis=0)
    kh = k[:, cols] / np.linalg.norm(k[:, cols], axis=0)
    logits = kh.T @ qh / np.exp(p["log_tau"].data[h])
    a = np.exp(logits - logits.max(axis=1, keepdims=True))
    a /= a.sum(axis=1, keepdims=True)
    # a is 4x4 whatever the number of tokens
    print("head", h, "attention shape", a.shape)
    heads.append(v[:, cols] @ a.T)

by_hand = np.concatenate(heads, axis=1) @ p["wout"].data + p["bout"].data
lib = channel_attention(Tensor(x), p).data
print("max difference to the library:", np.abs(by_hand - lib).max())
assert np.allclose(by_hand, lib, atol=1e-5)

# Shuffling tokens shuffles the output the same way: no positional signal
perm = rng.permutation(16)
with T.precision("f64"):
    pf = {key: (Tensor(val.data) if isinstance(val, Tensor) else val) for key, val in p.items()}
    y = cba_forward(Tensor(x), pf).data
    y_perm = cba_forward(Tensor(x[perm]), pf).data
print("equivariance gap:", np.abs(y_perm - y[perm]).max())

# Four times the tokens, same attention matrix size
_, attn = channel_attention(Tensor(rng.standard_normal((64, 8))), p, return_attention=True)
print("attention shape for 64 tokens:", attn.shape)
