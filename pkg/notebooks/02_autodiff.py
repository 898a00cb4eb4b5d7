# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# %% [markdown]
# # A small reverse-mode autodiff
#
# The models are built on a tape of numpy operations.  This notebook
# builds a two-layer network, checks its gradient against central
# differences, and takes a few SGD steps.

# %%
from __future__ import annotations

import numpy as np

from retrieval_ctr import nn

rng = np.random.default_rng(0)
store = nn.ParamStore()
nn.init_dense(store, "demo.l0", 3, 5, rng)
nn.init_dense(store, "demo.l1", 5, 1, rng)
x = nn.Tensor(rng.normal(size=(8, 3)))
y = (x.data.sum(axis=1) > 0).astype(float)


def loss() -> nn.Tensor:
    h = nn.dense(store, "demo.l0", x, "relu")
    z = nn.reshape(nn.dense(store, "demo.l1", h), (8,))
    return nn.mean(nn.bce_with_logits(z, y))


print("loss", float(loss().data))
print("max relative gradient error", nn.grad_check(loss, store.tensors.values(), eps=1e-6))

# %% [markdown]
# SGD only touches parameters under the given name prefix, which is how
# the selector and predictor are trained in separate phases.

# %%
for step in range(200):
    store.zero_grad()
    out = loss()
    out.backward()
    nn.sgd_step(store, lr=0.5, prefix="demo.")
print("loss after 200 steps", float(loss().data))
