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
# # Learning which features to query with
#
# A self-attention network scores every candidate feature of a target
# (item fields plus context).  Each feature is kept independently with its
# probability, and the kept ones form the OR part of the query.  Since the
# choice is discrete, the network is trained with the score-function
# (REINFORCE) estimator.  Here the estimator is compared with the exact
# gradient on a three-feature toy where all 8 subsets can be enumerated.

# %%
from __future__ import annotations

import sys

import numpy as np

sys.path.insert(0, "../tests")
from oracles import exact_policy_gradient, mc_policy_gradient, reinforce_toy  # noqa: E402

from retrieval_ctr import selector as sel  # noqa: E402

eng, target, rewards = reinforce_toy()
ids = np.array([eng.vocab.ids(target.candidate_tokens)])
p = sel.clamp_probs(1 / (1 + np.exp(-sel.selection_logits(eng.store, ids, 1).data[0])))
print({t: round(float(v), 4) for t, v in zip(target.candidate_tokens, p)})

# %%
draw = sel.sample_subset(p, np.random.default_rng(1), target)
print(draw.query, "log-prob", round(draw.log_prob, 4))

# %%
exact = exact_policy_gradient(eng, target, rewards)
mc, se = mc_policy_gradient(eng, target, rewards, batches=50, batch=1000, seed=0)
live = se > 0
z = (mc - exact)[live] / se[live]
print(f"{live.sum()} varying coordinates, |z| max {np.abs(z).max():.2f}, mean z {z.mean():+.3f}")
