"""
Learning where to write next
============================

Instead of ranking positions by quantization error, a tiny policy reads the
generator's hidden states and picks the next L/T positions itself.  It is
trained with REINFORCE on a frozen generator, rewarded by how close the
decoded picture is to the real one.

This uses a short training budget so it finishes in a few minutes once the
cached generator exists.
"""

import logging

import numpy as np

from progen import synthdata
from progen.dynscore import PolicyConfig, distill_scores, train_policy
from progen.experiments import Workspace

logging.basicConfig(level=logging.INFO, format="%(message)s")

ws = Workspace()
gen = ws.generator("random", seed=0)
train = ws.corpus("train")

# %%
# The generator stays fixed; only the policy moves.  In this world the
# random-order generator draws almost the same picture whatever the order,
# so the reward barely moves: there is little for the policy to learn.
res = train_policy(gen, ws.tokenizer, train.text, train.images, PolicyConfig(T=8, updates=150, batch=16))
r = np.array(res.rewards)
print(f"mean reward first 25 updates {r[:25].mean():.4f}, last 25 {r[-25:].mean():.4f}")

# %%
# Distilled scores rank positions for a prompt from the all-mask state.
# Higher means earlier.  Print the ranking for one prompt as a grid.
scores = distill_scores(gen, res.policy, train.text[:1])[0]
rank = np.empty(64, int)
rank[np.argsort(-scores, kind="stable")] = np.arange(64)
print(synthdata.PromptSpec.from_ids(train.attrs[0]))
for row in (rank // 8 + 1).reshape(8, 8):
    print(" ".join(str(v) for v in row))
