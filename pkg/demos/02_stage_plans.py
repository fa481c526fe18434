"""
Stage plans, training tuples and planted mistakes
=================================================

A stage plan splits the 8x8 token grid into T equal groups.  Each stage of
a plan yields one training tuple: what the model sees, what it must write,
and a per-position state (0 keep, 1 generate now, -1 fix a wrong token).

No training happens here, so this runs in a second.
"""

import numpy as np

from progen.scheduler import (MASK, RevisionConfig, inject_revision, materialize_tuples, plan_baseline,
                              plan_from_errors)

rng = np.random.default_rng(0)
tokens = rng.integers(0, 128, 64)
errors = rng.gamma(2.0, size=64)


def show(grid, fmt="{:>3}"):
    for row in np.asarray(grid).reshape(8, 8):
        print(" ".join("  ." if v == MASK else fmt.format(v) for v in row))
    print()


# %%
# Easy first: the plan ranks positions by how well the tokenizer could
# represent them (small quantization error) and reveals those early.
plan = plan_from_errors(errors, T=4)
print("stage of each position (low error -> early stage):")
show(plan.stages, "{:>3}")
for strategy in ("l2r", "anti", "random"):
    print(strategy, plan_baseline(strategy, 4, rng, errors=errors).stages[:16], "...")

# %%
# Each tuple reveals exactly L/T more positions than the previous one.
tuples = materialize_tuples(np.arange(5), tokens, plan)
for tup in tuples:
    print(f"stage {tup.t}: {int((tup.inp != MASK).sum()):2d} visible -> {int((tup.target != MASK).sum()):2d} visible")
print("\ninput of stage 3:")
show(tuples[2].inp)

# %%
# Revision training corrupts a slice of the visible input.  The target keeps
# the true token and the state marks the corrupted slots with -1.
bad = inject_revision(tuples[2], RevisionConfig(p_error=1.0, replace_ratio=0.15), 128, rng)
pos = np.flatnonzero(bad.state == -1)
print("corrupted positions:", pos.tolist())
print("shown:", bad.inp[pos].tolist(), " correct:", bad.target[pos].tolist())
print("invariant violations:", bad.violations())
