"""Stage plans, state sequences and per-stage training tuples.

Token grids are int arrays of codebook ids with ``MASK`` (-1) marking
not-yet-generated positions.  State sequences use 0 (unchanged), 1 (to be
generated) and -1 (to be replaced).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace

import numpy as np

MASK = -1
STRATEGIES = ("l2r", "random", "anti", "qerr", "dyn")
_ALIASES = {"left-to-right": "l2r", "anti-progressive": "anti", "quant-error": "qerr",
            "dynamic": "dyn", "progressive": "qerr"}


def canonical_strategy(name: str) -> str:
    name = _ALIASES.get(name, name)
    if name not in STRATEGIES:
        raise ValueError(f"unknown ordering strategy {name!r}; expected one of {STRATEGIES}")
    return name


@dataclass(frozen=True)
class StagePlan:
    stages: np.ndarray  # (L,) stage index in [1, T] per position
    T: int
    strategy: str

    def __post_init__(self):
        L = len(self.stages)
        if self.T < 1 or L % self.T:
            raise ValueError(f"T={self.T} does not divide L={L}")
        counts = np.bincount(self.stages, minlength=self.T + 1)
        if counts[0] or len(counts) != self.T + 1 or (counts[1:] != L // self.T).any():
            raise ValueError("stage plan is not a partition into equal stages")

    @property
    def L(self) -> int:
        return len(self.stages)

    @property
    def per_stage(self) -> int:
        return self.L // self.T

    def positions(self, t: int) -> np.ndarray:
        return np.flatnonzero(self.stages == t)


def _check_divides(L: int, T: int) -> None:
    if T < 1 or L % T:
        raise ValueError(f"T={T} must divide L={L}")


def plan_from_ranking(order: np.ndarray, T: int, strategy: str) -> StagePlan:
    """Assign ranks [(t-1)L/T, tL/T) of ``order`` (a permutation of positions) to stage t."""
    order = np.asarray(order)
    L = len(order)
    _check_divides(L, T)
    stages = np.empty(L, np.int64)
    stages[order] = np.arange(L) // (L // T) + 1
    return StagePlan(stages, T, strategy)


def plan_from_errors(errors: np.ndarray, T: int, descending: bool = False) -> StagePlan:
    """Smallest quantization errors first; ties broken by raster index."""
    errors = np.asarray(errors, np.float64)
    key = -errors if descending else errors
    order = np.lexsort((np.arange(len(errors)), key))
    return plan_from_ranking(order, T, "anti" if descending else "qerr")


def plan_from_scores(scores: np.ndarray, T: int) -> StagePlan:
    """Highest scores first (distilled dynamic order); ties by raster index."""
    scores = np.asarray(scores, np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    return plan_from_ranking(order, T, "dyn")


def plan_baseline(strategy: str, T: int, rng: np.random.Generator | None = None, L: int = 64,
                  errors: np.ndarray | None = None, scores: np.ndarray | None = None) -> StagePlan:
    strategy = canonical_strategy(strategy)
    _check_divides(L, T)
    if strategy == "l2r":
        return plan_from_ranking(np.arange(L), T, "l2r")
    if strategy == "random":
        if rng is None:
            raise ValueError("random plans need an rng")
        return plan_from_ranking(rng.permutation(L), T, "random")
    if strategy in ("qerr", "anti"):
        if errors is None or len(errors) != L:
            raise ValueError(f"{strategy} plans need a length-{L} error sequence")
        return plan_from_errors(errors, T, descending=strategy == "anti")
    if scores is None or len(scores) != L:
        raise ValueError(f"dyn plans need a length-{L} policy score sequence")
    return plan_from_scores(scores, T)


@dataclass(frozen=True)
class RevisionConfig:
    p_error: float = 0.3
    replace_ratio: float = 0.15

    def __post_init__(self):
        if not (0.0 <= self.p_error <= 1.0 and 0.0 <= self.replace_ratio <= 1.0):
            raise ValueError("p_error and replace_ratio must lie in [0, 1]")


@dataclass(frozen=True)
class TrainingTuple:
    text: np.ndarray  # (5,) text token ids
    inp: np.ndarray  # (L,) Y^{t-1}, MASK where not yet revealed
    target: np.ndarray  # (L,) Y^t
    state: np.ndarray  # (L,) Z^t in {0, 1, -1}
    prior_state: np.ndarray  # (L,) Z^{t-1}, fed to the model as an input embedding
    t: int
    corrupted: bool = False

    def violations(self) -> list[str]:
        """Names of broken invariants (empty when the tuple is well formed)."""
        bad = []
        gen, keep, rev = self.state == 1, self.state == 0, self.state == -1
        if not np.isin(self.state, (-1, 0, 1)).all():
            bad.append("state values outside {0,1,-1}")
        if (self.inp[gen] != MASK).any():
            bad.append("generated position not masked in input")
        if (self.inp[keep] != self.target[keep]).any():
            bad.append("unchanged position differs between input and target")
        if (self.inp[rev] == MASK).any() or (self.inp[rev] == self.target[rev]).any():
            bad.append("replaced position is masked or already correct")
        if (self.target[gen | rev] == MASK).any():
            bad.append("supervised position has a mask target")
        return bad

    def validate(self) -> "TrainingTuple":
        bad = self.violations()
        if bad:
            raise ValueError("invalid training tuple: " + "; ".join(bad))
        return self


def make_tuple(text: np.ndarray, tokens: np.ndarray, plan: StagePlan, t: int) -> TrainingTuple:
    """The stage-t tuple ((X, Y^{t-1}), (Z^t, Y^t)) of an uncorrupted series."""
    if not 1 <= t <= plan.T:
        raise ValueError(f"stage {t} outside [1, {plan.T}]")
    tokens = np.asarray(tokens)
    if len(tokens) != plan.L:
        raise ValueError(f"plan for L={plan.L} applied to {len(tokens)} tokens")
    st = plan.stages
    inp = np.where(st < t, tokens, MASK)
    target = np.where(st <= t, tokens, MASK)
    state = (st == t).astype(np.int8)
    prior = (st == t - 1).astype(np.int8)
    return TrainingTuple(np.asarray(text), inp, target, state, prior, t)


def materialize_tuples(text: np.ndarray, tokens: np.ndarray, plan: StagePlan) -> list[TrainingTuple]:
    """All T tuples; Y^0 is fully masked and Y^T equals the token grid."""
    return [make_tuple(text, tokens, plan, t) for t in range(1, plan.T + 1)]


def inject_revision(tup: TrainingTuple, cfg: RevisionConfig, vocab: int, rng: np.random.Generator,
                    donor: np.ndarray | None = None) -> TrainingTuple:
    """Replace a fraction of revealed input tokens with wrong ones, flagged -1.

    The tuple is selected with probability ``p_error``.  floor(ratio * #revealed)
    positions are drawn uniformly from the revealed set; each takes the donor
    grid's token at the same position when it differs from the original, else
    a uniform draw from the other ``vocab - 1`` ids.  Targets keep the correct
    token.  Tuples with nothing eligible come back unchanged.
    """
    selected = rng.random() < cfg.p_error
    if not selected:
        return tup
    eligible = np.flatnonzero(tup.inp != MASK)
    n = int(np.floor(cfg.replace_ratio * len(eligible)))
    if n == 0:
        return tup
    pos = rng.choice(eligible, size=n, replace=False)
    orig = tup.inp[pos]
    repl = np.asarray(donor)[pos] if donor is not None else np.full(n, MASK)
    bad = (repl == orig) | (repl < 0) | (repl >= vocab)
    if bad.any():
        draw = rng.integers(0, vocab - 1, size=int(bad.sum()))
        repl = repl.copy()
        repl[bad] = draw + (draw >= orig[bad])
    inp = tup.inp.copy()
    inp[pos] = repl
    state = tup.state.copy()
    state[pos] = -1
    return replace(tup, inp=inp, state=state, corrupted=True)


def overlay_targets(tuples: list[TrainingTuple], L: int) -> np.ndarray:
    """Rebuild the full grid by writing each stage's target at its Z^t = 1 positions."""
    out = np.full(L, MASK)
    for tup in tuples:
        sel = tup.state == 1
        out[sel] = tup.target[sel]
    return out


def write_plan_csv(path: str | os.PathLike, plan: StagePlan, errors: np.ndarray | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["position", "stage", "error"])
        for i, s in enumerate(plan.stages):
            w.writerow([i, int(s), "" if errors is None else f"{float(errors[i]):.6g}"])


def read_plan_csv(path: str | os.PathLike, T: int, strategy: str = "qerr") -> tuple[StagePlan, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    stages = np.array([int(r["stage"]) for r in rows])
    errors = np.array([float(r["error"]) if r["error"] else np.nan for r in rows])
    return StagePlan(stages, T, strategy), errors
