"""Position-scoring policy trained with REINFORCE to choose generation order.

The policy reads the frozen generator's final hidden states H (L x width)
for the current partial grid and scores position i as H_i . (w + e_t),
where e_t is a per-stage embedding.  Both are zero-initialized, so an
untrained policy is uniform over the available positions.  Actions are
L/T positions drawn by sequential softmax sampling without replacement.
"""

from __future__ import annotations

import csv
import itertools
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .model import ProgressiveModel, sample_tokens
from .nncore import AdamW, Module, Tensor, no_grad, ops
from .nncore.checkpoint import load_checkpoint, save_checkpoint
from .scheduler import MASK
from .vqtok import Tokenizer

log = logging.getLogger(__name__)

_NEG = -1e30  # additive mask for unavailable positions inside the differentiable path


class PositionPolicy(Module):
    def __init__(self, width: int, max_stages: int = 64, dtype=np.float64):
        self.w = Tensor(np.zeros(width, dtype), requires_grad=True, name="w")
        self.stage = Tensor(np.zeros((max_stages + 1, width), dtype), requires_grad=True, name="stage")

    @property
    def width(self) -> int:
        return self.w.shape[0]

    def score_tensor(self, hidden: np.ndarray, t: int) -> Tensor:
        """Differentiable (..., L) scores for hidden states (..., L, width) at stage t."""
        if not 1 <= t < self.stage.shape[0]:
            raise ValueError(f"stage {t} outside [1, {self.stage.shape[0] - 1}]")
        direction = self.w + self.stage[t]
        return ops.matmul(Tensor(np.asarray(hidden, self.w.dtype)), direction.reshape(self.width, 1)) \
            .reshape(*np.shape(hidden)[:-1])

    def score_positions(self, hidden: np.ndarray, available: np.ndarray, t: int) -> np.ndarray:
        """Scores with -inf at positions that are not available."""
        with no_grad():
            s = self.score_tensor(hidden, t).data.astype(np.float64)
        return np.where(available, s, -np.inf)

    def save(self, path: str | os.PathLike) -> None:
        save_checkpoint(path, self.state_dict(), {"kind": "position-policy", "width": str(self.width),
                                                  "max_stages": str(self.stage.shape[0] - 1)})

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PositionPolicy":
        params, meta = load_checkpoint(path)
        pol = cls(int(meta["width"]), int(meta["max_stages"]))
        pol.load_state_dict(params)
        return pol


# ------------------------------------------------------------------ actions
def sample_action(scores: np.ndarray, m: int, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """m distinct available positions by sequential softmax sampling.

    Returns the ordered positions and the log-probability of that ordered
    draw.  A forced action (m equal to the number of available positions)
    has probability 1 as a set and is reported with log-probability 0.
    """
    scores = np.asarray(scores, np.float64)
    avail = np.isfinite(scores)
    n_avail = int(avail.sum())
    if m > n_avail:
        raise ValueError(f"cannot pick {m} positions from {n_avail} available")
    keys = scores.copy()
    chosen = np.empty(m, np.int64)
    logp = 0.0
    for j in range(m):
        live = np.isfinite(keys)
        top = keys[live].max()
        p = np.where(live, np.exp(keys - top), 0.0)
        p /= p.sum()
        k = int(rng.choice(len(p), p=p))
        chosen[j] = k
        logp += np.log(p[k])
        keys[k] = -np.inf
    return chosen, (0.0 if m == n_avail else float(logp))


def greedy_action(scores: np.ndarray, m: int) -> np.ndarray:
    """Top-m scores, ties by raster index."""
    scores = np.asarray(scores, np.float64)
    avail = np.flatnonzero(np.isfinite(scores))
    if m > len(avail):
        raise ValueError(f"cannot pick {m} positions from {len(avail)} available")
    return avail[np.lexsort((avail, -scores[avail]))[:m]]


def action_log_prob(scores: Tensor, available: np.ndarray, chosen: np.ndarray) -> Tensor:
    """Differentiable log-probability of the ordered draw ``chosen`` (0 when forced)."""
    available = np.asarray(available, bool)
    m = len(chosen)
    if m == int(available.sum()):
        return scores.sum() * 0.0
    L = scores.shape[-1]
    live = np.repeat(available[None], m, axis=0)
    for j in range(1, m):
        live[j:, chosen[j - 1]] = False
    masked = scores.reshape(1, L) + Tensor(np.where(live, 0.0, _NEG))
    logp = ops.log_softmax(masked, axis=-1)
    return logp[np.arange(m), chosen].sum()


def subset_probability(scores: np.ndarray, subset) -> float:
    """Probability that sequential sampling returns exactly ``subset`` (all orderings)."""
    scores = np.asarray(scores, np.float64)
    total = 0.0
    for perm in itertools.permutations(subset):
        live = np.isfinite(scores)
        p = 1.0
        for k in perm:
            w = np.exp(scores[live] - scores[live].max())
            p *= np.exp(scores[k] - scores[live].max()) / w.sum()
            live[k] = False
        total += p
    return total


# ------------------------------------------------------------- trajectories
@dataclass
class StageRecord:
    hidden: np.ndarray  # (L, width) frozen generator states
    available: np.ndarray  # (L,) bool
    chosen: np.ndarray  # (L/T,) ordered positions
    t: int
    log_prob: float


@dataclass
class Trajectory:
    steps: list[StageRecord]
    reward: float
    tokens: np.ndarray = field(repr=False)


def rollout(model: ProgressiveModel, policy: PositionPolicy, text: np.ndarray, T: int,
            rng: np.random.Generator, tokenizer: Tokenizer | None = None,
            targets: np.ndarray | None = None, greedy: bool = False, temperature: float = 1.0,
            top_k: int | None = 32) -> list[Trajectory]:
    """Generate a batch of grids, letting the policy pick the positions of every stage.

    The reward is the negative mean squared pixel error between the decoded
    grid and ``targets`` (0 when no tokenizer/targets are given).
    """
    text = np.atleast_2d(text)
    n, L = len(text), model.cfg.seq_len
    if L % T:
        raise ValueError(f"T={T} does not divide L={L}")
    m = L // T
    cur = np.full((n, L), MASK, np.int64)
    prior = np.zeros((n, L), np.int8)
    steps: list[list[StageRecord]] = [[] for _ in range(n)]
    with no_grad():
        memory = model.encode_text(text)
        for t in range(1, T + 1):
            out = model.forward(cur, prior, memory)
            hidden = out.hidden.data.astype(np.float64)
            logits = out.token_logits.data
            prior = np.zeros_like(prior)
            for b in range(n):
                avail = cur[b] == MASK
                scores = policy.score_positions(hidden[b], avail, t)
                if greedy:
                    chosen, lp = greedy_action(scores, m), 0.0
                else:
                    chosen, lp = sample_action(scores, m, rng)
                steps[b].append(StageRecord(hidden[b], avail, chosen, t, lp))
                cur[b, chosen] = sample_tokens(logits[b, chosen], rng, 0.0 if greedy else temperature, top_k)
                prior[b, chosen] = 1
    if (cur == MASK).any():
        raise RuntimeError("masked positions remain after the final stage")
    rewards = np.zeros(n)
    if tokenizer is not None and targets is not None:
        imgs = tokenizer.decode(cur)
        rewards = -((imgs.astype(np.float64) - targets) ** 2).reshape(n, -1).mean(axis=1)
    return [Trajectory(steps[b], float(rewards[b]), cur[b]) for b in range(n)]


def policy_loss(policy: PositionPolicy, trajectories: list[Trajectory], baseline: float) -> Tensor:
    """Surrogate whose gradient is -mean_k (r_k - b) sum_t grad log pi(a_t | s_t)."""
    total = None
    for traj in trajectories:
        adv = traj.reward - baseline
        for st in traj.steps:
            lp = action_log_prob(policy.score_tensor(st.hidden, st.t), st.available, st.chosen)
            term = lp * (-adv)
            total = term if total is None else total + term
    return total * (1.0 / len(trajectories))


@dataclass
class ReinforceState:
    baseline: float = 0.0
    decay: float = 0.95
    initialized: bool = False

    def update(self, rewards: np.ndarray) -> float:
        r = float(np.mean(rewards))
        if not self.initialized:
            self.baseline, self.initialized = r, True
        else:
            self.baseline = self.decay * self.baseline + (1.0 - self.decay) * r
        return self.baseline


def reinforce_update(policy: PositionPolicy, trajectories: list[Trajectory], state: ReinforceState,
                     opt: AdamW) -> float:
    """One policy-gradient step against the current baseline, then refresh the baseline.

    Returns the mean reward of the batch.
    """
    opt.zero_grad()
    policy_loss(policy, trajectories, state.baseline).backward()
    opt.step()
    rewards = np.array([t.reward for t in trajectories])
    state.update(rewards)
    return float(rewards.mean())


@dataclass
class PolicyConfig:
    T: int = 8
    updates: int = 200
    batch: int = 16
    lr: float = 0.05
    baseline_decay: float = 0.95
    temperature: float = 1.0
    top_k: int | None = 32
    seed: int = 0
    log_every: int = 20


@dataclass
class PolicyResult:
    policy: PositionPolicy
    rewards: list[float]
    trajectory_log: list[tuple[int, int, str, float]]


def train_policy(model: ProgressiveModel, tokenizer: Tokenizer, text: np.ndarray, images: np.ndarray,
                 cfg: PolicyConfig | None = None) -> PolicyResult:
    """REINFORCE on the frozen generator; only the policy parameters change."""
    cfg = cfg or PolicyConfig()
    rng = np.random.default_rng(cfg.seed)
    policy = PositionPolicy(model.cfg.width, max(cfg.T, 1))
    opt = AdamW(policy.parameters(), lr=cfg.lr, weight_decay=0.0)
    state = ReinforceState(decay=cfg.baseline_decay)
    rewards, traj_log = [], []
    for upd in range(cfg.updates):
        idx = rng.integers(0, len(text), cfg.batch)
        trajs = rollout(model, policy, text[idx], cfg.T, rng, tokenizer, images[idx],
                        temperature=cfg.temperature, top_k=cfg.top_k)
        if upd == 0:
            state.update(np.array([t.reward for t in trajs]))
        rewards.append(reinforce_update(policy, trajs, state, opt))
        for k, traj in enumerate(trajs[:1]):
            for st in traj.steps:
                traj_log.append((upd, st.t, " ".join(map(str, st.chosen.tolist())), traj.reward))
        if cfg.log_every and upd % cfg.log_every == 0:
            log.info("policy update %d mean reward %.5f baseline %.5f", upd, rewards[-1], state.baseline)
    return PolicyResult(policy, rewards, traj_log)


def distill_scores(model: ProgressiveModel, policy: PositionPolicy, text: np.ndarray,
                   batch: int = 256) -> np.ndarray:
    """Policy scores on the all-mask state (stage 1): a static per-image ranking."""
    text = np.atleast_2d(text)
    L = model.cfg.seq_len
    out = []
    with no_grad():
        for s in range(0, len(text), batch):
            chunk = text[s:s + batch]
            res = model.forward(np.full((len(chunk), L), MASK), np.zeros((len(chunk), L), np.int8),
                                model.encode_text(chunk))
            out.append(policy.score_tensor(res.hidden.data.astype(np.float64), 1).data)
    return np.concatenate(out)


def write_trajectory_log(path: str | os.PathLike, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "stage", "positions", "reward"])
        for row in rows:
            w.writerow([row[0], row[1], row[2], f"{row[3]:.6g}"])
