"""Text-conditioned non-causal sequence model with token and state heads.

A small transformer encoder embeds the 5 prompt tokens.  The image decoder
reads the current partial token grid (``[mask]`` is an extra input id),
attends bidirectionally over all L positions and cross-attends to the text
memory.  Two linear heads read the final hidden states: next-token logits
over the K codebook ids and 3-way state logits (classes 0, 1, -1).
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import synthdata
from .nncore import (AdamW, CosineSchedule, Embedding, FeedForward, LayerNorm, Linear, Module,
                     MultiHeadAttention, Tensor, clip_grad_norm, ops)
from .nncore.checkpoint import load_checkpoint, save_checkpoint
from .scheduler import (MASK, RevisionConfig, StagePlan, TrainingTuple, canonical_strategy,
                        inject_revision, make_tuple, plan_from_ranking)

log = logging.getLogger(__name__)

# state value -> class index of the state head
STATE_VALUES = (0, 1, -1)


def state_to_class(state: np.ndarray) -> np.ndarray:
    state = np.asarray(state)
    return np.where(state == -1, 2, state).astype(np.int64)


@dataclass
class ModelConfig:
    layers: int = 4
    width: int = 128
    ff_width: int = 256
    heads: int = 4
    text_layers: int = 2
    text_width: int = 128
    codebook_size: int = 128
    seq_len: int = 64
    text_vocab: int = synthdata.TEXT_VOCAB
    text_len: int = synthdata.TEXT_LEN
    state_weight: float = 1.0
    causal: bool = False

    # reference decoder geometry of the full-scale model; not used at desk scale
    REFERENCE_SCALE = {"layers": 24, "width": 1280, "ff_width": 4096, "heads": 20}

    def __post_init__(self):
        if self.width % self.heads or self.text_width % self.heads:
            raise ValueError(f"widths must be divisible by {self.heads} heads")

    @property
    def mask_id(self) -> int:
        return self.codebook_size

    def to_meta(self) -> dict[str, str]:
        return {f.name: str(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_meta(cls, meta: dict[str, str]) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name in meta:
                raw = meta[f.name]
                kw[f.name] = raw == "True" if f.type in ("bool", bool) else type(getattr(cls, f.name))(raw)
        return cls(**kw)


@dataclass
class DualHeadOutput:
    token_logits: Tensor  # (B, L, K)
    state_logits: Tensor  # (B, L, 3)
    hidden: Tensor  # (B, L, width), final decoder states after the last layer norm


class EncoderBlock(Module):
    def __init__(self, dim, heads, ff, rng, dtype):
        self.ln1 = LayerNorm(dim, dtype)
        self.attn = MultiHeadAttention(dim, heads, rng, dtype)
        self.ln2 = LayerNorm(dim, dtype)
        self.ff = FeedForward(dim, ff, rng, dtype)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.ff(self.ln2(x))


class DecoderBlock(Module):
    def __init__(self, dim, heads, ff, rng, dtype):
        self.ln1 = LayerNorm(dim, dtype)
        self.self_attn = MultiHeadAttention(dim, heads, rng, dtype)
        self.ln2 = LayerNorm(dim, dtype)
        self.cross_attn = MultiHeadAttention(dim, heads, rng, dtype)
        self.ln3 = LayerNorm(dim, dtype)
        self.ff = FeedForward(dim, ff, rng, dtype)

    def forward(self, x, memory, causal=False):
        x = x + self.self_attn(self.ln1(x), causal=causal)
        x = x + self.cross_attn(self.ln2(x), memory)
        return x + self.ff(self.ln3(x))


class ProgressiveModel(Module):
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        tw, w = cfg.text_width, cfg.width
        self.text_emb = Embedding(cfg.text_vocab, tw, rng, dtype)
        self.text_pos = Embedding(cfg.text_len, tw, rng, dtype)
        self.text_blocks = [EncoderBlock(tw, cfg.heads, 2 * tw, rng, dtype) for _ in range(cfg.text_layers)]
        self.text_ln = LayerNorm(tw, dtype)
        self.text_proj = Linear(tw, w, rng, dtype=dtype) if tw != w else None
        self.tok_emb = Embedding(cfg.codebook_size + 1, w, rng, dtype)
        self.img_pos = Embedding(cfg.seq_len, w, rng, dtype)
        self.state_emb = Embedding(3, w, rng, dtype)
        self.blocks = [DecoderBlock(w, cfg.heads, cfg.ff_width, rng, dtype) for _ in range(cfg.layers)]
        self.ln_f = LayerNorm(w, dtype)
        self.token_head = Linear(w, cfg.codebook_size, rng, dtype=dtype)
        self.state_head = Linear(w, 3, rng, dtype=dtype)
        self.forward_calls = 0

    @property
    def dtype(self):
        return self.token_head.weight.dtype

    def encode_text(self, text: np.ndarray) -> Tensor:
        """(B, 5) text ids -> (B, 5, width) memory states."""
        text = np.asarray(text)
        if text.ndim == 1:
            text = text[None]
        if text.shape[1] != self.cfg.text_len:
            raise ValueError(f"expected {self.cfg.text_len} text tokens, got {text.shape[1]}")
        if text.min() < 0 or text.max() >= self.cfg.text_vocab:
            raise ValueError(f"text id outside vocabulary [0, {self.cfg.text_vocab})")
        x = self.text_emb(text) + self.text_pos.weight
        for blk in self.text_blocks:
            x = blk(x)
        x = self.text_ln(x)
        return self.text_proj(x) if self.text_proj is not None else x

    def forward(self, tokens: np.ndarray, prior_state: np.ndarray, memory: Tensor) -> DualHeadOutput:
        """Both heads for every position of the partial grid; ``MASK`` entries use the mask embedding."""
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.shape[1] != self.cfg.seq_len:
            raise ValueError(f"expected {self.cfg.seq_len} positions, got {tokens.shape[1]}")
        ids = np.where(tokens == MASK, self.cfg.mask_id, tokens)
        if ids.min() < 0 or ids.max() > self.cfg.mask_id:
            raise ValueError("token id outside [0, K) and not MASK")
        self.forward_calls += 1
        x = self.tok_emb(ids) + self.img_pos.weight + self.state_emb(state_to_class(prior_state))
        for blk in self.blocks:
            x = blk(x, memory, causal=self.cfg.causal)
        h = self.ln_f(x)
        return DualHeadOutput(self.token_head(h), self.state_head(h), h)

    # ----------------------------------------------------------- persistence
    def save(self, path: str | os.PathLike, extra_meta: dict[str, str] | None = None) -> None:
        meta = self.cfg.to_meta()
        meta["kind"] = "progressive-model"
        meta.update(extra_meta or {})
        save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ProgressiveModel":
        params, meta = load_checkpoint(path)
        model = cls(ModelConfig.from_meta(meta))
        model.load_state_dict(params)
        return model


# ------------------------------------------------------------------- losses
@dataclass
class TupleBatch:
    text: np.ndarray
    inp: np.ndarray
    target: np.ndarray
    state: np.ndarray
    prior: np.ndarray

    def __len__(self) -> int:
        return len(self.text)


def collate(tuples: list[TrainingTuple], validate: bool = True) -> TupleBatch:
    if validate:
        for tup in tuples:
            tup.validate()
    return TupleBatch(
        np.stack([t.text for t in tuples]), np.stack([t.inp for t in tuples]),
        np.stack([t.target for t in tuples]), np.stack([t.state for t in tuples]),
        np.stack([t.prior_state for t in tuples]))


@dataclass
class LossParts:
    total: Tensor
    token: Tensor
    state: Tensor


def loss_progressive(model: ProgressiveModel, batch: TupleBatch | list[TrainingTuple]) -> LossParts:
    """Token cross-entropy where |Z^t| = 1 plus weighted state cross-entropy at every position."""
    if not isinstance(batch, TupleBatch):
        batch = collate(batch)
    memory = model.encode_text(batch.text)
    out = model.forward(batch.inp, batch.prior, memory)
    supervised = np.abs(batch.state) == 1
    targets = np.where(supervised, batch.target, 0)
    token = ops.cross_entropy(out.token_logits, targets, supervised)
    state = ops.cross_entropy(out.state_logits, state_to_class(batch.state))
    return LossParts(token + model.cfg.state_weight * state, token, state)


def loss_ar(model: ProgressiveModel, text: np.ndarray, tokens: np.ndarray) -> Tensor:
    """-log p(Y|X) summed over positions, averaged over the batch.

    Position i is predicted from the first i tokens with the rest masked,
    prior state 1 on position i-1: the T = L raster schedule, evaluated for
    all prefixes in one batched forward pass.
    """
    text = np.atleast_2d(text)
    tokens = np.atleast_2d(tokens)
    B, L = tokens.shape
    visible = np.tril(np.ones((L, L), bool), k=-1)  # row i: positions < i
    inp = np.where(visible[None], tokens[:, None, :], MASK).reshape(B * L, L)
    prior = np.eye(L, k=-1, dtype=np.int8)[None].repeat(B, 0).reshape(B * L, L)
    memory = model.encode_text(np.repeat(text, L, axis=0))
    out = model.forward(inp, prior, memory)
    rows = np.arange(B * L)
    diag = out.token_logits[rows, np.tile(np.arange(L), B)]  # (B*L, K)
    return ops.cross_entropy(diag, tokens.reshape(-1), reduction="sum") * (1.0 / B)


# ----------------------------------------------------------------- training
@dataclass
class TrainConfig:
    order: str = "qerr"
    stages: tuple[int, ...] = (8,)
    steps: int = 2000
    batch: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.96
    warmup: int = 100
    grad_clip: float = 1.0
    p_error: float = 0.3
    replace_ratio: float = 0.15
    seed: int = 0
    log_every: int = 50


@dataclass
class TrainResult:
    model: ProgressiveModel
    log: list[dict] = field(default_factory=list)


def order_rankings(order: str, errors: np.ndarray | None = None,
                   scores: np.ndarray | None = None) -> np.ndarray | None:
    """Per-image position rankings for the static orders (None for random)."""
    order = canonical_strategy(order)
    if order == "random":
        return None
    if order == "l2r":
        return None
    if order in ("qerr", "anti"):
        e = np.asarray(errors, np.float64)
        key = -e if order == "anti" else e
        idx = np.broadcast_to(np.arange(e.shape[1]), e.shape)
        return np.stack([np.lexsort((idx[i], key[i])) for i in range(len(e))])
    s = np.asarray(scores, np.float64)
    idx = np.broadcast_to(np.arange(s.shape[1]), s.shape)
    return np.stack([np.lexsort((idx[i], -s[i])) for i in range(len(s))])


def sample_plan(order: str, T: int, L: int, i: int, rankings: np.ndarray | None,
                rng: np.random.Generator) -> StagePlan:
    if order == "random":
        return plan_from_ranking(rng.permutation(L), T, "random")
    if order == "l2r":
        return plan_from_ranking(np.arange(L), T, "l2r")
    return plan_from_ranking(rankings[i], T, order)


def train_model(text: np.ndarray, tokens: np.ndarray, errors: np.ndarray | None,
                cfg: ModelConfig | None = None, tcfg: TrainConfig | None = None,
                dyn_scores: np.ndarray | None = None, callback=None) -> TrainResult:
    """Supervised stage training on randomly drawn (image, T, t) tuples.

    Each batch element draws a stage count from ``tcfg.stages`` and a stage t
    uniformly in [1, T]; the tuple is corrupted with probability ``p_error``
    using the next batch element's grid as the donor of wrong tokens.
    """
    cfg = cfg or ModelConfig()
    tcfg = tcfg or TrainConfig()
    order = canonical_strategy(tcfg.order)
    rng = np.random.default_rng(tcfg.seed)
    model = ProgressiveModel(cfg, seed=tcfg.seed)
    L = tokens.shape[1]
    rankings = order_rankings(order, errors, dyn_scores)
    rev = RevisionConfig(tcfg.p_error, tcfg.replace_ratio)
    params = model.parameters()
    opt = AdamW(params, lr=tcfg.lr, beta1=tcfg.beta1, beta2=tcfg.beta2, weight_decay=tcfg.weight_decay)
    sched = CosineSchedule(tcfg.lr, tcfg.steps, warmup=tcfg.warmup)
    result = TrainResult(model)
    n = len(tokens)
    for step in range(tcfg.steps):
        idx = rng.integers(0, n, size=tcfg.batch)
        tuples = []
        for j, i in enumerate(idx):
            T = int(rng.choice(tcfg.stages))
            plan = sample_plan(order, T, L, i, rankings, rng)
            t = int(rng.integers(1, T + 1))
            tup = make_tuple(text[i], tokens[i], plan, t)
            donor = tokens[idx[(j + 1) % len(idx)]]
            tuples.append(inject_revision(tup, rev, cfg.codebook_size, rng, donor))
        batch = collate(tuples, validate=False)
        opt.zero_grad()
        parts = loss_progressive(model, batch)
        parts.total.backward()
        if tcfg.grad_clip:
            clip_grad_norm(params, tcfg.grad_clip)
        lr = sched.rate(step)
        opt.step(lr=lr)
        if tcfg.log_every and (step % tcfg.log_every == 0 or step == tcfg.steps - 1):
            row = {"step": step, "lr": lr, "token_loss": parts.token.item(), "state_loss": parts.state.item()}
            result.log.append(row)
            log.info("model step %d lr %.2e token %.4f state %.4f", step, lr, row["token_loss"],
                     row["state_loss"])
        if callback is not None:
            callback(step, parts)
    return result


def write_training_log(path: str | os.PathLike, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "lr", "token_loss", "state_loss"])
        w.writeheader()
        for r in rows:
            w.writerow(r)


def sample_tokens(logits: np.ndarray, rng: np.random.Generator, temperature: float = 1.0,
                  top_k: int | None = None, exclude: np.ndarray | None = None) -> np.ndarray:
    """One categorical draw per row of an (n, K) logit array (Gumbel-max).

    ``exclude`` gives one forbidden id per row (used when replacing a token
    that must change).  ``temperature`` <= 0 means argmax.
    """
    z = np.asarray(logits, np.float64).copy()
    if exclude is not None:
        z[np.arange(len(z)), exclude] = -np.inf
    if top_k is not None and 0 < top_k < z.shape[1]:
        kth = np.partition(z, -top_k, axis=1)[:, -top_k][:, None]
        z = np.where(z >= kth, z, -np.inf)
    if temperature <= 0:
        return z.argmax(axis=1)
    gumbel = -np.log(-np.log(rng.uniform(np.finfo(float).tiny, 1.0, z.shape)))
    return (z / temperature + gumbel).argmax(axis=1)
