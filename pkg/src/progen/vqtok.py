"""Toy vector-quantised image tokenizer.

Strided conv encoder -> nearest-entry codebook lookup -> upsampling conv
decoder.  The codebook is maintained with exponential moving averages by
default; the gradient-trained codebook term is kept behind ``use_ema=False``.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nncore import AdamW, Conv2d, CosineSchedule, Module, Tensor, no_grad, ops, stop_gradient
from .nncore.checkpoint import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class VqConfig:
    beta: float = 0.25
    codebook_size: int = 128
    dim: int = 32
    factor: int = 4
    gamma: float = 0.99
    channels: int = 32
    use_ema: bool = True
    eps: float = 1e-9

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.factor < 1 or self.factor & (self.factor - 1):
            raise ValueError(f"factor must be a power of two, got {self.factor}")
        if self.codebook_size < 2:
            raise ValueError("codebook needs at least 2 entries")


@dataclass
class QuantizationResult:
    tokens: np.ndarray  # (..., L) int
    errors: np.ndarray  # (..., L) float, squared distance to the chosen entry


class Codebook:
    """K x d entries plus EMA accumulators.

    Accumulators start at zero; an entry is only overwritten by the EMA ratio
    once it has received mass, so unused initial entries survive.
    """

    def __init__(self, entries: np.ndarray, gamma: float = 0.99, eps: float = 1e-9,
                 trainable: bool = False):
        entries = np.asarray(entries, dtype=np.float32)
        if entries.ndim != 2 or entries.shape[0] < 1:
            raise ValueError(f"codebook entries must be a non-empty K x d array, got {entries.shape}")
        self.weight = Tensor(entries, requires_grad=trainable, name="codebook")
        self.cluster_size = np.zeros(entries.shape[0], np.float64)
        self.embed_sum = np.zeros(entries.shape, np.float64)
        self.gamma = gamma
        self.eps = eps

    @property
    def entries(self) -> np.ndarray:
        return self.weight.data

    @property
    def size(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]


def quantize(z: np.ndarray, codebook: Codebook | np.ndarray, chunk: int = 4096) -> QuantizationResult:
    """Nearest codebook entry per feature (ties -> lowest index) and its squared distance."""
    entries = codebook.entries if isinstance(codebook, Codebook) else np.asarray(codebook)
    if entries.ndim != 2 or entries.shape[0] == 0:
        raise ValueError("cannot quantize against an empty codebook")
    z = np.asarray(z)
    if z.shape[-1] != entries.shape[1]:
        raise ValueError(f"feature dim {z.shape[-1]} != codebook dim {entries.shape[1]}")
    lead = z.shape[:-1]
    flat = z.reshape(-1, z.shape[-1]).astype(np.float64)
    e = entries.astype(np.float64)
    tokens = np.empty(len(flat), np.int64)
    errors = np.empty(len(flat), np.float64)
    for s in range(0, len(flat), chunk):
        diff = flat[s:s + chunk, None, :] - e[None]
        d = (diff * diff).sum(axis=-1)
        idx = d.argmin(axis=1)
        tokens[s:s + chunk] = idx
        errors[s:s + chunk] = d[np.arange(len(idx)), idx]
    return QuantizationResult(tokens.reshape(lead), errors.reshape(lead))


def ema_update(cb: Codebook, features: np.ndarray, assignments: np.ndarray) -> Codebook:
    """Decay the accumulators by gamma, add this batch, refresh assigned entries in place."""
    features = np.asarray(features, np.float64).reshape(-1, cb.dim)
    assignments = np.asarray(assignments).reshape(-1)
    if assignments.size and (assignments.min() < 0 or assignments.max() >= cb.size):
        raise ValueError("assignment index out of codebook range")
    counts = np.bincount(assignments, minlength=cb.size).astype(np.float64)
    sums = np.zeros((cb.size, cb.dim))
    np.add.at(sums, assignments, features)
    g = cb.gamma
    cb.cluster_size = g * cb.cluster_size + (1.0 - g) * counts
    cb.embed_sum = g * cb.embed_sum + (1.0 - g) * sums
    live = cb.cluster_size > 0
    new = cb.embed_sum[live] / (cb.cluster_size[live, None] + cb.eps)
    cb.weight.data[live] = new.astype(cb.weight.dtype)
    return cb


class Encoder(Module):
    """log2(f) stride-2 4x4 convs, a 3x3 conv, then a 1x1 projection to d."""

    def __init__(self, cfg: VqConfig, rng: np.random.Generator, dtype=np.float32):
        c = cfg.channels
        steps = int(math.log2(cfg.factor))
        self.down = [Conv2d(3 if i == 0 else c, c, 4, rng, stride=2, padding=1, dtype=dtype)
                     for i in range(steps)]
        self.mid = Conv2d(3 if steps == 0 else c, c, 3, rng, padding=1, dtype=dtype)
        self.proj = Conv2d(c, cfg.dim, 1, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        for conv in self.down:
            x = ops.relu(conv(x))
        return self.proj(ops.relu(self.mid(x)))


class Decoder(Module):
    """3x3 conv, then per level nearest 2x upsample + 3x3 conv, then a 3x3 conv to RGB."""

    def __init__(self, cfg: VqConfig, rng: np.random.Generator, dtype=np.float32):
        c = cfg.channels
        steps = int(math.log2(cfg.factor))
        self.inp = Conv2d(cfg.dim, c, 3, rng, padding=1, dtype=dtype)
        widths = [c] * steps
        if steps:
            widths[-1] = max(c // 2, 8)
        ins = [c] + widths[:-1]
        self.up = [Conv2d(a, b, 3, rng, padding=1, dtype=dtype) for a, b in zip(ins, widths)]
        self.out = Conv2d(widths[-1] if steps else c, 3, 3, rng, padding=1, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = ops.relu(self.inp(x))
        for conv in self.up:
            x = ops.relu(conv(ops.upsample2x(x)))
        return self.out(x)


@dataclass
class LossBreakdown:
    total: Tensor
    recon: float
    codebook: float
    commit: float
    result: QuantizationResult = field(repr=False)
    features: np.ndarray = field(repr=False)


class Tokenizer:
    """Encoder, codebook and decoder with the VQ loss and tokenize/decode helpers."""

    def __init__(self, cfg: VqConfig | None = None, seed: int = 0, dtype=np.float32):
        self.cfg = cfg or VqConfig()
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(self.cfg, rng, dtype)
        self.decoder = Decoder(self.cfg, rng, dtype)
        init = rng.standard_normal((self.cfg.codebook_size, self.cfg.dim)) * 0.1
        self.codebook = Codebook(init.astype(dtype), self.cfg.gamma, self.cfg.eps,
                                 trainable=not self.cfg.use_ema)
        self.codebook.weight.data = self.codebook.weight.data.astype(dtype)

    # ---------------------------------------------------------------- shapes
    def grid_shape(self, h: int, w: int) -> tuple[int, int]:
        f = self.cfg.factor
        if h % f or w % f:
            raise ValueError(f"image {h}x{w} not divisible by factor {f}")
        return h // f, w // f

    def parameters(self) -> list[Tensor]:
        params = self.encoder.parameters() + self.decoder.parameters()
        if not self.cfg.use_ema:
            params.append(self.codebook.weight)
        return params

    # ------------------------------------------------------------- pipeline
    def encode_tensor(self, imgs: np.ndarray) -> Tensor:
        imgs = np.asarray(imgs)
        if imgs.ndim == 3:
            imgs = imgs[None]
        if imgs.ndim != 4 or imgs.shape[-1] != 3:
            raise ValueError(f"expected N x H x W x 3 images, got {imgs.shape}")
        gh, gw = self.grid_shape(imgs.shape[1], imgs.shape[2])
        dt = self.encoder.proj.weight.dtype
        z = self.encoder(Tensor(imgs.astype(dt), check=False))
        return z.reshape(z.shape[0], gh * gw, self.cfg.dim)

    def encode(self, imgs: np.ndarray) -> np.ndarray:
        """(N, H, W, 3) -> (N, L, d) raster-ordered patch features."""
        with no_grad():
            return self.encode_tensor(imgs).data

    def tokenize(self, imgs: np.ndarray, batch: int = 256) -> QuantizationResult:
        toks, errs = [], []
        for s in range(0, len(imgs), batch):
            res = quantize(self.encode(imgs[s:s + batch]), self.codebook)
            toks.append(res.tokens)
            errs.append(res.errors)
        return QuantizationResult(np.concatenate(toks), np.concatenate(errs))

    def _decode_tensor(self, zq: Tensor, gh: int, gw: int) -> Tensor:
        n = zq.shape[0]
        return self.decoder(zq.reshape(n, gh, gw, self.cfg.dim))

    def decode(self, tokens: np.ndarray, grid: tuple[int, int] | None = None) -> np.ndarray:
        """(N, L) tokens -> (N, H, W, 3) images clamped to [0, 1]."""
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.min() < 0 or tokens.max() >= self.codebook.size:
            raise ValueError(f"token out of range [0, {self.codebook.size})")
        n, L = tokens.shape
        gh, gw = grid or (int(math.isqrt(L)),) * 2
        if gh * gw != L:
            raise ValueError(f"cannot arrange {L} tokens as a {gh}x{gw} grid")
        with no_grad():
            zq = Tensor(self.codebook.entries[tokens], check=False)
            out = self._decode_tensor(zq, gh, gw).data
        return np.clip(out, 0.0, 1.0)

    def reconstruct(self, imgs: np.ndarray) -> np.ndarray:
        gh, gw = self.grid_shape(imgs.shape[1], imgs.shape[2])
        return self.decode(self.tokenize(imgs).tokens, (gh, gw))

    def pooled_features(self, imgs: np.ndarray, batch: int = 256) -> np.ndarray:
        """Mean-pooled encoder features, the embedding used by the Frechet metric."""
        return np.concatenate([self.encode(imgs[s:s + batch]).mean(axis=1)
                               for s in range(0, len(imgs), batch)]).astype(np.float64)

    # ------------------------------------------------------------------ loss
    def loss(self, imgs: np.ndarray) -> LossBreakdown:
        """L1 reconstruction + codebook term + beta * commitment, straight-through quantization.

        The squared terms are squared L2 norms per feature, averaged over features.
        With EMA enabled the codebook term is reported but carries no gradient.
        """
        imgs = np.asarray(imgs)
        gh, gw = self.grid_shape(imgs.shape[1], imgs.shape[2])
        z = self.encode_tensor(imgs)
        res = quantize(z.data, self.codebook)
        zq = self.codebook.weight[res.tokens]
        n_feat = res.tokens.size
        codebook_term = ((stop_gradient(z) - zq) ** 2).sum() * (1.0 / n_feat)
        commit_term = ((stop_gradient(zq) - z) ** 2).sum() * (1.0 / n_feat)
        z_st = z + stop_gradient(zq - z)
        recon = self._decode_tensor(z_st, gh, gw)
        target = Tensor(imgs.astype(recon.dtype), check=False)
        recon_term = ops.absolute(recon - target).mean()
        total = recon_term + self.cfg.beta * commit_term
        if not self.cfg.use_ema:
            total = total + codebook_term
        return LossBreakdown(total, recon_term.item(), codebook_term.item(), commit_term.item(),
                             res, z.data)

    # ----------------------------------------------------------- persistence
    def save(self, path: str | os.PathLike) -> None:
        params = {f"encoder.{k}": v for k, v in self.encoder.state_dict().items()}
        params.update({f"decoder.{k}": v for k, v in self.decoder.state_dict().items()})
        params["codebook.entries"] = self.codebook.entries
        params["codebook.cluster_size"] = self.codebook.cluster_size
        params["codebook.embed_sum"] = self.codebook.embed_sum
        meta = {k: str(v) for k, v in vars(self.cfg).items()}
        meta["kind"] = "tokenizer"
        save_checkpoint(path, params, meta)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Tokenizer":
        params, meta = load_checkpoint(path)
        cfg = VqConfig(
            beta=float(meta["beta"]), codebook_size=int(meta["codebook_size"]), dim=int(meta["dim"]),
            factor=int(meta["factor"]), gamma=float(meta["gamma"]), channels=int(meta["channels"]),
            use_ema=meta["use_ema"] == "True", eps=float(meta["eps"]))
        tok = cls(cfg)
        tok.encoder.load_state_dict({k[8:]: v for k, v in params.items() if k.startswith("encoder.")})
        tok.decoder.load_state_dict({k[8:]: v for k, v in params.items() if k.startswith("decoder.")})
        tok.codebook.weight.data = params["codebook.entries"].astype(np.float32)
        tok.codebook.cluster_size = params["codebook.cluster_size"].astype(np.float64)
        tok.codebook.embed_sum = params["codebook.embed_sum"].astype(np.float64)
        return tok


def psnr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-image PSNR in dB for images in [0, 1]."""
    mse = ((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2).reshape(len(a), -1).mean(axis=1)
    return 10.0 * np.log10(1.0 / np.maximum(mse, 1e-12))


@dataclass
class TokenizerTrainConfig:
    steps: int = 6000
    batch: int = 32
    lr: float = 2e-3
    weight_decay: float = 0.0
    seed: int = 0
    restart_every: int = 50
    restart_threshold: float = 0.03
    log_every: int = 100


def train_tokenizer(images: np.ndarray, cfg: VqConfig | None = None,
                    tcfg: TokenizerTrainConfig | None = None, callback=None) -> Tokenizer:
    """Train encoder/decoder with AdamW + cosine schedule and EMA codebook updates.

    The codebook is seeded from encoder features of the first batch, and
    entries whose EMA mass decays below ``restart_threshold`` are re-seeded
    from random current features.
    """
    cfg = cfg or VqConfig()
    tcfg = tcfg or TokenizerTrainConfig()
    rng = np.random.default_rng(tcfg.seed)
    tok = Tokenizer(cfg, seed=tcfg.seed)
    opt = AdamW(tok.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    sched = CosineSchedule(tcfg.lr, tcfg.steps, warmup=min(50, tcfg.steps // 10))
    n = len(images)
    first = images[rng.choice(n, size=min(n, 4 * tcfg.batch), replace=False)]
    feats = tok.encode(first).reshape(-1, cfg.dim)
    pick = rng.choice(len(feats), size=cfg.codebook_size, replace=len(feats) < cfg.codebook_size)
    tok.codebook.weight.data[:] = feats[pick] + rng.standard_normal((cfg.codebook_size, cfg.dim)) * 1e-3
    for step in range(tcfg.steps):
        batch = images[rng.integers(0, n, size=tcfg.batch)]
        opt.zero_grad()
        out = tok.loss(batch)
        out.total.backward()
        opt.step(lr=sched.rate(step))
        if cfg.use_ema:
            ema_update(tok.codebook, out.features, out.result.tokens)
        if tcfg.restart_every and step % tcfg.restart_every == tcfg.restart_every - 1 \
                and step < 0.8 * tcfg.steps:
            _restart_dead(tok.codebook, out.features.reshape(-1, cfg.dim), tcfg.restart_threshold, rng)
        if callback is not None:
            callback(step, out)
        if tcfg.log_every and step % tcfg.log_every == 0:
            log.info("tokenizer step %d loss %.4f recon %.4f commit %.4f", step, out.total.item(),
                     out.recon, out.commit)
    return tok


def _restart_dead(cb: Codebook, feats: np.ndarray, threshold: float, rng: np.random.Generator) -> int:
    dead = np.flatnonzero(cb.cluster_size < threshold)
    if len(dead) == 0:
        return 0
    pick = rng.choice(len(feats), size=len(dead), replace=len(feats) < len(dead))
    cb.weight.data[dead] = feats[pick]
    cb.cluster_size[dead] = threshold
    cb.embed_sum[dead] = feats[pick] * threshold
    return len(dead)


# ----------------------------------------------------------- token datasets
TOKEN_MAGIC = "PROGEN-TOKENS"


def write_token_file(path: str | os.PathLike, tokens: np.ndarray, errors: np.ndarray,
                     codebook_size: int) -> None:
    """Text header ``PROGEN-TOKENS L K count`` then per record L x uint16 tokens and L x float32 errors."""
    tokens = np.asarray(tokens)
    errors = np.asarray(errors)
    count, L = tokens.shape
    if errors.shape != tokens.shape:
        raise ValueError(f"tokens {tokens.shape} and errors {errors.shape} disagree")
    if tokens.min() < 0 or tokens.max() >= min(codebook_size, 65536):
        raise ValueError("token index does not fit the codebook / uint16")
    with open(path, "wb") as fh:
        fh.write(f"{TOKEN_MAGIC} {L} {codebook_size} {count}\n".encode("ascii"))
        for t, e in zip(tokens, errors):
            fh.write(t.astype("<u2").tobytes())
            fh.write(e.astype("<f4").tobytes())


def read_token_file(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray, int]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    magic, L, K, count = raw[:nl].decode("ascii").split()
    if magic != TOKEN_MAGIC:
        raise ValueError(f"{path}: not a token file")
    L, K, count = int(L), int(K), int(count)
    rec = np.dtype([("tok", "<u2", (L,)), ("err", "<f4", (L,))])
    data = np.frombuffer(raw, dtype=rec, count=count, offset=nl + 1)
    return data["tok"].astype(np.int64), data["err"].astype(np.float32), K
