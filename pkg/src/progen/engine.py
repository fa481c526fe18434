"""Progressive decoding with revision, evaluation metrics and benchmark harnesses."""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import synthdata
from .model import ModelConfig, ProgressiveModel, TrainConfig, sample_tokens, train_model
from .nncore import no_grad
from .ppm import write_ppm
from .scheduler import MASK, canonical_strategy
from .vqtok import Tokenizer

log = logging.getLogger(__name__)

# large-scale reference points, kept for the benchmark docs
REFERENCE_STAGE_SPEEDUPS = {64: 13.2, 8: 97.1}
REFERENCE_ORDER_FID = {"qerr": 13.3, "const-error": 16.1, "l2r": 19.2, "random": 20.1, "anti": 22.2}
REFERENCE_BEST_PERROR = 0.3


@dataclass(frozen=True)
class DecodeConfig:
    T: int = 8
    temperature: float = 1.0
    top_k: int | None = 32
    tau_rev: float = 0.5
    revision_cap: int | None = None  # None -> L/T
    seed: int = 0

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.tau_rev <= 1.0:
            raise ValueError("tau_rev must lie in [0, 1]")


@dataclass
class DecodeResult:
    tokens: np.ndarray  # (N, L) final grids
    snapshots: list[np.ndarray]  # T grids of shape (N, L), one after every stage
    revised: np.ndarray  # (N,) tokens re-sampled by revision
    forward_passes: int


def _softmax(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def progressive_decode(model: ProgressiveModel, text: np.ndarray, cfg: DecodeConfig,
                       image_ids: np.ndarray | None = None) -> DecodeResult:
    """Fill an all-mask grid in T stages of L/T positions each.

    Every stage runs one forward pass for the whole batch.  The L/T masked
    positions with the highest P(z=1) are sampled; then non-mask positions
    (from earlier stages) with P(z=-1) > tau_rev are re-sampled from the same
    pass, highest first, at most ``revision_cap`` of them, always to a
    different token.  Randomness comes from one generator per image keyed by
    (seed, image id), so results do not depend on batch composition.
    """
    text = np.atleast_2d(text)
    n, L = len(text), model.cfg.seq_len
    if L % cfg.T:
        raise ValueError(f"T={cfg.T} does not divide L={L}")
    m = L // cfg.T
    cap = m if cfg.revision_cap is None else cfg.revision_cap
    ids = np.arange(n) if image_ids is None else np.asarray(image_ids)
    rngs = [np.random.default_rng([cfg.seed, int(i)]) for i in ids]
    cur = np.full((n, L), MASK, np.int64)
    prior = np.zeros((n, L), np.int8)
    revised = np.zeros(n, np.int64)
    snapshots = []
    calls0 = model.forward_calls
    raster = np.arange(L)
    with no_grad():
        memory = model.encode_text(text)
        for t in range(1, cfg.T + 1):
            out = model.forward(cur, prior, memory)
            logits = out.token_logits.data
            state_p = _softmax(out.state_logits.data.astype(np.float64))
            new_prior = np.zeros_like(prior)
            nxt = cur.copy()
            for b in range(n):
                masked = cur[b] == MASK
                cand = raster[masked]
                order = np.lexsort((cand, -state_p[b, cand, 1]))
                pick = cand[order[:m]]
                nxt[b, pick] = sample_tokens(logits[b, pick], rngs[b], cfg.temperature, cfg.top_k)
                new_prior[b, pick] = 1
                if cap and t > 1:
                    p_rev = state_p[b, :, 2]
                    elig = raster[~masked & (p_rev > cfg.tau_rev)]
                    if len(elig):
                        sel = elig[np.lexsort((elig, -p_rev[elig]))[:cap]]
                        nxt[b, sel] = sample_tokens(logits[b, sel], rngs[b], cfg.temperature, cfg.top_k,
                                                    exclude=cur[b, sel])
                        revised[b] += len(sel)
            cur, prior = nxt, new_prior
            snapshots.append(cur.copy())
    if (cur == MASK).any():
        raise RuntimeError("masked positions remain after the final stage")
    return DecodeResult(cur, snapshots, revised, model.forward_calls - calls0)


# ------------------------------------------------------------------ metrics
def frechet_from_moments(mu_a: np.ndarray, cov_a: np.ndarray, mu_b: np.ndarray, cov_b: np.ndarray,
                         tol: float = 1e-8) -> float:
    """||mu_a - mu_b||^2 + tr(A + B - 2 (A B)^(1/2)) with symmetric eigendecompositions.

    tr((A B)^(1/2)) is computed as tr((A^(1/2) B A^(1/2))^(1/2)), which is
    symmetric PSD; eigenvalues down to -tol (relative to the largest) are
    treated as rounding and clamped to zero.
    """
    mu_a, mu_b = np.atleast_1d(mu_a).astype(np.float64), np.atleast_1d(mu_b).astype(np.float64)
    cov_a, cov_b = np.atleast_2d(cov_a).astype(np.float64), np.atleast_2d(cov_b).astype(np.float64)

    def psd_eigvals(mat):
        w, v = np.linalg.eigh((mat + mat.T) / 2)
        scale = max(1.0, float(np.abs(w).max(initial=0.0)))
        if w.min(initial=0.0) < -tol * scale:
            raise ValueError(f"matrix is not positive semi-definite (eigenvalue {w.min():.3g})")
        return np.clip(w, 0.0, None), v

    wa, va = psd_eigvals(cov_a)
    sqrt_a = (va * np.sqrt(wa)) @ va.T
    wm, _ = psd_eigvals(sqrt_a @ cov_b @ sqrt_a)
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.sqrt(wm).sum())
    return max(value, 0.0)


def toy_frechet(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Frechet distance between Gaussians fitted to two (n, d) feature sets."""
    a = np.asarray(feats_a, np.float64)
    b = np.asarray(feats_b, np.float64)
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    d = a.shape[1]
    if b.shape[1] != d:
        raise ValueError(f"feature dims differ: {d} vs {b.shape[1]}")
    if len(a) < d + 1 or len(b) < d + 1:
        raise ValueError(f"need at least {d + 1} samples per side, got {len(a)} and {len(b)}")
    return frechet_from_moments(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False))


@dataclass
class MetricsReport:
    frechet: float
    align_acc: float
    ms_per_image: float
    revised_per_image: float
    n: int


def image_metrics(tokenizer: Tokenizer, images: np.ndarray, attrs: np.ndarray,
                  reference: np.ndarray) -> tuple[float, float]:
    """(toy Frechet against ``reference`` images, oracle alignment accuracy)."""
    fd = toy_frechet(tokenizer.pooled_features(images), tokenizer.pooled_features(reference))
    return fd, synthdata.alignment_accuracy(images, attrs)


@dataclass
class TokenCorpus:
    """Text, attributes, token grids and quantization errors of one split."""

    text: np.ndarray
    attrs: np.ndarray
    tokens: np.ndarray
    errors: np.ndarray
    images: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.text)

    def subset(self, n: int) -> "TokenCorpus":
        return TokenCorpus(self.text[:n], self.attrs[:n], self.tokens[:n], self.errors[:n], self.images[:n])


def corpus_from_split(tokenizer: Tokenizer, split: synthdata.Split) -> TokenCorpus:
    res = tokenizer.tokenize(split.images)
    return TokenCorpus(split.text, split.attrs, res.tokens, res.errors.astype(np.float32), split.images)


def evaluate(model: ProgressiveModel, tokenizer: Tokenizer, corpus: TokenCorpus, cfg: DecodeConfig,
             batch: int = 100) -> MetricsReport:
    """Decode every prompt of ``corpus`` and score the images against the corpus images."""
    grids, revised, elapsed = [], [], 0.0
    for s in range(0, len(corpus), batch):
        t0 = time.perf_counter()
        res = progressive_decode(model, corpus.text[s:s + batch], cfg, np.arange(s, min(s + batch, len(corpus))))
        elapsed += time.perf_counter() - t0
        grids.append(res.tokens)
        revised.append(res.revised)
    imgs = tokenizer.decode(np.concatenate(grids))
    fd, acc = image_metrics(tokenizer, imgs, corpus.attrs, corpus.images)
    return MetricsReport(fd, acc, 1000.0 * elapsed / len(corpus), float(np.concatenate(revised).mean()),
                         len(corpus))


# --------------------------------------------------------------- benchmarks
@dataclass
class BenchResult:
    axis: str
    report: MetricsReport
    speedup: float = 1.0


def _fill_speedups(results: list[BenchResult], base_axis: str | None) -> list[BenchResult]:
    base = next((r for r in results if r.axis == base_axis), None)
    for r in results:
        r.speedup = base.report.ms_per_image / r.report.ms_per_image if base else 1.0
    return results


def bench_stages(model: ProgressiveModel, tokenizer: Tokenizer, corpus: TokenCorpus, T_list,
                 cfg: DecodeConfig | None = None, repeats: int = 1) -> list[BenchResult]:
    """One evaluation per T with a shared seed; speedups relative to T = L.

    Timing takes the fastest of ``repeats`` decodes to damp scheduler noise.
    """
    cfg = cfg or DecodeConfig()
    L = model.cfg.seq_len
    results = []
    for T in T_list:
        c = replace(cfg, T=int(T))
        reports = [evaluate(model, tokenizer, corpus, c) for _ in range(repeats)]
        best = min(reports, key=lambda r: r.ms_per_image)
        results.append(BenchResult(str(T), best))
        log.info("stages T=%d frechet %.3e align %.3f ms/img %.2f", T, best.frechet, best.align_acc,
                 best.ms_per_image)
    return _fill_speedups(results, str(L))


DEFAULT_ORDERS = ("l2r", "random", "anti", "qerr", "dyn")


def order_stage_count(order: str, L: int, T: int) -> int:
    """Left-to-right runs one token per step; every other order uses T stages."""
    return L if canonical_strategy(order) == "l2r" else T


def bench_orders(train: TokenCorpus, test: TokenCorpus, tokenizer: Tokenizer, orders=DEFAULT_ORDERS,
                 model_cfg: ModelConfig | None = None, train_cfg: TrainConfig | None = None,
                 decode_cfg: DecodeConfig | None = None, dyn_scores: np.ndarray | None = None
                 ) -> list[BenchResult]:
    """Train and evaluate one model per order on an identical budget (steps, seed, data)."""
    model_cfg = model_cfg or ModelConfig(codebook_size=tokenizer.cfg.codebook_size)
    train_cfg = train_cfg or TrainConfig()
    decode_cfg = decode_cfg or DecodeConfig()
    L = train.tokens.shape[1]
    results = []
    for order in orders:
        order = canonical_strategy(order)
        T = order_stage_count(order, L, decode_cfg.T)
        scores = None
        if order == "dyn":
            if dyn_scores is None:
                raise ValueError("the dyn order needs distilled policy scores for the training split")
            scores = dyn_scores
        model = train_model(train.text, train.tokens, train.errors, model_cfg,
                            replace(train_cfg, order=order, stages=(T,)), dyn_scores=scores).model
        rep = evaluate(model, tokenizer, test, replace(decode_cfg, T=T))
        results.append(BenchResult(order, rep))
        log.info("order %s frechet %.3e align %.3f", order, rep.frechet, rep.align_acc)
    return _fill_speedups(results, "l2r")


PERROR_SWEEP = (0.0, 0.15, 0.3, 0.5, 0.8)


def sweep_perror(train: TokenCorpus, test: TokenCorpus, tokenizer: Tokenizer, values=PERROR_SWEEP,
                 model_cfg: ModelConfig | None = None, train_cfg: TrainConfig | None = None,
                 decode_cfg: DecodeConfig | None = None) -> list[BenchResult]:
    model_cfg = model_cfg or ModelConfig(codebook_size=tokenizer.cfg.codebook_size)
    train_cfg = train_cfg or TrainConfig()
    decode_cfg = decode_cfg or DecodeConfig()
    results = []
    for p in values:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"p_error {p} outside [0, 1]")
        model = train_model(train.text, train.tokens, train.errors, model_cfg,
                            replace(train_cfg, p_error=float(p), stages=(decode_cfg.T,))).model
        results.append(BenchResult(f"{p:g}", evaluate(model, tokenizer, test, decode_cfg)))
    return _fill_speedups(results, None)


def write_metrics_csv(path: str | os.PathLike, results: list[BenchResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "frechet", "align_acc", "ms_per_image", "speedup"])
        for r in results:
            w.writerow([r.axis, f"{r.report.frechet:.6g}", f"{r.report.align_acc:.6g}",
                        f"{r.report.ms_per_image:.6g}", f"{r.speedup:.6g}"])


def read_metrics_csv(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------ montage
MASK_GRAY = 0.5


def render_snapshot(tokenizer: Tokenizer, grid: np.ndarray) -> np.ndarray:
    """Decode one (L,) grid; masked positions become flat mid-gray f x f patches."""
    grid = np.asarray(grid)
    L = len(grid)
    side = int(np.sqrt(L))
    f = tokenizer.cfg.factor
    masked = grid == MASK
    if masked.all():
        return np.full((side * f, side * f, 3), MASK_GRAY, np.float32)
    img = tokenizer.decode(np.where(masked, 0, grid)[None], (side, side))[0]
    if masked.any():
        cell = np.kron(masked.reshape(side, side), np.ones((f, f), bool))
        img[cell] = MASK_GRAY
    return img


def emit_montage(snapshots: list[np.ndarray], tokenizer: Tokenizer, path: str | os.PathLike) -> np.ndarray:
    """Tile the decoded snapshots of one image left to right into a P6 file."""
    tiles = [render_snapshot(tokenizer, s) for s in snapshots]
    montage = np.concatenate(tiles, axis=1)
    write_ppm(Path(path), montage)
    return montage
