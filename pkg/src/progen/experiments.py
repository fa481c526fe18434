"""Desk-scale experiment setup shared by the acceptance suite and the demos.

Trained artifacts are cached on disk under a key derived from every setting
that influences them, so a rerun with the same configuration reloads the
tokenizer and generators instead of retraining.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import synthdata
from .engine import TokenCorpus, corpus_from_split
from .model import ModelConfig, ProgressiveModel, TrainConfig, train_model
from .vqtok import Tokenizer, TokenizerTrainConfig, VqConfig, train_tokenizer

log = logging.getLogger(__name__)

DEFAULT_CACHE = Path(os.environ.get("PROGEN_CACHE", Path.home() / ".cache" / "progen"))


@dataclass(frozen=True)
class DeskSetup:
    n_images: int = 4000
    data_seed: int = 0
    vq: VqConfig = field(default_factory=VqConfig)
    tok_train: TokenizerTrainConfig = field(default_factory=lambda: TokenizerTrainConfig(log_every=0))
    # reduced generator for the ablations; the desk default (4/128/256/4) is ~4x slower per step
    model: ModelConfig = field(default_factory=lambda: ModelConfig(layers=2, width=64, ff_width=128, heads=4,
                                                                   text_layers=1, text_width=64))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(steps=1500, batch=32, lr=2e-3, warmup=100,
                                                                   log_every=0))
    eval_n: int = 400


def _key(*parts) -> str:
    blob = json.dumps([asdict(p) if hasattr(p, "__dataclass_fields__") else p for p in parts],
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class Workspace:
    """Dataset, tokenizer and token corpora for a setup, with a disk cache for trained weights."""

    def __init__(self, setup: DeskSetup | None = None, cache: str | os.PathLike | None = DEFAULT_CACHE):
        self.setup = setup or DeskSetup()
        self.cache = Path(cache) if cache is not None else None
        if self.cache is not None:
            self.cache.mkdir(parents=True, exist_ok=True)
        self._dataset = None
        self._tokenizer = None
        self._corpora: dict[str, TokenCorpus] = {}
        self.tokenizer_seconds = 0.0

    @property
    def dataset(self) -> synthdata.Dataset:
        if self._dataset is None:
            self._dataset = synthdata.build_dataset(self.setup.n_images, self.setup.data_seed)
        return self._dataset

    def _cached(self, name: str, key: str) -> Path | None:
        return None if self.cache is None else self.cache / f"{name}-{key}.ckpt"

    @property
    def tokenizer(self) -> Tokenizer:
        if self._tokenizer is None:
            s = self.setup
            path = self._cached("tokenizer", _key(s.n_images, s.data_seed, s.vq, s.tok_train))
            if path is not None and path.exists():
                self._tokenizer = Tokenizer.load(path)
                timing = path.with_suffix(".seconds")
                self.tokenizer_seconds = float(timing.read_text()) if timing.exists() else float("nan")
            else:
                t0 = time.perf_counter()
                self._tokenizer = train_tokenizer(self.dataset.train.images, s.vq, s.tok_train)
                self.tokenizer_seconds = time.perf_counter() - t0
                if path is not None:
                    self._tokenizer.save(path)
                    path.with_suffix(".seconds").write_text(f"{self.tokenizer_seconds:.1f}")
        return self._tokenizer

    def corpus(self, split: str) -> TokenCorpus:
        if split not in self._corpora:
            c = corpus_from_split(self.tokenizer, self.dataset[split])
            self._corpora[split] = c.subset(self.setup.eval_n) if split == "test" else c
        return self._corpora[split]

    def generator(self, order: str = "qerr", seed: int = 0, p_error: float | None = None,
                  stages: tuple[int, ...] = (8,), dyn_scores: np.ndarray | None = None,
                  steps: int | None = None) -> ProgressiveModel:
        """Train (or reload) one generator on the train split."""
        s = self.setup
        tcfg = replace(s.train, order=order, seed=seed, stages=tuple(stages))
        if p_error is not None:
            tcfg = replace(tcfg, p_error=p_error)
        if steps is not None:
            tcfg = replace(tcfg, steps=steps)
        mcfg = replace(s.model, codebook_size=s.vq.codebook_size, seq_len=(32 // s.vq.factor) ** 2)
        extra = None if dyn_scores is None else hashlib.sha256(np.ascontiguousarray(dyn_scores)).hexdigest()[:16]
        path = self._cached("model", _key(s.n_images, s.data_seed, s.vq, s.tok_train, mcfg, tcfg, extra))
        if path is not None and path.exists():
            return ProgressiveModel.load(path)
        train = self.corpus("train")
        t0 = time.perf_counter()
        model = train_model(train.text, train.tokens, train.errors, mcfg, tcfg, dyn_scores=dyn_scores).model
        log.info("trained %s generator (seed %d, p_error %.2f) in %.0f s", order, seed, tcfg.p_error,
                 time.perf_counter() - t0)
        if path is not None:
            model.save(path)
        return model
