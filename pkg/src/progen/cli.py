"""Command-line entry point: ``progen <subcommand> [--config FILE] [flags]``.

Every subcommand reads a ``key = value`` configuration file (``#`` starts a
comment), applies the command-line overrides, writes the resolved
configuration to ``<out>/config.resolved.txt`` and a ``<out>/metrics.csv``
with columns axis, frechet, align_acc, ms_per_image, speedup.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import synthdata
from .dynscore import PolicyConfig, PositionPolicy, distill_scores, rollout, train_policy, write_trajectory_log
from .engine import (BenchResult, DecodeConfig, MetricsReport, TokenCorpus, bench_orders, bench_stages,
                     emit_montage, evaluate, image_metrics, progressive_decode, sweep_perror, write_metrics_csv)
from .model import ModelConfig, ProgressiveModel, TrainConfig, train_model, write_training_log
from .scheduler import canonical_strategy, plan_baseline, write_plan_csv
from .vqtok import (Tokenizer, TokenizerTrainConfig, VqConfig, psnr, read_token_file, train_tokenizer,
                    write_token_file)

log = logging.getLogger("progen")


@dataclass
class RunConfig:
    # data
    n_images: int = 4000
    data_seed: int = 0
    # tokenizer
    codebook_size: int = 128
    dim: int = 32
    factor: int = 4
    channels: int = 32
    beta: float = 0.25
    gamma: float = 0.99
    tok_steps: int = 6000
    tok_batch: int = 32
    tok_lr: float = 2e-3
    # generator
    layers: int = 4
    width: int = 128
    ff_width: int = 256
    heads: int = 4
    text_layers: int = 2
    text_width: int = 128
    # generator training
    order: str = "qerr"
    stages: int = 8
    stage_mix: str = ""
    steps: int = 2000
    batch: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup: int = 100
    p_error: float = 0.3
    replace_ratio: float = 0.15
    # decoding
    temp: float = 1.0
    topk: int = 32
    tau_rev: float = 0.5
    # policy
    policy_updates: int = 200
    policy_batch: int = 16
    policy_lr: float = 0.05
    # evaluation and benchmarks
    eval_n: int = 400
    stage_list: str = "64,16,8,4,2,1"
    orders: str = "l2r,random,anti,qerr,dyn"
    perror_list: str = "0,0.15,0.3,0.5,0.8"
    montages: int = 4
    prompt: str = ""
    seed: int = 0
    # artifacts, relative to --out unless absolute
    data: str = "data/manifest.txt"
    tokenizer: str = "tokenizer.ckpt"
    tokens: str = "tokens"
    model: str = "model.ckpt"
    policy: str = "policy.ckpt"

    def vq(self) -> VqConfig:
        return VqConfig(beta=self.beta, codebook_size=self.codebook_size, dim=self.dim, factor=self.factor,
                        gamma=self.gamma, channels=self.channels)

    def model_cfg(self, K: int, L: int) -> ModelConfig:
        return ModelConfig(layers=self.layers, width=self.width, ff_width=self.ff_width, heads=self.heads,
                           text_layers=self.text_layers, text_width=self.text_width, codebook_size=K, seq_len=L)

    def train_cfg(self) -> TrainConfig:
        stages = _ints(self.stage_mix) if self.stage_mix else (self.stages,)
        return TrainConfig(order=self.order, stages=tuple(stages), steps=self.steps, batch=self.batch, lr=self.lr,
                           weight_decay=self.weight_decay, warmup=self.warmup, p_error=self.p_error,
                           replace_ratio=self.replace_ratio, seed=self.seed)

    def decode_cfg(self) -> DecodeConfig:
        return DecodeConfig(T=self.stages, temperature=self.temp, top_k=self.topk or None, tau_rev=self.tau_rev,
                            seed=self.seed)

    def policy_cfg(self) -> PolicyConfig:
        return PolicyConfig(T=self.stages, updates=self.policy_updates, batch=self.policy_batch,
                            lr=self.policy_lr, temperature=self.temp, top_k=self.topk or None, seed=self.seed)


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def apply_settings(cfg: RunConfig, settings: dict[str, str]) -> RunConfig:
    types = {f.name: type(getattr(cfg, f.name)) for f in fields(cfg)}
    kw = {}
    for key, value in settings.items():
        if key not in types:
            raise ValueError(f"unknown configuration key {key!r}")
        kw[key] = types[key](value)
    return replace(cfg, **kw)


def format_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(cfg))


# ------------------------------------------------------------------ helpers
class Run:
    def __init__(self, cfg: RunConfig, out: Path):
        self.cfg = cfg
        self.out = out
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved.txt").write_text(format_config(cfg))

    def path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.out / p

    def dataset(self) -> synthdata.Dataset:
        return synthdata.read_manifest(self.path(self.cfg.data))

    def tokenizer(self) -> Tokenizer:
        return Tokenizer.load(self.path(self.cfg.tokenizer))

    def model(self) -> ProgressiveModel:
        return ProgressiveModel.load(self.path(self.cfg.model))

    def corpus(self, split: str) -> TokenCorpus:
        ds = self.dataset()[split]
        toks, errs, _ = read_token_file(self.path(self.cfg.tokens) / f"{split}.bin")
        return TokenCorpus(ds.text, ds.attrs, toks, errs, ds.images)

    def eval_corpus(self) -> TokenCorpus:
        c = self.corpus("test")
        return c.subset(min(self.cfg.eval_n, len(c)))

    def dyn_scores_path(self) -> Path:
        return self.path(self.cfg.policy).with_suffix(".scores.npy")

    def metrics(self, results: list[BenchResult]) -> None:
        write_metrics_csv(self.out / "metrics.csv", results)
        for r in results:
            print(f"{r.axis:>10}  frechet {r.report.frechet:9.4f}  align {r.report.align_acc:.3f}  "
                  f"ms/img {r.report.ms_per_image:8.2f}  speedup {r.speedup:6.2f}")


def _reconstruction_report(tok: Tokenizer, split: synthdata.Split, n: int) -> tuple[MetricsReport, float]:
    imgs = split.images[:n]
    t0 = time.perf_counter()
    rec = tok.reconstruct(imgs)
    ms = 1000.0 * (time.perf_counter() - t0) / len(imgs)
    fd, acc = image_metrics(tok, rec, split.attrs[:n], imgs)
    return MetricsReport(fd, acc, ms, 0.0, len(imgs)), float(psnr(rec, imgs).mean())


# ----------------------------------------------------------------- commands
def cmd_train_tokenizer(run: Run) -> None:
    cfg = run.cfg
    ds = synthdata.build_dataset(cfg.n_images, cfg.data_seed)
    synthdata.write_dataset(ds, run.path(cfg.data).parent)
    tok = train_tokenizer(ds.train.images, cfg.vq(),
                          TokenizerTrainConfig(steps=cfg.tok_steps, batch=cfg.tok_batch, lr=cfg.tok_lr, seed=cfg.seed))
    tok.save(run.path(cfg.tokenizer))
    rep, p = _reconstruction_report(tok, ds.test, cfg.eval_n)
    print(f"test reconstruction PSNR {p:.2f} dB")
    run.metrics([BenchResult("tokenizer", rep)])


def cmd_tokenize(run: Run) -> None:
    cfg = run.cfg
    tok = run.tokenizer()
    ds = run.dataset()
    tdir = run.path(cfg.tokens)
    tdir.mkdir(parents=True, exist_ok=True)
    pdir = run.out / "plans"
    pdir.mkdir(exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    order = canonical_strategy(cfg.order)
    for name in synthdata.SPLITS:
        res = tok.tokenize(ds[name].images)
        write_token_file(tdir / f"{name}.bin", res.tokens, res.errors, tok.cfg.codebook_size)
        if name == "train" and order != "dyn":
            for i in range(min(cfg.montages, len(res.tokens))):
                plan = plan_baseline(order, cfg.stages, rng, L=res.tokens.shape[1], errors=res.errors[i])
                write_plan_csv(pdir / f"train_{i:05d}.csv", plan, res.errors[i])
    rep, p = _reconstruction_report(tok, ds.test, cfg.eval_n)
    print(f"test reconstruction PSNR {p:.2f} dB")
    run.metrics([BenchResult("tokens", rep)])


def _dyn_scores(run: Run) -> np.ndarray | None:
    path = run.dyn_scores_path()
    return np.load(path) if path.exists() else None


def cmd_train_model(run: Run) -> None:
    cfg = run.cfg
    tok = run.tokenizer()
    train = run.corpus("train")
    scores = None
    if canonical_strategy(cfg.order) == "dyn":
        scores = _dyn_scores(run)
        if scores is None:
            raise SystemExit(f"order dyn needs policy scores at {run.dyn_scores_path()}; run train-policy first")
    mcfg = cfg.model_cfg(tok.cfg.codebook_size, train.tokens.shape[1])
    res = train_model(train.text, train.tokens, train.errors, mcfg, cfg.train_cfg(), dyn_scores=scores)
    res.model.save(run.path(cfg.model), {"order": cfg.order, "p_error": str(cfg.p_error)})
    write_training_log(run.out / "train_log.csv", res.log)
    run.metrics([BenchResult(canonical_strategy(cfg.order), evaluate(res.model, tok, run.eval_corpus(),
                                                                     cfg.decode_cfg()))])


def cmd_train_policy(run: Run) -> None:
    cfg = run.cfg
    tok = run.tokenizer()
    model = run.model()
    train = run.corpus("train")
    res = train_policy(model, tok, train.text, train.images, cfg.policy_cfg())
    res.policy.save(run.path(cfg.policy))
    write_trajectory_log(run.out / "trajectories.csv", res.trajectory_log)
    np.save(run.dyn_scores_path(), distill_scores(model, res.policy, train.text))
    test = run.eval_corpus()
    t0 = time.perf_counter()
    trajs = rollout(model, res.policy, test.text, cfg.stages, np.random.default_rng(cfg.seed), greedy=True)
    ms = 1000.0 * (time.perf_counter() - t0) / len(test)
    imgs = tok.decode(np.stack([t.tokens for t in trajs]))
    fd, acc = image_metrics(tok, imgs, test.attrs, test.images)
    run.metrics([BenchResult("policy", MetricsReport(fd, acc, ms, 0.0, len(test)))])


def _prompt_text(cfg: RunConfig, test: TokenCorpus) -> tuple[np.ndarray, np.ndarray]:
    if cfg.prompt:
        spec = synthdata.PromptSpec(*[s.strip() for s in cfg.prompt.split(",")])
        attrs = np.array([spec.ids()])
        return attrs, synthdata.text_tokens(attrs)
    return test.attrs, test.text


def cmd_sample(run: Run) -> None:
    cfg = run.cfg
    tok = run.tokenizer()
    model = run.model()
    test = run.eval_corpus()
    attrs, text = _prompt_text(cfg, test)
    dcfg = cfg.decode_cfg()
    mdir = run.out / "montages"
    mdir.mkdir(exist_ok=True)
    res = progressive_decode(model, text[:cfg.montages], dcfg)
    for i in range(len(res.tokens)):
        emit_montage([s[i] for s in res.snapshots], tok, mdir / f"montage_{i:03d}.ppm")
    if cfg.prompt:
        imgs = tok.decode(res.tokens)
        print(f"oracle parse: {synthdata.parse_image(imgs[0]).prompt}")
        run.metrics([])
        return
    run.metrics([BenchResult(str(dcfg.T), evaluate(model, tok, test, dcfg))])


def cmd_bench_stages(run: Run) -> None:
    tok = run.tokenizer()
    model = run.model()
    run.metrics(bench_stages(model, tok, run.eval_corpus(), _ints(run.cfg.stage_list), run.cfg.decode_cfg()))


def cmd_bench_orders(run: Run) -> None:
    cfg = run.cfg
    tok = run.tokenizer()
    train = run.corpus("train")
    orders = [canonical_strategy(o) for o in cfg.orders.split(",") if o.strip()]
    mcfg = cfg.model_cfg(tok.cfg.codebook_size, train.tokens.shape[1])
    scores = None
    if "dyn" in orders:
        scores = _dyn_scores(run)
        if scores is None:
            # random-order generator as the frozen environment of the policy
            gen = train_model(train.text, train.tokens, train.errors, mcfg,
                              replace(cfg.train_cfg(), order="random")).model
            pol = train_policy(gen, tok, train.text, train.images, cfg.policy_cfg()).policy
            scores = distill_scores(gen, pol, train.text)
            np.save(run.dyn_scores_path(), scores)
    run.metrics(bench_orders(train, run.eval_corpus(), tok, orders, mcfg, cfg.train_cfg(), cfg.decode_cfg(),
                             dyn_scores=scores))


def cmd_sweep_perror(run: Run) -> None:
    cfg = run.cfg
    tok = run.tokenizer()
    train = run.corpus("train")
    mcfg = cfg.model_cfg(tok.cfg.codebook_size, train.tokens.shape[1])
    run.metrics(sweep_perror(train, run.eval_corpus(), tok, _floats(cfg.perror_list), mcfg, cfg.train_cfg(),
                             cfg.decode_cfg()))


COMMANDS = {
    "train-tokenizer": cmd_train_tokenizer,
    "tokenize": cmd_tokenize,
    "train-model": cmd_train_model,
    "train-policy": cmd_train_policy,
    "sample": cmd_sample,
    "bench-stages": cmd_bench_stages,
    "bench-orders": cmd_bench_orders,
    "sweep-perror": cmd_sweep_perror,
}

FLAG_KEYS = {"seed": "seed", "stages": "stages", "order": "order", "perror": "p_error", "temp": "temp",
             "topk": "topk", "tau_rev": "tau_rev"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="progen", description="Progressive text-to-image toolkit on synthetic data.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="key = value configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--stages", type=int, help="stage count T (must divide L)")
        p.add_argument("--order", choices=["l2r", "random", "anti", "qerr", "dyn"])
        p.add_argument("--perror", type=float, help="probability of corrupting a training tuple")
        p.add_argument("--temp", type=float, help="sampling temperature")
        p.add_argument("--topk", type=int, help="top-k truncation, 0 disables")
        p.add_argument("--tau-rev", type=float, help="revision threshold on P(z = -1)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any configuration key")
        p.add_argument("--out", type=Path, default=Path("run"), help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    settings = parse_config_text(args.config.read_text()) if args.config else {}
    for item in args.set:
        settings.update(parse_config_text(item))
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag)
        if value is not None:
            settings[key] = str(value)
    return apply_settings(RunConfig(), settings)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
    except (OSError, ValueError) as exc:
        print(f"progen: {exc}", file=sys.stderr)
        return 2
    COMMANDS[args.command](Run(cfg, args.out))
    return 0


if __name__ == "__main__":
    sys.exit(main())
