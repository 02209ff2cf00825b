"""Benchmark and ablation runners on the synthetic dataset.

Shared by ``scripts/`` and the acceptance suite so both measure the same thing.
"""

from __future__ import annotations

import dataclasses
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .episodes import NUM_FOLDS, DatasetIndex, build_folds
from .evaluator import EvalReport, evaluate, evaluate_episodes, model_predictor, sample_eval_episodes
from .net import ModelConfig
from .synthetic import SyntheticConfig, generate_synthetic_dataset
from .trainer import TrainConfig, train


@dataclass
class BenchmarkConfig:
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    folds: tuple[int, ...] = tuple(range(NUM_FOLDS))
    eval_episodes: int = 100
    eval_seed: int = 123
    shots: int = 5


@dataclass
class FoldResult:
    fold: int
    one_shot: EvalReport
    baseline: EvalReport
    kshot: dict[str, EvalReport]
    train_seconds: float
    params: dict = field(repr=False, default_factory=dict)
    model: ModelConfig = field(default_factory=ModelConfig)


def ensure_dataset(cfg: SyntheticConfig, root) -> DatasetIndex:
    """Generate under ``root`` unless an index is already there."""
    if not os.path.exists(os.path.join(root, "index.tsv")):
        generate_synthetic_dataset(cfg, root)
    return DatasetIndex.load(root)


def all_foreground_baseline(index: DatasetIndex, categories, episodes: int, seed: int) -> EvalReport:
    eps = sample_eval_episodes(index, categories, 1, episodes, seed)
    return evaluate_episodes(lambda ep: np.ones_like(ep.query_mask), eps, K=1,
                             strategy="all_foreground", seed=seed, episode_count=episodes)


def run_fold(index: DatasetIndex, fold_index: int, bench: BenchmarkConfig,
             model: ModelConfig | None = None, kshot: bool = False, log=None) -> FoldResult:
    cfg = dataclasses.replace(bench.train, fold_index=fold_index, eval_every=0,
                              model=model or bench.train.model)
    t0 = time.perf_counter()
    ckpt, _ = train(cfg, index)
    seconds = time.perf_counter() - t0
    test = build_folds(len(index.categories()), fold_index).test_categories
    kw = dict(episode_count=bench.eval_episodes, seed=bench.eval_seed, fold_index=fold_index)
    one = evaluate(ckpt.params, cfg.model, index, test, K=1, **kw)
    base = all_foreground_baseline(index, test, bench.eval_episodes, bench.eval_seed)
    multi = {}
    if kshot:
        for strategy in ("max_fusion", "avg_vector"):
            multi[strategy] = evaluate(ckpt.params, cfg.model, index, test, K=bench.shots,
                                       strategy=strategy, **kw)
    if log:
        log(f"fold {fold_index}: one-shot mIoU {one.miou:.3f}, all-foreground {base.miou:.3f}"
            + "".join(f", {bench.shots}-shot {s} {r.miou:.3f}" for s, r in multi.items())
            + f" ({seconds:.0f} s)")
    return FoldResult(fold_index, one, base, multi, seconds, ckpt.params, cfg.model)


def run_benchmark(index: DatasetIndex, bench: BenchmarkConfig, model: ModelConfig | None = None,
                  kshot: bool = False, log=None) -> list[FoldResult]:
    return [run_fold(index, f, bench, model, kshot, log) for f in bench.folds]


def mean_miou(results: list[FoldResult], which: str = "one_shot") -> float:
    if which in ("one_shot", "baseline"):
        return float(np.mean([getattr(r, which).miou for r in results]))
    return float(np.mean([r.kshot[which].miou for r in results]))


ABLATIONS = {
    "cosine": {},
    "two_norm": {"guidance_mode": "two_norm"},
    "input_masking": {"input_mode": "input_masking"},
    "five_channel_concat": {"input_mode": "five_channel_concat"},
}


def run_ablations(index: DatasetIndex, bench: BenchmarkConfig, variants=tuple(ABLATIONS),
                  log=None, reference: list[FoldResult] | None = None) -> dict[str, float]:
    """Mean held-out one-shot mIoU per variant, all with the same seeds.

    ``reference`` reuses an existing run of the default model for "cosine".
    """
    out = {}
    for name in variants:
        if name == "cosine" and reference is not None:
            out[name] = mean_miou(reference)
            continue
        model = dataclasses.replace(bench.train.model, **ABLATIONS[name])
        results = run_benchmark(index, bench, model, log=log)
        out[name] = mean_miou(results)
        if log:
            log(f"{name}: mean mIoU {out[name]:.3f}")
    return out


def format_table(rows: dict[str, float]) -> str:
    width = max(len(k) for k in rows)
    return "\n".join(f"{k:<{width}}  {v:.4f}" for k, v in rows.items())
