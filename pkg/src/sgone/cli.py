"""``sgone`` command line: gen-data, train, eval, predict.

Every command takes ``--config PATH`` (flat ``key = value`` text, keys as in
the resolved config it writes) and flags that override single keys.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import configio
from .episodes import DatasetIndex, InsufficientData, build_folds
from .evaluator import evaluate
from .net import EmptySupportMask, encode_support, predict_mask, segment_query
from .pnm import MalformedImage, load_image, load_mask, pad_to_multiple, write_pnm
from .synthetic import SyntheticConfig, generate_synthetic_dataset
from .tensor import ShapeError, Tensor, bilinear_resize
from .trainer import (
    CheckpointError,
    TrainConfig,
    TrainingDiverged,
    load_checkpoint,
    train,
)

STRATEGY_ALIASES = {"max": "max_fusion", "avg": "avg_vector",
                    "max_fusion": "max_fusion", "avg_vector": "avg_vector"}


class UsageError(Exception):
    pass


@dataclass
class EvalConfig:
    checkpoint: str = ""
    data_root: str = ""
    fold_index: int = -1  # -1: the fold the checkpoint was trained on
    K: int = 1
    strategy: str = "max_fusion"
    episodes: int = 100
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.strategy not in ("max_fusion", "avg_vector"):
            raise ValueError("strategy must be max_fusion or avg_vector")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")


@dataclass
class PredictConfig:
    checkpoint: str = ""
    support_image: str = ""
    support_mask: str = ""
    query: str = ""
    emit_sim_map: bool = False


@dataclass
class GenDataConfig:
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)


# flag dest -> config key, per command
FLAG_KEYS = {
    "gen-data": {"seed": "synthetic.seed", "categories": "synthetic.num_categories",
                 "per_category": "synthetic.per_category", "image_size": "synthetic.image_size",
                 "clutter": "synthetic.clutter_density"},
    "train": {"seed": "seed", "data": "data_root", "fold": "fold_index", "max_steps": "max_steps",
              "lr": "learning_rate", "eval_every": "eval_every", "dtype": "dtype"},
    "eval": {"seed": "seed", "checkpoint": "checkpoint", "data": "data_root", "fold": "fold_index",
             "k": "K", "strategy": "strategy", "episodes": "episodes", "threads": "threads"},
    "predict": {"checkpoint": "checkpoint", "support_image": "support_image",
                "support_mask": "support_mask", "query": "query", "emit_sim_map": "emit_sim_map"},
}
DEFAULTS = {"gen-data": GenDataConfig, "train": TrainConfig, "eval": EvalConfig, "predict": PredictConfig}


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="flat 'key = value' config file; flags override it")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--threads", type=int, help="evaluation worker threads")

    p = argparse.ArgumentParser(prog="sgone", description="One-shot segmentation with similarity guidance.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[shared], help="render the synthetic shapes dataset")
    g.add_argument("--categories", type=int)
    g.add_argument("--per-category", type=int)
    g.add_argument("--image-size", type=int)
    g.add_argument("--clutter", type=float)

    t = sub.add_parser("train", parents=[shared], help="episodic training on one fold")
    t.add_argument("--data")
    t.add_argument("--fold", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--dtype", choices=("float32", "float64"))
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", parents=[shared], help="evaluate a checkpoint on held-out categories")
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--fold", type=int)
    e.add_argument("--k", type=int)
    e.add_argument("--strategy", type=lambda s: STRATEGY_ALIASES.get(s, s))
    e.add_argument("--episodes", type=int)

    q = sub.add_parser("predict", parents=[shared], help="segment one query given one support pair")
    q.add_argument("--checkpoint")
    q.add_argument("--support-image")
    q.add_argument("--support-mask")
    q.add_argument("--query")
    q.add_argument("--emit-sim-map", action="store_const", const="true")
    return p


def resolve(args) -> object:
    """Defaults, then the config file, then flags."""
    cfg = DEFAULTS[args.command]()
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise OSError(f"cannot read config {args.config}: {exc.strerror}") from exc
        cfg = configio.load_text(cfg, text, args.config)
    overrides = {key: str(getattr(args, dest)) for dest, key in FLAG_KEYS[args.command].items()
                 if getattr(args, dest, None) is not None}
    return configio.apply(cfg, overrides)


def write_resolved(out: str, name: str, cfg) -> None:
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, name), "w", encoding="utf-8") as fh:
        fh.write(configio.dump_text(cfg))


def _require(value, flag: str):
    if not value:
        raise UsageError(f"{flag} is required")
    return value


def cmd_gen_data(args, cfg: GenDataConfig) -> int:
    out = _require(args.out, "--out")
    index = generate_synthetic_dataset(cfg.synthetic, out)
    write_resolved(out, "gen-data.config.txt", cfg)
    print(f"{len(index.records)} images, {len(index.categories())} categories -> {out}")
    for c in index.categories():
        print(f"  category {c}: {len(index.by_category[c])} images")
    return 0


def cmd_train(args, cfg: TrainConfig) -> int:
    out = _require(args.out, "--out")
    _require(cfg.data_root, "--data")
    write_resolved(out, "config.txt", cfg)
    index = DatasetIndex.load(cfg.data_root)
    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt, log = train(cfg, index, out_dir=out, resume=resume, log=print)
    if log:
        print(f"trained {ckpt.step} steps, final loss {log[-1][1]:.4f}")
    else:
        print(f"no steps run; checkpoint at step {ckpt.step}")
    print(f"checkpoint -> {os.path.join(out, 'checkpoint.sgone')}")
    return 0


def cmd_eval(args, cfg: EvalConfig) -> int:
    ckpt = load_checkpoint(_require(cfg.checkpoint, "--checkpoint"))
    train_cfg = ckpt.config
    data = cfg.data_root or train_cfg.data_root
    index = DatasetIndex.load(_require(data, "--data"))
    fold_index = cfg.fold_index if cfg.fold_index >= 0 else train_cfg.fold_index
    fold = build_folds(len(index.categories()), fold_index)
    report = evaluate(ckpt.params, train_cfg.model, index, fold.test_categories, K=cfg.K,
                      strategy=cfg.strategy, episode_count=cfg.episodes, seed=cfg.seed,
                      fold_index=fold_index, threads=cfg.threads)
    table = report.table()
    print(table)
    if args.out:
        write_resolved(args.out, "eval.config.txt", cfg)
        with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
        with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
            fh.write(table + "\n")
    return 0


def sim_map_to_pgm(grid: np.ndarray) -> np.ndarray:
    """[-1, 1] -> [0, 255] linearly, rounding half up."""
    return np.floor((np.clip(grid, -1.0, 1.0) + 1.0) * 127.5 + 0.5).astype(np.int64)


def cmd_predict(args, cfg: PredictConfig) -> int:
    out = _require(args.out, "--out")
    ckpt = load_checkpoint(_require(cfg.checkpoint, "--checkpoint"))
    model = ckpt.config.model
    s_img = load_image(_require(cfg.support_image, "--support-image"))
    s_mask = load_mask(_require(cfg.support_mask, "--support-mask"))
    query = load_image(_require(cfg.query, "--query"))
    if s_img.shape[1:] != s_mask.shape:
        raise ShapeError(f"support image {s_img.shape[1:]} and mask {s_mask.shape} differ in size")
    h, w = query.shape[1:]
    # everything is computed before anything is written
    v = encode_support(pad_to_multiple(s_img), pad_to_multiple(s_mask), ckpt.params, model)
    logits, sim = segment_query(pad_to_multiple(query), v, ckpt.params, model)
    mask = predict_mask(logits)[:h, :w]
    if cfg.emit_sim_map:
        ph, pw = logits.shape[1:]
        grid = bilinear_resize(Tensor(sim.values.data.astype(np.float64)), ph, pw).data[0, :h, :w]
    os.makedirs(out, exist_ok=True)
    write_resolved(out, "predict.config.txt", cfg)
    write_pnm(os.path.join(out, "pred_mask.pgm"), mask.astype(np.int64) * 255)
    print(f"foreground pixels: {int(mask.sum())} of {h * w}")
    if cfg.emit_sim_map:
        write_pnm(os.path.join(out, "sim_map.pgm"), sim_map_to_pgm(grid))
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict}

# stable stderr prefix per error category
ERROR_PREFIXES = (
    (UsageError, "usage error"),
    (configio.ConfigError, "config error"),
    (EmptySupportMask, "input error"),
    (MalformedImage, "input error"),
    (ShapeError, "input error"),
    (CheckpointError, "checkpoint error"),
    (InsufficientData, "data error"),
    (TrainingDiverged, "training error"),
    (OSError, "io error"),
    (ValueError, "config error"),
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        if args.command != "eval" and args.threads is not None:
            raise UsageError("--threads applies to eval only")
        return COMMANDS[args.command](args, cfg)
    except Exception as exc:  # noqa: BLE001 - mapped to an exit code below
        for kind, prefix in ERROR_PREFIXES:
            if isinstance(exc, kind):
                print(f"sgone: {prefix}: {exc}", file=sys.stderr)
                return 2 if kind is UsageError else 1
        raise


if __name__ == "__main__":
    sys.exit(main())
