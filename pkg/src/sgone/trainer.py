"""Episodic training: cross-entropy, SGD with momentum and weight decay, checkpoints."""

from __future__ import annotations

import json
import math
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import configio
from .episodes import DatasetIndex, Episode, build_folds, sample_episode
from .net import ModelConfig, check_params, forward_episode, init_params
from .tensor import GradTape, ShapeError, Tensor, softmax_cross_entropy

MAGIC = b"SGONE1"
VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 1
    max_steps: int = 3000
    eval_every: int = 500
    eval_episodes: int = 20
    seed: int = 0
    fold_index: int = 0
    data_root: str = ""
    dtype: str = "float32"
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size != 1:
            raise ValueError("batch_size must be 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor]) -> "OptimizerState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()}, 0)


@dataclass
class Checkpoint:
    config_text: str
    params: dict[str, Tensor]
    opt_state: OptimizerState
    step: int
    rng_state: dict

    @property
    def config(self) -> TrainConfig:
        return configio.load_text(TrainConfig(), self.config_text, "<checkpoint>")


def decays(name: str) -> bool:
    """Weight decay applies to kernels only."""
    return not name.endswith(".bias")


def sgd_update(params: dict[str, Tensor], grads: dict[str, np.ndarray], opt_state: OptimizerState,
               lr: float, momentum: float, wd: float) -> None:
    """v <- momentum * v + grad + wd * param;  param <- param - lr * v  (in place)."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        v = opt_state.velocity.get(name)
        if g.shape != p.shape or (v is not None and v.shape != p.shape):
            raise ShapeError(f"sgd_update: shape mismatch for {name}: param {p.shape}, grad {g.shape}")
        step = g + wd * p.data if wd and decays(name) else g
        v = step if v is None else momentum * v + step
        opt_state.velocity[name] = v.astype(p.dtype, copy=False)
        p.data = (p.data - lr * v).astype(p.dtype, copy=False)
    opt_state.step += 1


def episode_loss(params, episode: Episode, cfg: ModelConfig) -> Tensor:
    img, mask = episode.supports[0]
    logits, _, _ = forward_episode(img, mask, episode.query_image, params, cfg)
    return softmax_cross_entropy(logits, episode.query_mask)


def train_step(params: dict[str, Tensor], opt_state: OptimizerState, episode: Episode,
               config: TrainConfig) -> float:
    if episode.K != 1:
        raise ValueError("training episodes must be one-shot (K = 1)")
    for p in params.values():
        p.grad = None
    with GradTape() as tape:
        loss = episode_loss(params, episode, config.model)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingDiverged(
            f"non-finite loss {value} at step {opt_state.step}, episode {episode.episode_id}")
    tape.backward(loss)
    grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    sgd_update(params, grads, opt_state, config.learning_rate, config.momentum, config.weight_decay)
    return value


def initial_checkpoint(config: TrainConfig) -> Checkpoint:
    params = init_params(config.model, seed=config.seed, dtype=np.dtype(config.dtype))
    rng = np.random.default_rng([config.seed, 1])
    return Checkpoint(configio.dump_text(config), params, OptimizerState.zeros_like(params), 0,
                      rng.bit_generator.state)


def train(config: TrainConfig, index: DatasetIndex | None = None, out_dir: str | None = None,
          resume: Checkpoint | None = None, log=None) -> tuple[Checkpoint, list[tuple[int, float, float]]]:
    """Run episodic training up to ``config.max_steps``.

    Returns the final checkpoint and the (step, loss, wall_ms) log.  With
    ``out_dir`` set, writes ``checkpoint.sgone``, ``metrics.tsv`` and
    ``val.tsv`` there.
    """
    from .evaluator import evaluate  # evaluator depends on trainer-free modules only

    index = index or DatasetIndex.load(config.data_root)
    fold = build_folds(len(index.categories()), config.fold_index)
    # held-out categories must not reach training, not even as unlabelled background
    train_index = index.restrict(fold.train_categories)
    ckpt = resume or initial_checkpoint(config)
    ckpt.config_text = configio.dump_text(config)
    params, opt = ckpt.params, ckpt.opt_state
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    metrics: list[tuple[int, float, float]] = []
    metrics_fh = val_fh = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        mode = "a" if resume else "w"
        metrics_fh = open(os.path.join(out_dir, "metrics.tsv"), mode, encoding="utf-8")
        val_fh = open(os.path.join(out_dir, "val.tsv"), mode, encoding="utf-8")
        if not resume:
            metrics_fh.write("step\tloss\twall_ms\n")
            val_fh.write("step\tmiou\n")
    try:
        t0 = time.perf_counter()
        while opt.step < config.max_steps:
            ep = sample_episode(train_index, fold.train_categories, 1, rng)
            loss = train_step(params, opt, ep, config)
            wall = (time.perf_counter() - t0) * 1000.0
            metrics.append((opt.step, loss, wall))
            if metrics_fh:
                metrics_fh.write(f"{opt.step}\t{loss:.6f}\t{wall:.1f}\n")
            if config.eval_every and opt.step % config.eval_every == 0:
                # held-in validation on training categories; independent RNG stream
                rep = evaluate(params, config.model, train_index, fold.train_categories, K=1,
                               strategy="max_fusion", episode_count=config.eval_episodes,
                               seed=config.seed + opt.step, fold_index=config.fold_index)
                if val_fh:
                    val_fh.write(f"{opt.step}\t{rep.miou:.6f}\n")
                if log:
                    log(f"step {opt.step} loss {loss:.4f} held-in miou {rep.miou:.3f}")
    finally:
        for fh in (metrics_fh, val_fh):
            if fh:
                fh.close()
    ckpt = Checkpoint(ckpt.config_text, params, opt, opt.step, rng.bit_generator.state)
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "checkpoint.sgone"), ckpt)
    return ckpt, metrics


# ---------------------------------------------------------------------------
# checkpoint I/O
#
# magic "SGONE1" | u32 version | u32 len + config text | u64 step
# | u32 len + rng state JSON | u32 record count | records
# record: u32 name len, name, u8 dtype tag, u32 rank, u32 dims..., payload (LE)
# names: "param/<layer>" and "velocity/<layer>"


def _records(ckpt: Checkpoint):
    for name in sorted(ckpt.params):
        yield f"param/{name}", ckpt.params[name].data
    for name in sorted(ckpt.opt_state.velocity):
        yield f"velocity/{name}", ckpt.opt_state.velocity[name]


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    def blob(b: bytes) -> bytes:
        return struct.pack("<I", len(b)) + b

    recs = list(_records(ckpt))
    parts = [MAGIC, struct.pack("<I", VERSION), blob(ckpt.config_text.encode()),
             struct.pack("<Q", ckpt.step), blob(json.dumps(ckpt.rng_state).encode()),
             struct.pack("<I", len(recs))]
    for name, arr in recs:
        a = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        tag = _DTYPE_TAGS.get(a.dtype)
        if tag is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        parts += [blob(name.encode()), struct.pack("<BI", tag, a.ndim),
                  struct.pack(f"<{a.ndim}I", *a.shape), a.tobytes()]
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(b"".join(parts))
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos} (need {n} more bytes)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def blob(self) -> bytes:
        (n,) = self.unpack("<I")
        return self.take(n)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic at byte 0")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} at byte {len(MAGIC)}")
    config_text = r.blob().decode()
    (step,) = r.unpack("<Q")
    rng_state = json.loads(r.blob().decode())
    (count,) = r.unpack("<I")
    params: dict[str, Tensor] = {}
    velocity: dict[str, np.ndarray] = {}
    for _ in range(count):
        at = r.pos
        name = r.blob().decode()
        tag, rank = r.unpack("<BI")
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype tag {tag} at byte {at}")
        dims = r.unpack(f"<{rank}I")
        dt = _TAG_DTYPES[tag]
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
        kind, _, layer = name.partition("/")
        if kind == "param":
            params[layer] = Tensor(arr, requires_grad=True, name=layer)
        elif kind == "velocity":
            velocity[layer] = arr
        else:
            raise CheckpointError(f"{path}: unknown record {name!r} at byte {at}")
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: trailing bytes at byte {r.pos}")
    ckpt = Checkpoint(config_text, params, OptimizerState(velocity, step), step, rng_state)
    check_params(params, ckpt.config.model)
    return ckpt
