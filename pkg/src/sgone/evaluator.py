"""IoU metrics, K-shot fusion, and episodic evaluation sweeps."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .episodes import DatasetIndex, Episode, sample_episode
from .net import (
    GuidanceVector,
    ModelConfig,
    encode_support,
    predict_mask,
    segment_query,
)
from .tensor import ShapeError, Tensor

STRATEGIES = ("max_fusion", "avg_vector")


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = np.asarray(pred) > 0, np.asarray(gt) > 0
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    return p, g


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @classmethod
    def of(cls, pred, gt) -> "ConfusionCounts":
        p, g = _pair(pred, gt)
        return cls(int(np.count_nonzero(p & g)), int(np.count_nonzero(p & ~g)),
                   int(np.count_nonzero(~p & g)))

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    @property
    def union(self) -> int:
        return self.tp + self.fp + self.fn

    def iou(self) -> float:
        return self.tp / self.union if self.union else float("nan")


def iou(pred, gt) -> float:
    """TP / (TP + FP + FN).  Two empty masks count as a perfect match (1.0)."""
    c = ConfusionCounts.of(pred, gt)
    return c.tp / c.union if c.union else 1.0


def fgbg_miou(pred, gt) -> float:
    """Mean of foreground IoU and background IoU."""
    p, g = _pair(pred, gt)
    return 0.5 * (iou(p, g) + iou(~p, ~g))


def kshot_max_fusion(masks) -> np.ndarray:
    masks = [np.asarray(m) for m in masks]
    if not masks:
        raise ValueError("kshot_max_fusion: empty mask list")
    shape = masks[0].shape
    for m in masks[1:]:
        if m.shape != shape:
            raise ShapeError(f"kshot_max_fusion: mask shapes {shape} and {m.shape} differ")
    return np.maximum.reduce(masks)


def kshot_avg_vector(vectors: list[GuidanceVector]) -> GuidanceVector:
    """Elementwise mean of K guidance vectors.

    Computed as v0 + mean(v_k - v0), which is exact when all vectors agree.
    """
    if not vectors:
        raise ValueError("kshot_avg_vector: empty vector list")
    base = vectors[0].values.data
    for v in vectors[1:]:
        if v.values.shape != base.shape:
            raise ShapeError(f"kshot_avg_vector: lengths {base.shape} and {v.values.shape} differ")
    offset = np.zeros_like(base)
    for v in vectors[1:]:
        offset = offset + (v.values.data - base)
    mean = base + offset / len(vectors)
    area = sum(v.source_mask_area for v in vectors)
    return GuidanceVector(Tensor(mean), area)


def _fg_margin(logits) -> np.ndarray:
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return z[1] - z[0]


def multiclass_fuse(per_category_logits: Mapping[int, object]) -> np.ndarray:
    """Label map from per-category 2-channel logits.

    Categories are ranked by foreground probability, via the logit margin
    (softmax over two channels is monotone in it).  A pixel gets the
    top category only if that category's foreground beats its background;
    ties go to the lowest category id.
    """
    if not per_category_logits:
        raise ValueError("multiclass_fuse: no categories")
    cats = sorted(per_category_logits)
    margins = [_fg_margin(per_category_logits[c]) for c in cats]
    shape = margins[0].shape
    for c, m in zip(cats, margins):
        if m.shape != shape:
            raise ShapeError(f"multiclass_fuse: category {c} logits {m.shape} vs {shape}")
    stack = np.stack(margins)
    best = stack.argmax(axis=0)
    top = np.take_along_axis(stack, best[None], axis=0)[0]
    labels = np.asarray(cats)[best]
    return np.where(top > 0, labels, 0).astype(np.int64)


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class EvalReport:
    fold: int
    K: int
    strategy: str
    per_category_iou: dict[int, float]
    miou: float
    fgbg_miou: float
    episode_count: int
    seed: int
    counts: dict[int, tuple[int, int, int]] = field(default_factory=dict)
    per_episode: list[dict] = field(default_factory=list)

    @property
    def n_categories(self) -> int:
        return len(self.per_category_iou)

    def to_json(self) -> str:
        d = asdict(self)
        d["per_category_iou"] = {str(k): v for k, v in self.per_category_iou.items()}
        d["counts"] = {str(k): list(v) for k, v in self.counts.items()}
        return json.dumps(d, indent=2, sort_keys=True)

    def table(self) -> str:
        lines = [f"fold {self.fold}  K={self.K}  strategy={self.strategy}  "
                 f"episodes={self.episode_count}  seed={self.seed}",
                 f"{'category':>10}  {'IoU':>8}"]
        for c, v in sorted(self.per_category_iou.items()):
            lines.append(f"{c:>10}  {v:8.4f}")
        lines.append(f"{'mIoU':>10}  {self.miou:8.4f}")
        lines.append(f"{'FG-BG':>10}  {self.fgbg_miou:8.4f}")
        return "\n".join(lines)


Predictor = Callable[[Episode], np.ndarray]


def model_predictor(params, cfg: ModelConfig, strategy: str = "max_fusion") -> Predictor:
    """Binary query mask for an episode; parameters are only read."""
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}")

    def predict(ep: Episode) -> np.ndarray:
        if strategy == "avg_vector":
            vs = [encode_support(img, m, params, cfg) for img, m in ep.supports]
            logits, _ = segment_query(ep.query_image, kshot_avg_vector(vs), params, cfg)
            return predict_mask(logits)
        masks = []
        for img, m in ep.supports:
            logits, _ = segment_query(ep.query_image, encode_support(img, m, params, cfg), params, cfg)
            masks.append(predict_mask(logits))
        return kshot_max_fusion(masks)

    return predict


def sample_eval_episodes(index: DatasetIndex, categories: Iterable[int], K: int,
                         episode_count: int, seed: int) -> list[Episode]:
    """``episode_count`` episodes per category, in category order, from one seeded stream."""
    rng = np.random.default_rng(seed)
    return [sample_episode(index, {c}, K, rng)
            for c in sorted(categories) for _ in range(episode_count)]


def evaluate_episodes(predictor: Predictor, episodes: list[Episode], *, fold: int = -1,
                      K: int | None = None, strategy: str = "max_fusion", seed: int = 0,
                      episode_count: int | None = None, threads: int = 1) -> EvalReport:
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            preds = list(pool.map(predictor, episodes))
    else:
        preds = [predictor(ep) for ep in episodes]
    per_cat: dict[int, ConfusionCounts] = {}
    fg, bg = ConfusionCounts(), ConfusionCounts()
    rows = []
    for ep, pred in zip(episodes, preds):
        c = ConfusionCounts.of(pred, ep.query_mask)
        per_cat[ep.category] = per_cat.get(ep.category, ConfusionCounts()) + c
        fg = fg + c
        bg = bg + ConfusionCounts.of(pred == 0, ep.query_mask == 0)
        rows.append({"category": ep.category, "query": ep.query_name,
                     "supports": list(ep.support_names),
                     "pred_fg": int(np.count_nonzero(pred)),
                     "gt_fg": int(np.count_nonzero(ep.query_mask)),
                     "tp": c.tp, "fp": c.fp, "fn": c.fn})
    # categories never seen in prediction or ground truth are left out of the mean
    ious = {cat: cc.iou() for cat, cc in sorted(per_cat.items()) if cc.union}
    miou = float(np.mean(list(ious.values()))) if ious else float("nan")
    fg_iou = fg.iou() if fg.union else 1.0
    bg_iou = bg.iou() if bg.union else 1.0
    n = len(episodes)
    per_ep = episode_count if episode_count is not None else (n // max(len(per_cat), 1))
    return EvalReport(fold, K if K is not None else (episodes[0].K if episodes else 0), strategy,
                      ious, miou, 0.5 * (fg_iou + bg_iou), per_ep, seed,
                      {cat: (cc.tp, cc.fp, cc.fn) for cat, cc in sorted(per_cat.items())}, rows)


def evaluate(params, cfg: ModelConfig, index: DatasetIndex, categories: Iterable[int], K: int = 1,
             strategy: str = "max_fusion", episode_count: int = 100, seed: int = 0,
             fold_index: int = -1, threads: int = 1) -> EvalReport:
    """Evaluate on ``categories`` (a fold's test set) without touching parameters."""
    if K < 1:
        raise ValueError("K must be >= 1")
    episodes = sample_eval_episodes(index, categories, K, episode_count, seed)
    return evaluate_episodes(model_predictor(params, cfg, strategy), episodes, fold=fold_index,
                             K=K, strategy=strategy, seed=seed, episode_count=episode_count,
                             threads=threads)
