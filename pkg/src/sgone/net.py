"""The SG-One network: stem, similarity guidance branch, segmentation branch.

The layer graph is data (:func:`layer_specs`); the forward functions walk it,
so architecture checks can be asserted from the graph itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Iterable

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    _make,
    bilinear_resize,
    concat_channels,
    conv2d,
    elementwise_mul_broadcast,
    maxpool2d,
    relu,
    scale,
    weighted_spatial_mean,
)

GUIDANCE_MODES = ("cosine", "two_norm")
INPUT_MODES = ("masked_average_pooling", "input_masking", "five_channel_concat")
BRANCH_MODES = ("unified", "separate", "no_seg_branch", "no_cross_concat")

COSINE_EPS = 1e-12


class EmptySupportMask(ValueError):
    pass


@dataclass
class ModelConfig:
    stem_channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    stem_convs_per_block: int = 1
    guidance_block_channels: list[int] = field(default_factory=lambda: [64, 64, 128])
    seg_channels: int = 32
    num_output_classes: int = 2
    guidance_mode: str = "cosine"
    input_mode: str = "masked_average_pooling"
    branch_mode: str = "unified"
    # kernel init bound is init_gain / sqrt(fan_in); sqrt(6) is He-uniform, 1.0 the LeCun-style bound
    init_gain: float = float(np.sqrt(6.0))

    def __post_init__(self):
        self.stem_channels = [int(c) for c in self.stem_channels]
        self.guidance_block_channels = [int(c) for c in self.guidance_block_channels]
        if self.num_output_classes != 2:
            raise ValueError("num_output_classes must be 2")
        if len(self.stem_channels) != 3 or len(self.guidance_block_channels) != 3:
            raise ValueError("stem and guidance branch each have exactly three blocks")
        if min(self.stem_channels + self.guidance_block_channels + [self.seg_channels,
                                                                    self.stem_convs_per_block]) < 1:
            raise ValueError("all channel counts must be >= 1")
        if self.guidance_mode not in GUIDANCE_MODES:
            raise ValueError(f"guidance_mode must be one of {GUIDANCE_MODES}")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}")
        if self.branch_mode not in BRANCH_MODES:
            raise ValueError(f"branch_mode must be one of {BRANCH_MODES}")
        if not self.init_gain > 0:
            raise ValueError("init_gain must be > 0")

    @classmethod
    def paper_scale(cls, **overrides) -> "ModelConfig":
        base = dict(stem_channels=[64, 128, 256], stem_convs_per_block=2,
                    guidance_block_channels=[512, 512, 512], seg_channels=128)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class LayerSpec:
    name: str
    in_channels: int
    out_channels: int
    kernel: int
    relu: bool
    pool: bool = False


@dataclass
class GuidanceVector:
    values: Tensor
    source_mask_area: int

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass
class SimilarityMap:
    values: Tensor  # 1 x h x w

    @property
    def grid(self) -> np.ndarray:
        return self.values.data[0]


# ---------------------------------------------------------------------------
# layer graph


def _stem_specs(prefix: str, in_ch: int, cfg: ModelConfig) -> list[LayerSpec]:
    specs, c = [], in_ch
    for b, width in enumerate(cfg.stem_channels):
        for j in range(cfg.stem_convs_per_block):
            last = j == cfg.stem_convs_per_block - 1
            specs.append(LayerSpec(f"{prefix}.{b}.{j}", c, width, 3, relu=True, pool=last))
            c = width
    return specs


def _guidance_specs(prefix: str, in_ch: int, cfg: ModelConfig) -> list[LayerSpec]:
    specs, c = [], in_ch
    for b, width in enumerate(cfg.guidance_block_channels):
        specs.append(LayerSpec(f"{prefix}.{b}", c, width, 3, relu=b < 2))
        c = width
    return specs


def _seg_specs(cfg: ModelConfig) -> list[LayerSpec]:
    s, g = cfg.seg_channels, cfg.guidance_block_channels
    cross = cfg.branch_mode != "no_cross_concat"
    return [
        LayerSpec("seg.0", cfg.stem_channels[-1], s, 3, relu=True),
        LayerSpec("seg.1", s + (g[0] if cross else 0), s, 3, relu=True),
        LayerSpec("seg.2", s + (g[1] if cross else 0), s, 3, relu=False),
    ]


def _head_specs(cfg: ModelConfig) -> list[LayerSpec]:
    gated = cfg.guidance_block_channels[-1] if cfg.branch_mode == "no_seg_branch" else cfg.seg_channels
    s = cfg.seg_channels
    return [
        LayerSpec("head.0", gated, s, 3, relu=True),
        LayerSpec("head.1", s, cfg.num_output_classes, 1, relu=False),
    ]


def layer_specs(cfg: ModelConfig) -> dict[str, list[LayerSpec]]:
    """Named sub-networks making up a model of this configuration."""
    stem_out = cfg.stem_channels[-1]
    graph = {
        "stem": _stem_specs("stem", 3, cfg),
        "guide": _guidance_specs("guide", stem_out, cfg),
        "head": _head_specs(cfg),
    }
    if cfg.branch_mode != "no_seg_branch":
        graph["seg"] = _seg_specs(cfg)
    if cfg.input_mode == "five_channel_concat":
        graph["stem5"] = _stem_specs("stem5", 5, cfg)
    if cfg.branch_mode == "separate":
        if cfg.input_mode != "five_channel_concat":
            graph["sup_stem"] = _stem_specs("sup_stem", 3, cfg)
        graph["sup_guide"] = _guidance_specs("sup_guide", stem_out, cfg)
    return graph


def support_path(cfg: ModelConfig) -> tuple[str, str]:
    """(stem, guidance) sub-network names that process support images."""
    if cfg.input_mode == "five_channel_concat":
        stem = "stem5"
    else:
        stem = "sup_stem" if cfg.branch_mode == "separate" else "stem"
    guide = "sup_guide" if cfg.branch_mode == "separate" else "guide"
    return stem, guide


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> dict[str, Tensor]:
    """Kernels ~ U(-b, b) with b = init_gain / sqrt(fan_in); biases zero."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for specs in layer_specs(cfg).values():
        for sp in specs:
            fan_in = sp.in_channels * sp.kernel * sp.kernel
            bound = cfg.init_gain / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(sp.out_channels, sp.in_channels, sp.kernel, sp.kernel))
            params[f"{sp.name}.weight"] = Tensor(w.astype(dtype), requires_grad=True,
                                                 name=f"{sp.name}.weight")
            params[f"{sp.name}.bias"] = Tensor(np.zeros(sp.out_channels, dtype=dtype),
                                               requires_grad=True, name=f"{sp.name}.bias")
    return params


def check_params(params: dict[str, Tensor], cfg: ModelConfig) -> None:
    for specs in layer_specs(cfg).values():
        for sp in specs:
            w, b = params.get(f"{sp.name}.weight"), params.get(f"{sp.name}.bias")
            shape = (sp.out_channels, sp.in_channels, sp.kernel, sp.kernel)
            if w is None or w.shape != shape:
                raise ShapeError(f"parameter {sp.name}.weight missing or not of shape {shape}")
            if b is None or b.shape != (sp.out_channels,):
                raise ShapeError(f"parameter {sp.name}.bias missing or not of shape {(sp.out_channels,)}")


def _apply(sp: LayerSpec, x: Tensor, params: dict[str, Tensor]) -> Tensor:
    y = conv2d(x, params[f"{sp.name}.weight"], params[f"{sp.name}.bias"],
               stride=1, padding=sp.kernel // 2)
    if sp.relu:
        y = relu(y)
    if sp.pool:
        y = maxpool2d(y, 2, 2)
    return y


def _run(specs: Iterable[LayerSpec], x: Tensor, params) -> Tensor:
    for sp in specs:
        x = _apply(sp, x, params)
    return x


# ---------------------------------------------------------------------------
# Eq. 1 / Eq. 2 primitives


def masked_average_pool(features: Tensor, mask) -> GuidanceVector:
    """Resize ``features`` to the mask's size, then average over foreground pixels."""
    y = (np.asarray(mask) > 0)
    area = int(y.sum())
    if area == 0:
        raise EmptySupportMask("empty support mask: no foreground pixels to pool")
    if features.data.ndim != 3:
        raise ShapeError(f"masked_average_pool: expected c x h x w features, got {features.shape}")
    resized = bilinear_resize(features, y.shape[0], y.shape[1])
    return GuidanceVector(weighted_spatial_mean(resized, y.astype(features.dtype)), area)


def global_average_pool(features: Tensor, area: int) -> GuidanceVector:
    ones = np.ones(features.shape[1:], dtype=features.dtype)
    return GuidanceVector(weighted_spatial_mean(features, ones), area)


def _vec(v) -> Tensor:
    return v.values if isinstance(v, GuidanceVector) else v


def cosine_similarity_map(v, query_features: Tensor) -> SimilarityMap:
    """s[y,x] = v.F[:,y,x] / (|v| |F[:,y,x]| + 1e-12)."""
    vt, f = _vec(v), query_features
    if vt.data.ndim != 1 or f.data.ndim != 3 or vt.shape[0] != f.shape[0]:
        raise ShapeError(f"cosine_similarity_map: vector {vt.shape} vs features {f.shape}")
    # accumulate in float64 so positive rescaling of v is invariant to ~1 ulp of the output
    vd, fd = vt.data.astype(np.float64), f.data.astype(np.float64)
    dot = np.einsum("c,chw->hw", vd, fd)
    nv = np.sqrt(vd @ vd)
    nf = np.sqrt(np.einsum("chw,chw->hw", fd, fd))
    den = nv * nf + COSINE_EPS
    s = dot / den

    def bw(g):
        g = g[0]
        a = g / den                       # d s / d dot
        b = -g * dot / (den * den)        # d s / d den
        # den = nv * nf; d nv / d v = v / nv, d nf / d f = f / nf
        inv_nv = 1.0 / nv if nv > 0 else 0.0
        inv_nf = np.divide(1.0, nf, out=np.zeros_like(nf), where=nf > 0)
        gv = np.einsum("hw,chw->c", a, fd) + (b * nf).sum() * vd * inv_nv
        gf = a[None] * vd[:, None, None] + (b * nv * inv_nf)[None] * fd
        return (gv.astype(vt.dtype), gf.astype(f.dtype))

    return SimilarityMap(_make(s[None].astype(f.dtype), (vt, f), bw))


def two_norm_similarity_map(v, query_features: Tensor) -> SimilarityMap:
    """s[y,x] = -|v - F[:,y,x]|_2 (larger is more similar)."""
    vt, f = _vec(v), query_features
    if vt.data.ndim != 1 or f.data.ndim != 3 or vt.shape[0] != f.shape[0]:
        raise ShapeError(f"two_norm_similarity_map: vector {vt.shape} vs features {f.shape}")
    diff = vt.data[:, None, None] - f.data
    dist = np.sqrt(np.einsum("chw,chw->hw", diff, diff))

    def bw(g):
        inv = np.divide(1.0, dist, out=np.zeros_like(dist), where=dist > 0)
        unit = diff * (g[0] * inv)[None]
        return (-unit.sum(axis=(1, 2)), unit)

    return SimilarityMap(_make(-dist[None], (vt, f), bw))


def similarity_map(cfg: ModelConfig, v, query_features: Tensor) -> SimilarityMap:
    if cfg.guidance_mode == "cosine":
        return cosine_similarity_map(v, query_features)
    return two_norm_similarity_map(v, query_features)


# ---------------------------------------------------------------------------
# branches


def _as_image(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def forward_stem(image, params, cfg: ModelConfig | None = None, name: str = "stem") -> Tensor:
    cfg = cfg or ModelConfig()
    dtype = params[f"{name}.0.0.weight"].dtype
    x = _as_image(image, dtype)
    if x.data.ndim != 3 or x.shape[1] % 8 or x.shape[2] % 8:
        raise ShapeError(f"forward_stem: image {x.shape} must be c x H x W with H, W divisible by 8")
    in_ch = 5 if name == "stem5" else 3
    return _run(_stem_specs(name, in_ch, cfg), x, params)


def guidance_blocks(stem_features: Tensor, params, cfg: ModelConfig | None = None,
                    name: str = "guide") -> list[Tensor]:
    """Outputs of the three guidance blocks (the last one has no ReLU)."""
    cfg = cfg or ModelConfig()
    outs, x = [], stem_features
    for sp in _guidance_specs(name, stem_features.shape[0], cfg):
        x = _apply(sp, x, params)
        outs.append(x)
    return outs


def forward_guidance_branch(stem_features: Tensor, params, cfg: ModelConfig | None = None,
                            name: str = "guide") -> Tensor:
    return guidance_blocks(stem_features, params, cfg, name)[-1]


def forward_segmentation_branch(stem_features: Tensor, guidance_feats_1: Tensor,
                                guidance_feats_2: Tensor, sim_map: SimilarityMap, params,
                                cfg: ModelConfig | None = None,
                                out_size: tuple[int, int] | None = None) -> Tensor:
    """Segmentation branch; returns 2 x H x W logits (H x W = ``out_size``, default 8x input)."""
    cfg = cfg or ModelConfig()
    gate = sim_map.values
    if gate.shape[1:] != stem_features.shape[1:]:
        raise ShapeError(f"similarity map {gate.shape} does not match features {stem_features.shape}")
    seg = _seg_specs(cfg)
    cross = cfg.branch_mode != "no_cross_concat"
    x = _apply(seg[0], stem_features, params)
    x = _apply(seg[1], concat_channels(x, guidance_feats_1) if cross else x, params)
    x = _apply(seg[2], concat_channels(x, guidance_feats_2) if cross else x, params)
    return _head(x, gate, params, cfg, out_size or (8 * x.shape[1], 8 * x.shape[2]))


def _head(x: Tensor, gate: Tensor, params, cfg: ModelConfig, out_size) -> Tensor:
    x = elementwise_mul_broadcast(x, gate)
    x = _run(_head_specs(cfg), x, params)
    return bilinear_resize(x, out_size[0], out_size[1])


def encode_support(image, mask, params, cfg: ModelConfig) -> GuidanceVector:
    """Representative vector of the support object, per ``cfg.input_mode``."""
    dtype = params["stem.0.0.weight"].dtype
    img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=dtype)
    y = np.asarray(mask) > 0
    area = int(y.sum())
    if area == 0:
        raise EmptySupportMask("empty support mask: no foreground pixels to pool")
    if y.shape != img.shape[1:]:
        raise ShapeError(f"support mask {y.shape} does not match image {img.shape}")
    stem_name, guide_name = support_path(cfg)
    if cfg.input_mode == "masked_average_pooling":
        feats = forward_guidance_branch(forward_stem(img, params, cfg, stem_name), params, cfg, guide_name)
        return masked_average_pool(feats, y)
    if cfg.input_mode == "input_masking":
        x = img * y[None].astype(dtype)
    else:
        yf = y[None].astype(dtype)
        x = np.concatenate([img, yf, 1.0 - yf], axis=0)
    feats = forward_guidance_branch(forward_stem(x, params, cfg, stem_name), params, cfg, guide_name)
    return global_average_pool(feats, area)


def segment_query(query_image, v, params, cfg: ModelConfig) -> tuple[Tensor, SimilarityMap]:
    """Logits (2 x H x W) and similarity map for a query under guidance vector ``v``."""
    dtype = params["stem.0.0.weight"].dtype
    q = _as_image(query_image, dtype)
    stem = forward_stem(q, params, cfg, "stem")
    g1, g2, g3 = guidance_blocks(stem, params, cfg, "guide")
    sim = similarity_map(cfg, v, g3)
    out_size = q.shape[1:]
    if cfg.branch_mode == "no_seg_branch":
        return _head(g3, sim.values, params, cfg, out_size), sim
    return forward_segmentation_branch(stem, g1, g2, sim, params, cfg, out_size), sim


def forward_episode(support_image, support_mask, query_image, params, cfg: ModelConfig
                    ) -> tuple[Tensor, SimilarityMap, GuidanceVector]:
    v = encode_support(support_image, support_mask, params, cfg)
    logits, sim = segment_query(query_image, v, params, cfg)
    return logits, sim, v


def predict_mask(logits) -> np.ndarray:
    """Per-pixel argmax over the two channels; exact ties go to background."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return (z[1] > z[0]).astype(np.uint8)


def scale_vector(v: GuidanceVector, k: float) -> GuidanceVector:
    return GuidanceVector(scale(v.values, k), v.source_mask_area)
