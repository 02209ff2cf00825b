"""Synthetic shapes dataset: textured shape archetypes over cluttered backgrounds.

Each category is an archetype (shape kind, fill pattern, base hue).  An
image holds one object of its primary category and, with some probability,
one distractor object of another category.  Objects never overlap, so every
mask is exactly the rasterized shape.
"""

from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass

import numpy as np

from .pnm import save_image, save_mask

SHAPE_KINDS = ("circle", "square", "triangle", "half_disc", "cross", "rhombus", "ellipse", "hexagon")
FILL_PATTERNS = ("solid", "stripes", "checker", "dots")

SQRT3 = np.sqrt(3.0)


@dataclass(frozen=True)
class Archetype:
    kind: str
    pattern: str
    hue: float


def _hue_order(n: int) -> list[int]:
    """Bit-reversal permutation of 0..n-1 (neighbouring categories get distant hues)."""
    bits = max(1, (n - 1).bit_length())
    rev = sorted(range(2 ** bits), key=lambda i: int(format(i, f"0{bits}b")[::-1], 2))
    return [i for i in rev if i < n]


def archetypes(n: int) -> list[Archetype]:
    """Category ``i + 1`` gets ``archetypes(n)[i]``.

    Hues are evenly spaced but assigned in bit-reversed order, so the
    consecutive categories held out together by a fold sit far apart on
    the hue circle and each unseen hue lies between seen ones.
    """
    if n < 2:
        raise ValueError("need at least two categories")
    order = _hue_order(n)
    return [Archetype(SHAPE_KINDS[i % len(SHAPE_KINDS)],
                      FILL_PATTERNS[(i // 2 + i) % len(FILL_PATTERNS)],
                      order.index(i) / n) for i in range(n)]


@dataclass
class SyntheticConfig:
    image_size: int = 64
    num_categories: int = 8
    per_category: int = 30
    clutter_density: float = 1.0
    distractor_prob: float = 0.6
    min_radius: float = 9.0
    max_radius: float = 15.0
    seed: int = 0

    def __post_init__(self):
        if self.image_size % 8 or self.image_size < 16:
            raise ValueError("image_size must be a multiple of 8 and >= 16")
        if self.num_categories < 2:
            raise ValueError("need at least two categories")
        if self.per_category < 1:
            raise ValueError("per_category must be >= 1")
        if not 0 < self.min_radius <= self.max_radius or 2 * self.max_radius + 2 > self.image_size:
            raise ValueError("object radii do not fit in the image")


@dataclass(frozen=True)
class ShapeSpec:
    category: int
    kind: str
    pattern: str
    cx: float
    cy: float
    radius: float
    angle: float
    color: tuple[float, float, float]
    color2: tuple[float, float, float]
    phase: float


def inside(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Membership test in the shape's unit frame (radius 1, unrotated)."""
    au, av = np.abs(u), np.abs(v)
    r2 = u * u + v * v
    if kind == "circle":
        return r2 <= 1.0
    if kind == "square":
        return (au <= 0.75) & (av <= 0.75)
    if kind == "triangle":
        return (v >= -0.5) & (v <= 1.0 - SQRT3 * au)
    if kind == "half_disc":
        return (r2 <= 1.0) & (v >= -0.25)
    if kind == "cross":
        return ((au <= 0.35) & (av <= 1.0)) | ((av <= 0.35) & (au <= 1.0))
    if kind == "rhombus":
        return au + av / 0.6 <= 1.0
    if kind == "ellipse":
        return u * u + (v / 0.55) ** 2 <= 1.0
    if kind == "hexagon":
        return (av <= SQRT3 / 2) & (SQRT3 * au + av <= SQRT3)
    raise ValueError(f"unknown shape kind {kind!r}")


def _local_coords(spec: ShapeSpec, size: int):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xs - spec.cx, ys - spec.cy
    c, s = np.cos(spec.angle), np.sin(spec.angle)
    pu = c * dx + s * dy
    pv = -s * dx + c * dy
    return pu, pv


def shape_mask(spec: ShapeSpec, size: int) -> np.ndarray:
    pu, pv = _local_coords(spec, size)
    return inside(spec.kind, pu / spec.radius, pv / spec.radius)


def _pattern(spec: ShapeSpec, size: int) -> np.ndarray:
    """Boolean field selecting the secondary colour."""
    pu, pv = _local_coords(spec, size)
    period = 4.0
    a = np.floor(pu / period + spec.phase)
    b = np.floor(pv / period + spec.phase)
    if spec.pattern == "solid":
        return np.zeros((size, size), dtype=bool)
    if spec.pattern == "stripes":
        return a % 2 == 1
    if spec.pattern == "checker":
        return (a + b) % 2 == 1
    if spec.pattern == "dots":
        fu = pu / period + spec.phase - a - 0.5
        fv = pv / period + spec.phase - b - 0.5
        return fu * fu + fv * fv <= 0.09
    raise ValueError(f"unknown fill pattern {spec.pattern!r}")


def _category_colors(arch: Archetype, rng: np.random.Generator):
    hue = (arch.hue + rng.uniform(-0.025, 0.025)) % 1.0
    sat = rng.uniform(0.75, 1.0)
    val = rng.uniform(0.75, 1.0)
    c1 = colorsys.hsv_to_rgb(hue, sat, val)
    c2 = colorsys.hsv_to_rgb(hue, sat, val * 0.45)
    return tuple(float(x) for x in c1), tuple(float(x) for x in c2)


def _place(rng, cfg: SyntheticConfig, category: int, arch: Archetype, others: list[ShapeSpec]
           ) -> ShapeSpec | None:
    for _ in range(100):
        r = rng.uniform(cfg.min_radius, cfg.max_radius)
        cx = rng.uniform(r + 1, cfg.image_size - r - 1)
        cy = rng.uniform(r + 1, cfg.image_size - r - 1)
        if all(np.hypot(cx - o.cx, cy - o.cy) > r + o.radius + 2 for o in others):
            c1, c2 = _category_colors(arch, rng)
            return ShapeSpec(category, arch.kind, arch.pattern, float(cx), float(cy), float(r),
                             float(rng.uniform(0, 2 * np.pi)), c1, c2, float(rng.uniform(0, 1)))
    return None


def sample_scene(rng: np.random.Generator, cfg: SyntheticConfig, category: int) -> list[ShapeSpec]:
    """Object layout for one image whose primary category is ``category`` (1-based)."""
    arch = archetypes(cfg.num_categories)
    objs = [_place(rng, cfg, category, arch[category - 1], [])]
    if rng.random() < cfg.distractor_prob:
        other = int(rng.integers(1, cfg.num_categories))
        other = other + 1 if other >= category else other
        d = _place(rng, cfg, other, arch[other - 1], objs)
        if d is not None:
            objs.append(d)
    return objs


def _background(rng, cfg: SyntheticConfig) -> np.ndarray:
    size = cfg.image_size
    coarse = rng.uniform(0.25, 0.65, size=(3, 5, 5))
    coarse = coarse.mean(axis=0, keepdims=True) * 0.7 + coarse * 0.3  # desaturate
    ys = np.linspace(0, 4, size)
    i0 = np.minimum(np.floor(ys).astype(int), 3)
    f = ys - i0
    rows = coarse[:, i0] * (1 - f)[None, :, None] + coarse[:, i0 + 1] * f[None, :, None]
    img = rows[:, :, i0] * (1 - f)[None, None, :] + rows[:, :, i0 + 1] * f[None, None, :]
    n_blobs = rng.poisson(12 * cfg.clutter_density)
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    for _ in range(n_blobs):
        cx, cy = rng.uniform(0, size, 2)
        rad = rng.uniform(1.5, 4.0)
        grey = rng.uniform(0.1, 0.9)
        tint = rng.uniform(-0.08, 0.08, 3)
        if rng.random() < 0.5:
            m = (xs - cx) ** 2 + (ys - cy) ** 2 <= rad * rad
        else:
            m = (np.abs(xs - cx) <= rad) & (np.abs(ys - cy) <= rad * 0.6)
        img[:, m] = (grey + tint)[:, None]
    img += rng.normal(0, 0.03, size=img.shape)
    return img


def render_scene(rng: np.random.Generator, cfg: SyntheticConfig, objs: list[ShapeSpec]
                 ) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    img = _background(rng, cfg)
    masks: dict[int, np.ndarray] = {}
    for o in objs:
        m = shape_mask(o, cfg.image_size)
        pat = _pattern(o, cfg.image_size)
        col = np.where(pat[None], np.array(o.color2)[:, None, None], np.array(o.color)[:, None, None])
        shade = 1.0 + rng.normal(0, 0.04, size=(1, cfg.image_size, cfg.image_size))
        img = np.where(m[None], col * shade, img)
        masks[o.category] = masks.get(o.category, np.zeros_like(m)) | m
    return np.clip(img, 0.0, 1.0), {c: m.astype(np.uint8) for c, m in masks.items()}


def generate_synthetic_dataset(cfg: SyntheticConfig, root) -> "DatasetIndex":
    """Render the dataset under ``root`` and return its index.

    Layout: ``images/<name>.ppm``, ``masks/<category>/<name>.pgm``, ``index.tsv``.
    """
    from .episodes import DatasetIndex, write_index

    rng = np.random.default_rng(cfg.seed)
    rows: list[tuple[str, list[int]]] = []
    try:
        os.makedirs(os.path.join(root, "images"), exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    for cat in range(1, cfg.num_categories + 1):
        for i in range(cfg.per_category):
            name = f"c{cat:02d}_{i:04d}"
            objs = sample_scene(rng, cfg, cat)
            img, masks = render_scene(rng, cfg, objs)
            save_image(os.path.join(root, "images", f"{name}.ppm"), img)
            for c, m in sorted(masks.items()):
                save_mask(os.path.join(root, "masks", str(c), f"{name}.pgm"), m)
            rows.append((name, sorted(masks)))
    write_index(root, rows)
    return DatasetIndex.load(root)
