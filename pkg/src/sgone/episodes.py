"""Fold protocol, dataset index, and episodic sampling."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .pnm import load_image, load_mask, pad_to_multiple

VOC_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle",
    "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person",
    "potted plant", "sheep", "sofa", "train", "tv/monitor",
)

NUM_FOLDS = 4


class InsufficientData(ValueError):
    pass


@dataclass(frozen=True)
class FoldSpec:
    fold_index: int
    train_categories: frozenset[int]
    test_categories: frozenset[int]

    def __post_init__(self):
        if self.train_categories & self.test_categories:
            raise ValueError("train and test categories overlap")


def build_folds(num_categories: int = 20, fold_index: int = 0) -> FoldSpec:
    """Fold ``i`` holds out the i-th consecutive block of ``num_categories / 4`` ids.

    For the 20 PASCAL categories, fold i tests {5i+1, ..., 5i+5}.
    """
    if not 0 <= fold_index < NUM_FOLDS:
        raise ValueError(f"fold_index must be in [0, {NUM_FOLDS - 1}], got {fold_index}")
    if num_categories % NUM_FOLDS or num_categories < NUM_FOLDS:
        raise ValueError(f"num_categories must be a positive multiple of {NUM_FOLDS}")
    size = num_categories // NUM_FOLDS
    test = frozenset(range(size * fold_index + 1, size * fold_index + size + 1))
    train = frozenset(range(1, num_categories + 1)) - test
    return FoldSpec(fold_index, train, test)


def category_name(cat: int, num_categories: int = 20) -> str:
    if num_categories == len(VOC_CLASSES):
        return VOC_CLASSES[cat - 1]
    return f"class{cat}"


# ---------------------------------------------------------------------------
# dataset index


@dataclass(frozen=True)
class Record:
    name: str
    categories: tuple[int, ...]


def write_index(root, rows) -> None:
    with open(os.path.join(root, "index.tsv"), "w", encoding="utf-8") as fh:
        fh.write("name\tcategories\n")
        for name, cats in rows:
            fh.write(f"{name}\t{','.join(str(c) for c in cats)}\n")


@dataclass(frozen=True)
class DatasetIndex:
    root: str
    records: tuple[Record, ...]
    by_category: dict[int, tuple[str, ...]] = field(compare=False, hash=False)

    @classmethod
    def load(cls, root) -> "DatasetIndex":
        path = os.path.join(root, "index.tsv")
        records = []
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        for lineno, line in enumerate(lines, 1):
            if lineno == 1 and line.startswith("name\t"):
                continue
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'name<TAB>categories'")
            cats = tuple(sorted(int(c) for c in parts[1].split(",") if c))
            records.append(Record(parts[0], cats))
        return cls.from_records(root, records)

    @classmethod
    def from_records(cls, root, records) -> "DatasetIndex":
        by_cat: dict[int, list[str]] = {}
        for r in records:
            for c in r.categories:
                by_cat.setdefault(c, []).append(r.name)
        return cls(str(root), tuple(records), {c: tuple(v) for c, v in sorted(by_cat.items())})

    def image_path(self, name: str) -> str:
        return os.path.join(self.root, "images", f"{name}.ppm")

    def mask_path(self, name: str, category: int) -> str:
        return os.path.join(self.root, "masks", str(category), f"{name}.pgm")

    def image(self, name: str) -> np.ndarray:
        return _cached_image(self.image_path(name))

    def mask(self, name: str, category: int) -> np.ndarray:
        return _cached_mask(self.mask_path(name, category))

    def restrict(self, categories) -> "DatasetIndex":
        """Sub-index of the images whose every category lies in ``categories``."""
        allowed = set(categories)
        return DatasetIndex.from_records(
            self.root, [r for r in self.records if set(r.categories) <= allowed])

    def categories(self) -> list[int]:
        return sorted(self.by_category)


@lru_cache(maxsize=4096)
def _cached_image(path: str) -> np.ndarray:
    img = pad_to_multiple(load_image(path), 8)
    img.setflags(write=False)
    return img


@lru_cache(maxsize=8192)
def _cached_mask(path: str) -> np.ndarray:
    m = pad_to_multiple(load_mask(path), 8)
    m.setflags(write=False)
    return m


# ---------------------------------------------------------------------------
# episodes


@dataclass
class Episode:
    query_image: np.ndarray
    query_mask: np.ndarray
    supports: list[tuple[np.ndarray, np.ndarray]]
    category: int
    query_name: str = ""
    support_names: tuple[str, ...] = ()

    @property
    def K(self) -> int:
        return len(self.supports)

    @property
    def episode_id(self) -> str:
        return f"{self.category}:{self.query_name}<-{','.join(self.support_names)}"

    def with_supports(self, supports, names) -> "Episode":
        return Episode(self.query_image, self.query_mask, list(supports), self.category,
                       self.query_name, tuple(names))


def sample_episode(index: DatasetIndex, categories, K: int, rng: np.random.Generator) -> Episode:
    """Category uniformly, then a query, then K distinct supports other than the query.

    Supports are the first K of a permutation of the remaining images, so
    episodes drawn with different K from equal RNG states share their query
    and the smaller support set is a prefix of the larger.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    cats = sorted(categories)
    if not cats:
        raise InsufficientData("no categories to sample from")
    for c in cats:
        n = len(index.by_category.get(c, ()))
        if n < K + 1:
            raise InsufficientData(f"category {c} has {n} images, need at least {K + 1}")
    cat = cats[int(rng.integers(len(cats)))]
    names = index.by_category[cat]
    qi = int(rng.integers(len(names)))
    rest = [n for i, n in enumerate(names) if i != qi]
    order = rng.permutation(len(rest))
    sup_names = tuple(rest[i] for i in order[:K])
    qname = names[qi]
    supports = [(index.image(n), index.mask(n, cat)) for n in sup_names]
    return Episode(index.image(qname), index.mask(qname, cat), supports, cat, qname, sup_names)
