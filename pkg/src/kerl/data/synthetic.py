"""Synthetic fine-grained dataset with ground-truth attribute regions.

Attributes are grouped into parts (``part_k::value_v``). Every category picks
one value per part; a sample renders each of its category's attributes as a
textured colour patch near the part's anchor, over a noisy background with
randomly coloured clutter patches. Patches are occasionally dropped
(occlusion), in which case the attribute score is 0.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from ..knowledge_graph import KnowledgeGraph, NodeRegistry
from .dataset import Dataset

TEXTURES = ("solid", "hstripe", "vstripe", "checker")


@dataclass(frozen=True)
class SyntheticConfig:
    n_categories: int = 8
    n_attributes: int = 12
    n_parts: int = 4
    image_size: int = 64
    train_per_class: int = 40
    test_per_class: int = 20
    patch: int = 12
    jitter: int = 4
    drop_prob: float = 0.15
    noise: float = 0.08
    n_clutter: int = 4
    clutter_patch: int = 12

    def __post_init__(self):
        if self.n_attributes % self.n_parts:
            raise ValueError("n_attributes must be a multiple of n_parts")
        values = self.n_attributes // self.n_parts
        if values ** self.n_parts < self.n_categories:
            raise ValueError("not enough distinct attribute combinations for the categories")


@dataclass
class SyntheticData:
    train: Dataset
    test: Dataset
    truth: KnowledgeGraph  # 0/1 category-attribute incidence
    anchors: np.ndarray  # (n_parts, 2) patch centres in pixels


def _appearance(n_attributes):
    colors = []
    for j in range(n_attributes):
        hue = (j * 0.61803398875) % 1.0
        light = 0.45 if j % 2 else 0.6
        colors.append(np.array(colorsys.hls_to_rgb(hue, light, 0.9)))
    textures = [TEXTURES[(j // 2) % len(TEXTURES)] for j in range(n_attributes)]
    return colors, textures


def _texture_mask(kind, size):
    yy, xx = np.mgrid[:size, :size]
    if kind == "solid":
        return np.ones((size, size))
    if kind == "hstripe":
        return ((yy // 2) % 2 == 0).astype(float)
    if kind == "vstripe":
        return ((xx // 2) % 2 == 0).astype(float)
    return (((yy // 3) + (xx // 3)) % 2 == 0).astype(float)


def _anchors(cfg: SyntheticConfig):
    side = int(np.ceil(np.sqrt(cfg.n_parts)))
    step = cfg.image_size / side
    pts = [((k // side + 0.5) * step, (k % side + 0.5) * step) for k in range(cfg.n_parts)]
    return np.array(pts)


def _paint(img, top, left, color, texture, size):
    tex = _texture_mask(texture, size)[..., None]
    region = img[top:top + size, left:left + size]
    region[...] = tex * color + (1 - tex) * 0.5 * color


def gen_synthetic(cfg: SyntheticConfig | None = None, seed: int = 0) -> SyntheticData:
    cfg = cfg or SyntheticConfig()
    rng = np.random.default_rng(seed)
    n_values = cfg.n_attributes // cfg.n_parts
    categories = tuple(f"category_{i}" for i in range(cfg.n_categories))
    attributes = tuple(f"part{k}::value{v}" for k in range(cfg.n_parts) for v in range(n_values))
    registry = NodeRegistry(categories, attributes)

    signatures = set()
    incidence = np.zeros((cfg.n_categories, cfg.n_attributes), dtype=bool)
    for i in range(cfg.n_categories):
        while True:
            sig = tuple(int(v) for v in rng.integers(0, n_values, size=cfg.n_parts))
            if sig not in signatures:
                break
        signatures.add(sig)
        for k, v in enumerate(sig):
            incidence[i, k * n_values + v] = True

    colors, textures = _appearance(cfg.n_attributes)
    anchors = _anchors(cfg)

    def sample(label, force_all):
        size = cfg.image_size
        base = rng.uniform(0.2, 0.8, size=3)
        img = np.broadcast_to(base, (size, size, 3)).copy()
        for _ in range(cfg.n_clutter):
            s = cfg.clutter_patch
            top, left = rng.integers(0, size - s + 1, size=2)
            color = rng.uniform(0.0, 1.0, size=3)
            _paint(img, top, left, color, TEXTURES[rng.integers(len(TEXTURES))], s)
        mask = np.full((size, size), -1, dtype=np.int16)
        scores = np.zeros(cfg.n_attributes)
        for j in np.flatnonzero(incidence[label]):
            if not force_all and rng.random() < cfg.drop_prob:
                continue
            part = j // n_values
            s = cfg.patch
            cy, cx = anchors[part] + rng.integers(-cfg.jitter, cfg.jitter + 1, size=2)
            top = int(np.clip(round(cy - s / 2), 0, size - s))
            left = int(np.clip(round(cx - s / 2), 0, size - s))
            _paint(img, top, left, colors[j], textures[j], s)
            mask[top:top + s, left:left + s] = j
            scores[j] = 1.0
        img = img + rng.normal(0.0, cfg.noise, size=img.shape)
        return (np.clip(img, 0, 1) * 255).round().astype(np.uint8), mask, scores

    def split(per_class, name, force_first):
        imgs, masks, scores, labels, ids = [], [], [], [], []
        for label in range(cfg.n_categories):
            for k in range(per_class):
                img, mask, sc = sample(label, force_first and k == 0)
                imgs.append(img)
                masks.append(mask)
                scores.append(sc)
                labels.append(label)
                ids.append(f"{name}_{label}_{k}")
        return Dataset(
            labels=np.array(labels),
            attribute_scores=np.array(scores),
            registry=registry,
            images=np.stack(imgs),
            masks=np.stack(masks),
            ids=ids,
        )

    train = split(cfg.train_per_class, "train", True)
    test = split(cfg.test_per_class, "test", False)
    truth = KnowledgeGraph(registry, incidence.astype(np.float64))
    return SyntheticData(train=train, test=test, truth=truth, anchors=anchors)
