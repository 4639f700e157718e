"""Highlighted-region refinement.

Location scores are channel sums of a feature map. Every location proposes a
square box (in feature cells) centred on it; greedy non-maximum suppression
keeps the top few, which are mapped back to image crops.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np


@dataclass(frozen=True)
class Region:
    center: tuple[int, int]
    size: int
    score: float
    # clipped box in feature cells: (row0, col0, row1, col1), half-open
    box: tuple[int, int, int, int]

    @property
    def area(self) -> int:
        r0, c0, r1, c1 = self.box
        return (r1 - r0) * (c1 - c0)


@dataclass(frozen=True)
class CropSpec:
    x: int
    y: int
    w: int
    h: int
    resize: int


def location_scores(fmap) -> np.ndarray:
    """Sum over the channel axis of a ``(..., H', W', c)`` map."""
    return np.asarray(fmap, dtype=np.float64).sum(axis=-1)


def normalize_map(scores) -> np.ndarray:
    """Min-max rescale each ``(H', W')`` map to ``[0, 1]``; constant maps become zeros."""
    scores = np.asarray(scores, dtype=np.float64)
    lo = scores.min(axis=(-2, -1), keepdims=True)
    hi = scores.max(axis=(-2, -1), keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (scores - lo) / safe, 0.0)


def region_box(row: int, col: int, size: int, shape) -> tuple[int, int, int, int]:
    n_rows, n_cols = shape
    r0, c0 = row - size // 2, col - size // 2
    return max(r0, 0), max(c0, 0), min(r0 + size, n_rows), min(c0 + size, n_cols)


def box_iou(a, b) -> float:
    ir = min(a[2], b[2]) - max(a[0], b[0])
    ic = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(ir, 0) * max(ic, 0)
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def propose_regions(scores, size: int = 6, k: int = 3, iou_threshold: float = 0.5) -> list[Region]:
    """Greedy NMS over one box per location.

    Candidates are visited by descending score, ties in row-major order. A
    candidate is dropped when its IoU with any kept box exceeds the threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or min(scores.shape) < 1:
        raise ValueError(f"score map must be 2-D and non-empty, got shape {scores.shape}")
    n_cols = scores.shape[1]
    flat = scores.ravel()
    order = np.argsort(-flat, kind="stable")
    kept: list[Region] = []
    for idx in order:
        row, col = divmod(int(idx), n_cols)
        box = region_box(row, col, size, scores.shape)
        if any(box_iou(box, r.box) > iou_threshold for r in kept):
            continue
        kept.append(Region(center=(row, col), size=size, score=float(flat[idx]), box=box))
        if len(kept) == k:
            break
    return kept


def crop_and_map(region: Region, image_dims, stride: int = 16, crop: int = 96, resize: int = 224) -> CropSpec:
    """Map a feature-cell region to a clipped pixel box ``crop`` wide around its centre."""
    img_h, img_w = image_dims
    cy = (region.center[0] + 0.5) * stride
    cx = (region.center[1] + 0.5) * stride
    half = crop / 2
    y0, x0 = max(int(round(cy - half)), 0), max(int(round(cx - half)), 0)
    y1, x1 = min(int(round(cy + half)), img_h), min(int(round(cx + half)), img_w)
    if y1 <= y0 or x1 <= x0:
        raise ValueError(f"region {region.center} maps outside a {img_h}x{img_w} image")
    return CropSpec(x=x0, y=y0, w=x1 - x0, h=y1 - y0, resize=resize)


def fuse_scores(kerl_scores, region_scores) -> np.ndarray:
    """Elementwise mean of two probability vectors."""
    a = np.asarray(kerl_scores, dtype=np.float64)
    b = np.asarray(region_scores, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"score shapes differ: {a.shape} vs {b.shape}")
    return 0.5 * (a + b)


def format_region_records(records: Iterable[tuple[str, CropSpec, float]]) -> str:
    """Text export, one ``image_id x y w h score`` line per region."""
    lines = ["# image_id x y w h score"]
    for image_id, spec, score in records:
        lines.append(f"{image_id} {spec.x} {spec.y} {spec.w} {spec.h} {score!r}")
    return "\n".join(lines) + "\n"
