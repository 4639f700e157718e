"""Compact bilinear pooling with Tensor Sketch.

Each ``d``-dimensional local descriptor ``x`` is mapped to a ``c``-dimensional
vector whose inner products approximate ``<x, y>**2``: two independent count
sketches are combined by circular convolution, computed in the Fourier
domain. Pooling is applied per location; nothing is summed spatially.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class SketchParams:
    d: int
    c: int
    seed: int
    h1: np.ndarray
    h2: np.ndarray
    s1: np.ndarray
    s2: np.ndarray

    def projection(self, which: int) -> np.ndarray:
        """Dense ``(d, c)`` signed projection matrix for count sketch 1 or 2."""
        cached = self.__dict__.get(f"_proj{which}")
        if cached is None:
            h, s = (self.h1, self.s1) if which == 1 else (self.h2, self.s2)
            cached = np.zeros((self.d, self.c))
            cached[np.arange(self.d), h] = s
            cached.setflags(write=False)
            object.__setattr__(self, f"_proj{which}", cached)
        return cached

    def __eq__(self, other):
        if not isinstance(other, SketchParams):
            return NotImplemented
        return (
            (self.d, self.c, self.seed) == (other.d, other.c, other.seed)
            and all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("h1", "h2", "s1", "s2"))
        )


def make_sketch_params(d: int, c: int, seed: int = 0) -> SketchParams:
    if d < 1 or c < 1:
        raise ValueError(f"sketch dims must be positive, got d={d}, c={c}")
    rng = np.random.default_rng(seed)
    h1 = rng.integers(0, c, size=d)
    h2 = rng.integers(0, c, size=d)
    s1 = rng.integers(0, 2, size=d) * 2 - 1
    s2 = rng.integers(0, 2, size=d) * 2 - 1
    for arr in (h1, h2, s1, s2):
        arr.setflags(write=False)
    return SketchParams(d=d, c=c, seed=seed, h1=h1, h2=h2, s1=s1.astype(np.int64), s2=s2.astype(np.int64))


def count_sketch(x, h, s, c: int) -> np.ndarray:
    """``out[..., k] = sum over j with h[j] == k of s[j] * x[..., j]``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros(x.shape[:-1] + (c,))
    np.add.at(out, (..., np.asarray(h)), x * np.asarray(s))
    return out


def _sketches(x, params: SketchParams):
    return x @ params.projection(1), x @ params.projection(2)


def tensor_sketch(x, params: SketchParams) -> np.ndarray:
    """Tensor Sketch of the last axis of ``x`` (any leading shape)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.d:
        raise ValueError(f"expected {params.d} channels, got {x.shape[-1]}")
    u, v = _sketches(x, params)
    c = params.c
    return np.fft.irfft(np.fft.rfft(u, axis=-1) * np.fft.rfft(v, axis=-1), n=c, axis=-1)


def per_location_pool(fmap, params: SketchParams, signed_sqrt: bool = False) -> np.ndarray:
    """Sketch every location of a ``(..., H', W', d)`` feature map.

    ``signed_sqrt`` applies ``sign(y) * sqrt(|y|)`` per location afterwards.
    """
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.ndim < 3:
        raise ValueError(f"feature map must be at least 3-D (H', W', d), got shape {fmap.shape}")
    if fmap.shape[-1] != params.d:
        raise ValueError(f"feature map has {fmap.shape[-1]} channels, sketch expects {params.d}")
    out = tensor_sketch(fmap, params)
    if signed_sqrt:
        out = np.sign(out) * np.sqrt(np.abs(out))
    return out


def cbp_backward(fmap, params: SketchParams, grad_out, signed_sqrt: bool = False, eps: float = 1e-12):
    """Gradient of a scalar loss w.r.t. the feature map given dL/d(pooled map).

    With ``y = u (*) v`` (circular convolution), ``dL/du`` is the circular
    cross-correlation of the upstream gradient with ``v`` and symmetrically
    for ``v``; both pull back through the transposed count-sketch projections.
    """
    fmap = np.asarray(fmap, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    c = params.c
    u, v = _sketches(fmap, params)
    fu = np.fft.rfft(u, axis=-1)
    fv = np.fft.rfft(v, axis=-1)
    if signed_sqrt:
        y = np.fft.irfft(fu * fv, n=c, axis=-1)
        grad_out = grad_out * 0.5 / np.sqrt(np.abs(y) + eps)
    fg = np.fft.rfft(grad_out, axis=-1)
    du = np.fft.irfft(fg * np.conj(fv), n=c, axis=-1)
    dv = np.fft.irfft(fg * np.conj(fu), n=c, axis=-1)
    return du @ params.projection(1).T + dv @ params.projection(2).T
