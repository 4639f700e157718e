"""Small fully convolutional feature extractor (NHWC, ReLU after every layer)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BackboneConfig:
    # (out_channels, kernel, stride) per layer
    layers: tuple[tuple[int, int, int], ...] = ((16, 3, 2), (32, 3, 2), (64, 3, 2))
    in_channels: int = 3

    @property
    def out_channels(self) -> int:
        return self.layers[-1][0] if self.layers else self.in_channels

    @property
    def stride(self) -> int:
        return int(np.prod([s for _, _, s in self.layers])) if self.layers else 1

    def output_size(self, size: int) -> int:
        for _, k, s in self.layers:
            size = (size + 2 * (k // 2) - k) // s + 1
        return size

    def validate(self, input_size: int) -> None:
        if self.output_size(input_size) < 1:
            raise ValueError(f"backbone reduces a {input_size}px input to nothing")


def vgg16_scale_backbone() -> BackboneConfig:
    """Geometry-only stand-in for VGG16 conv layers: 512 channels, stride 16.

    A 448px input yields 28x28 maps.
    """
    return BackboneConfig(layers=((64, 3, 2), (128, 3, 2), (256, 3, 2), (512, 3, 2)))


def init_backbone(cfg: BackboneConfig, rng=None) -> list[dict[str, np.ndarray]]:
    rng = np.random.default_rng(rng)
    params = []
    c_in = cfg.in_channels
    for c_out, k, _ in cfg.layers:
        std = np.sqrt(2.0 / (k * k * c_in))
        params.append({"w": rng.normal(0.0, std, size=(k, k, c_in, c_out)), "b": np.zeros(c_out)})
        c_in = c_out
    return params


def preprocess(images) -> np.ndarray:
    return np.asarray(images, dtype=np.float64) / 255.0 - 0.5


def _im2col(x, k, stride):
    pad = k // 2
    n, h, w, c = x.shape
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = [
        xp[:, i:i + stride * (h_out - 1) + 1:stride, j:j + stride * (w_out - 1) + 1:stride, :]
        for i in range(k) for j in range(k)
    ]
    return np.concatenate(cols, axis=-1), xp.shape


def _col2im(dcols, xp_shape, k, stride, c):
    pad = k // 2
    n, hp, wp, _ = xp_shape
    h_out, w_out = dcols.shape[1:3]
    dxp = np.zeros(xp_shape)
    for idx in range(k * k):
        i, j = divmod(idx, k)
        dxp[:, i:i + stride * (h_out - 1) + 1:stride, j:j + stride * (w_out - 1) + 1:stride, :] += (
            dcols[..., idx * c:(idx + 1) * c]
        )
    return dxp[:, pad:hp - pad, pad:wp - pad, :]


def backbone_forward(x, params, cfg: BackboneConfig):
    """``x`` is a preprocessed (N, H, W, C) float batch. Returns ``(fmap, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[-1] != cfg.in_channels:
        raise ValueError(f"expected (N, H, W, {cfg.in_channels}) input, got {x.shape}")
    cache = []
    for p, (c_out, k, stride) in zip(params, cfg.layers):
        cols, xp_shape = _im2col(x, k, stride)
        pre = cols @ p["w"].reshape(-1, c_out) + p["b"]
        out = np.maximum(pre, 0.0)
        cache.append((cols, xp_shape, x.shape[-1], out))
        x = out
    return x, cache


def backbone_backward(cache, params, cfg: BackboneConfig, grad_out, need_input_grad: bool = False):
    """Parameter gradients (list of dicts mirroring ``params``), plus dL/dx if asked."""
    grads = [None] * len(params)
    d = np.asarray(grad_out, dtype=np.float64)
    for li in range(len(params) - 1, -1, -1):
        cols, xp_shape, c_in, out = cache[li]
        c_out, k, stride = cfg.layers[li]
        dpre = d * (out > 0)
        flat = dpre.reshape(-1, c_out)
        grads[li] = {
            "w": (cols.reshape(-1, cols.shape[-1]).T @ flat).reshape(params[li]["w"].shape),
            "b": flat.sum(axis=0),
        }
        if li == 0 and not need_input_grad:
            break
        dcols = dpre @ params[li]["w"].reshape(-1, c_out).T
        d = _col2im(dcols, xp_shape, k, stride, c_in)
    return (grads, d) if need_input_grad else grads
