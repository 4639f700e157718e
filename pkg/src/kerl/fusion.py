"""Classification heads on top of per-location sketched features.

``kerl``         gate = sigmoid(g([f_i[loc], f_g])), f = sum_loc gate * f_i[loc]
``self_guided``  same gate network without the knowledge slot
``concat``       sum-pool f_i, concatenate f_g, affine classifier
``baseline``     sum-pool f_i, affine classifier

``g`` is affine -> tanh -> affine. Feature maps are ``(..., H', W', c)`` and
knowledge vectors ``(..., F)`` with matching leading batch axes.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

VARIANTS = ("baseline", "self_guided", "concat", "kerl")
GATED = ("self_guided", "kerl")
USES_KNOWLEDGE = ("concat", "kerl")


@dataclass
class FusionParams:
    cls_w: np.ndarray
    cls_b: np.ndarray
    g1_w: np.ndarray | None = None
    g1_b: np.ndarray | None = None
    g2_w: np.ndarray | None = None
    g2_b: np.ndarray | None = None

    @classmethod
    def init(
        cls,
        variant: str,
        c: int,
        n_classes: int,
        knowledge_dim: int = 0,
        hidden: int | None = None,
        gate_mode: str = "channel",
        rng=None,
    ) -> "FusionParams":
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        if gate_mode not in ("channel", "scalar"):
            raise ValueError(f"gate_mode must be 'channel' or 'scalar', got {gate_mode!r}")
        rng = np.random.default_rng(rng)
        k = knowledge_dim if variant in USES_KNOWLEDGE else 0
        cls_in = c + k if variant == "concat" else c
        p = cls(*_affine(rng, cls_in, n_classes))
        if variant in GATED:
            m = hidden if hidden is not None else max(64, c // 2)
            p.g1_w, p.g1_b = _affine(rng, c + k, m)
            p.g2_w, p.g2_b = _affine(rng, m, c if gate_mode == "channel" else 1)
            # gates start at exactly 0.5 so a fresh gated head matches sum pooling up to scale
            p.g2_w[...] = 0.0
        return p

    @property
    def gated(self) -> bool:
        return self.g1_w is not None

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}

    @classmethod
    def zeros_like(cls, other: "FusionParams") -> "FusionParams":
        return cls(**{k: np.zeros_like(v) for k, v in other.arrays().items()})


def _affine(rng, n_in, n_out):
    bound = 1.0 / np.sqrt(n_in)
    return rng.uniform(-bound, bound, size=(n_out, n_in)), np.zeros(n_out)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _gate_forward(f_i, f_g, p: FusionParams):
    c = f_i.shape[-1]
    if p.g1_w.shape[1] != c + (0 if f_g is None else f_g.shape[-1]):
        width = p.g1_w.shape[1]
        got = c + (0 if f_g is None else f_g.shape[-1])
        raise ValueError(f"gate network expects input width {width}, got {got}")
    pre1 = f_i @ p.g1_w[:, :c].T + p.g1_b
    if f_g is not None:
        knowledge = f_g @ p.g1_w[:, c:].T
        pre1 = pre1 + knowledge[..., None, None, :]
    hid = np.tanh(pre1)
    gates = _sigmoid(hid @ p.g2_w.T + p.g2_b)
    f = (gates * f_i).sum(axis=(-3, -2))
    return f, gates, hid


def gated_pool(f_i, f_g, params: FusionParams):
    """Knowledge-gated pooling. Returns ``(f, gates)``."""
    f_i = _check_map(f_i)
    f_g = np.asarray(f_g, dtype=np.float64)
    f, gates, _ = _gate_forward(f_i, f_g, params)
    return f, gates


def self_guided_pool(f_i, params: FusionParams):
    f_i = _check_map(f_i)
    f, gates, _ = _gate_forward(f_i, None, params)
    return f, gates


def classify(f, params: FusionParams):
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != params.cls_w.shape[1]:
        raise ValueError(f"classifier expects {params.cls_w.shape[1]} features, got {f.shape[-1]}")
    return f @ params.cls_w.T + params.cls_b


def baseline_head(f_i, params: FusionParams):
    return classify(_check_map(f_i).sum(axis=(-3, -2)), params)


def concat_head(f_i, f_g, params: FusionParams):
    pooled = _check_map(f_i).sum(axis=(-3, -2))
    return classify(np.concatenate([pooled, np.asarray(f_g, dtype=np.float64)], axis=-1), params)


def _check_map(f_i):
    f_i = np.asarray(f_i, dtype=np.float64)
    if f_i.ndim < 3:
        raise ValueError(f"feature map must be (..., H', W', c), got shape {f_i.shape}")
    return f_i


def _l2(f, eps):
    norm = np.sqrt((f * f).sum(axis=-1, keepdims=True) + eps)
    return f / norm, norm


def head_forward(variant: str, f_i, f_g, params: FusionParams, l2_normalize: bool = False, eps: float = 1e-12):
    """Scores for any variant plus the cache consumed by :func:`fusion_backward`.

    ``l2_normalize`` rescales the pooled image feature to unit length before it
    reaches the classifier (and before the knowledge vector is appended for
    ``concat``).
    """
    f_i = _check_map(f_i)
    if variant in USES_KNOWLEDGE:
        if f_g is None:
            raise ValueError(f"variant {variant!r} needs a knowledge representation")
        f_g = np.asarray(f_g, dtype=np.float64)
    else:
        f_g = None
    gates = hid = None
    if variant in GATED:
        f, gates, hid = _gate_forward(f_i, f_g, params)
    else:
        f = f_i.sum(axis=(-3, -2))
    norm = None
    if l2_normalize:
        f, norm = _l2(f, eps)
    feat = np.concatenate([f, f_g], axis=-1) if variant == "concat" else f
    scores = classify(feat, params)
    cache = dict(variant=variant, f_i=f_i, f_g=f_g, f=f, feat=feat, gates=gates, hid=hid, norm=norm)
    return scores, cache


def fusion_backward(cache, params: FusionParams, grad_scores):
    """Backpropagate dL/dscores. Returns ``(FusionParams grads, dL/df_i, dL/df_g)``.

    ``dL/df_g`` is ``None`` for variants that do not consume knowledge.
    """
    variant = cache["variant"]
    f_i, f_g, f = cache["f_i"], cache["f_g"], cache["f"]
    grad_scores = np.asarray(grad_scores, dtype=np.float64)
    g = FusionParams.zeros_like(params)
    g.cls_w += _outer_sum(grad_scores, cache["feat"])
    g.cls_b += grad_scores.reshape(-1, grad_scores.shape[-1]).sum(axis=0)
    dfeat = grad_scores @ params.cls_w
    c = f_i.shape[-1]
    df = dfeat[..., :c]
    dfg = dfeat[..., c:].copy() if variant == "concat" else None
    if cache["norm"] is not None:
        df = (df - f * (f * df).sum(axis=-1, keepdims=True)) / cache["norm"]

    if variant not in GATED:
        return g, np.broadcast_to(df[..., None, None, :], f_i.shape).copy(), dfg

    gates, hid = cache["gates"], cache["hid"]
    df_loc = df[..., None, None, :]
    dfi = df_loc * gates
    dgates = df_loc * f_i
    if gates.shape[-1] == 1:
        dgates = dgates.sum(axis=-1, keepdims=True)
    dpre2 = dgates * gates * (1.0 - gates)
    g.g2_w += _outer_sum(dpre2, hid)
    g.g2_b += dpre2.reshape(-1, dpre2.shape[-1]).sum(axis=0)
    dpre1 = (dpre2 @ params.g2_w) * (1.0 - hid * hid)
    g.g1_w[:, :c] += _outer_sum(dpre1, f_i)
    dfi += dpre1 @ params.g1_w[:, :c]
    dk = dpre1.sum(axis=(-3, -2))
    g.g1_b += dk.reshape(-1, dk.shape[-1]).sum(axis=0)
    if variant == "kerl":
        g.g1_w[:, c:] += _outer_sum(dk, f_g)
        dfg = dk @ params.g1_w[:, c:]
    return g, dfi, dfg


def _outer_sum(d, inp):
    return d.reshape(-1, d.shape[-1]).T @ inp.reshape(-1, inp.shape[-1])
