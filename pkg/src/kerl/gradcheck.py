"""Central finite-difference gradient checks for every trainable block."""
from __future__ import annotations

import numpy as np

from . import ggnn
from .cbp import cbp_backward, make_sketch_params, per_location_pool
from .data.backbone import BackboneConfig, backbone_backward, backbone_forward, init_backbone
from .fusion import VARIANTS, FusionParams, fusion_backward, head_forward
from .knowledge_graph import KnowledgeGraph, NodeRegistry


def numeric_grad(fn, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        hi = fn()
        x[idx] = orig - step
        lo = fn()
        x[idx] = orig
        grad[idx] = (hi - lo) / (2 * step)
    return grad


def rel_error(analytic, numeric) -> float:
    """Largest entrywise deviation relative to the tensor's largest magnitude."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale < 1e-12:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def random_graph(n_categories, n_attributes, rng) -> KnowledgeGraph:
    s = rng.uniform(0, 1, size=(n_categories, n_attributes))
    s[rng.random(s.shape) < 0.4] = 0.0
    reg = NodeRegistry(tuple(f"c{i}" for i in range(n_categories)), tuple(f"p::a{j}" for j in range(n_attributes)))
    return KnowledgeGraph(reg, s)


def check_ggnn(rng, n_categories=2, n_attributes=3, cfg=None) -> float:
    cfg = cfg or ggnn.GgnnConfig(n=3, out_dim=2, t_steps=2)
    graph = random_graph(n_categories, n_attributes, rng)
    params = ggnn.GgnnParams.init(cfg, rng)
    for arr in params.arrays().values():
        arr += rng.normal(0, 0.3, size=arr.shape)
    scores = rng.uniform(0, 1, size=n_categories)
    weight = rng.normal(size=graph.n_nodes * cfg.out_dim)

    def loss():
        _, f_g = ggnn.run(graph, scores, params, cfg)
        return float(weight @ f_g)

    grads, dscores = ggnn.backward(graph, scores, params, cfg, weight)
    worst = max(rel_error(getattr(grads, k), numeric_grad(loss, v)) for k, v in params.arrays().items())
    return max(worst, rel_error(dscores, numeric_grad(loss, scores)))


def check_cbp(rng, d=6, c=16, shape=(2, 2)) -> float:
    sketch = make_sketch_params(d, c, int(rng.integers(1 << 30)))
    fmap = rng.normal(size=shape + (d,))
    weight = rng.normal(size=shape + (c,))

    def loss():
        return float((weight * per_location_pool(fmap, sketch)).sum())

    return rel_error(cbp_backward(fmap, sketch, weight), numeric_grad(loss, fmap))


def check_fusion(rng, variant="kerl", c=8, knowledge_dim=5, n_classes=3, hidden=6, gate_mode="channel",
                 l2_normalize=False) -> float:
    params = FusionParams.init(variant, c, n_classes, knowledge_dim, hidden=hidden, gate_mode=gate_mode, rng=rng)
    for arr in params.arrays().values():
        arr += rng.normal(0, 0.2, size=arr.shape)
    f_i = rng.normal(size=(2, 2, 3, c))
    f_g = rng.normal(size=(2, knowledge_dim))
    weight = rng.normal(size=(2, n_classes))

    def loss():
        scores, _ = head_forward(variant, f_i, f_g, params, l2_normalize)
        return float((weight * scores).sum())

    _, cache = head_forward(variant, f_i, f_g, params, l2_normalize)
    grads, dfi, dfg = fusion_backward(cache, params, weight)
    worst = max(rel_error(getattr(grads, k), numeric_grad(loss, v)) for k, v in params.arrays().items())
    worst = max(worst, rel_error(dfi, numeric_grad(loss, f_i)))
    if dfg is not None:
        worst = max(worst, rel_error(dfg, numeric_grad(loss, f_g)))
    return worst


def check_backbone(rng, size=8) -> float:
    cfg = BackboneConfig(layers=((3, 3, 2), (4, 3, 1)), in_channels=2)
    params = init_backbone(cfg, rng)
    for layer in params:
        layer["b"] += rng.uniform(0.05, 0.2, size=layer["b"].shape)
    x = rng.normal(size=(2, size, size, 2))
    out, _ = backbone_forward(x, params, cfg)
    weight = rng.normal(size=out.shape)

    def loss():
        y, _ = backbone_forward(x, params, cfg)
        return float((weight * y).sum())

    _, cache = backbone_forward(x, params, cfg)
    grads, dx = backbone_backward(cache, params, cfg, weight, need_input_grad=True)
    worst = rel_error(dx, numeric_grad(loss, x))
    for layer, glayer in zip(params, grads):
        for k in layer:
            worst = max(worst, rel_error(glayer[k], numeric_grad(loss, layer[k])))
    return worst


def gradcheck_all(seed: int = 0) -> dict[str, float]:
    """Max relative error per block at tiny float64 dimensions."""
    rng = np.random.default_rng(seed)
    report = {
        "ggnn": max(check_ggnn(rng), check_ggnn(rng, 3, 5, ggnn.GgnnConfig(n=4, out_dim=3, t_steps=3))),
        "cbp": max(check_cbp(rng), check_cbp(rng, d=8, c=16, shape=(1, 3))),
        "fusion": max(check_fusion(rng, v) for v in VARIANTS),
        "backbone": check_backbone(rng),
    }
    return report
