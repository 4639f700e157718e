"""Gated graph neural network over the knowledge graph.

Category nodes are seeded with the classifier confidence for that category,
attribute nodes start at zero, and a GRU-style update propagates messages
along forward (``a_c``) and reverse (``a_c.T``) edges for ``t_steps``
iterations. A per-node affine output map on ``[h_T, x]`` produces the node
features whose concatenation is the knowledge representation.

All arrays may carry leading batch axes: states are ``(..., V, n)``.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .knowledge_graph import AdjacencyPair, KnowledgeGraph, adjacency


@dataclass(frozen=True)
class GgnnConfig:
    n: int = 10
    out_dim: int = 5
    t_steps: int = 5

    def __post_init__(self):
        if self.n < 1 or self.out_dim < 1 or self.t_steps < 0:
            raise ValueError(f"invalid GGNN config {self}")


@dataclass
class GgnnParams:
    w_z: np.ndarray
    w_r: np.ndarray
    w: np.ndarray
    u_z: np.ndarray
    u_r: np.ndarray
    u: np.ndarray
    b: np.ndarray
    o_w: np.ndarray
    o_b: np.ndarray

    @classmethod
    def init(cls, cfg: GgnnConfig, rng=None) -> "GgnnParams":
        rng = np.random.default_rng(rng)
        n, k = cfg.n, cfg.out_dim
        bound = 1.0 / np.sqrt(2 * n)

        def uni(*shape):
            return rng.uniform(-bound, bound, size=shape)

        return cls(
            w_z=uni(n, 2 * n), w_r=uni(n, 2 * n), w=uni(n, 2 * n),
            u_z=uni(n, n), u_r=uni(n, n), u=uni(n, n),
            b=np.zeros(2 * n),
            o_w=uni(k, 2 * n), o_b=np.zeros(k),
        )

    @classmethod
    def zeros_like(cls, other: "GgnnParams") -> "GgnnParams":
        return cls(**{f.name: np.zeros_like(getattr(other, f.name)) for f in fields(cls)})

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def validate(self, cfg: GgnnConfig) -> None:
        n, k = cfg.n, cfg.out_dim
        shapes = {
            "w_z": (n, 2 * n), "w_r": (n, 2 * n), "w": (n, 2 * n),
            "u_z": (n, n), "u_r": (n, n), "u": (n, n),
            "b": (2 * n,), "o_w": (k, 2 * n), "o_b": (k,),
        }
        for name, shape in shapes.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"GGNN parameter {name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"GGNN parameter {name} is not finite")


@dataclass
class NodeStates:
    h: np.ndarray
    x: np.ndarray


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _graph_dims(graph):
    if isinstance(graph, KnowledgeGraph):
        return graph.n_categories, graph.n_nodes
    n_cat, n_nodes = graph
    return int(n_cat), int(n_nodes)


def init_states(scores, graph, cfg: GgnnConfig) -> NodeStates:
    """Seed category node ``i`` with ``[s_i, 0, ..., 0]``; attributes with zeros."""
    scores = np.asarray(scores, dtype=np.float64)
    n_cat, n_nodes = _graph_dims(graph)
    if scores.shape[-1:] != (n_cat,):
        raise ValueError(f"expected {n_cat} category scores, got shape {scores.shape}")
    if not np.all(np.isfinite(scores)) or (scores < 0).any() or (scores > 1).any():
        raise ValueError("category scores must lie in [0, 1]")
    x = np.zeros(scores.shape[:-1] + (n_nodes, cfg.n))
    x[..., :n_cat, 0] = scores
    return NodeStates(h=x.copy(), x=x)


def _step(h, a_full, p: GgnnParams):
    n_nodes = h.shape[-2]
    fwd = a_full[:, :n_nodes].T @ h
    rev = a_full[:, n_nodes:].T @ h
    a = np.concatenate([fwd, rev], axis=-1) + p.b
    z = _sigmoid(a @ p.w_z.T + h @ p.u_z.T)
    r = _sigmoid(a @ p.w_r.T + h @ p.u_r.T)
    rh = r * h
    cand = np.tanh(a @ p.w.T + rh @ p.u.T)
    h_new = (1.0 - z) * h + z * cand
    return h_new, (h, a, z, r, rh, cand)


def _check_finite(h, t):
    bad = ~np.isfinite(h)
    if bad.any():
        node = int(np.argwhere(bad)[0][-2])
        raise FloatingPointError(f"non-finite hidden state at node {node} (step {t})")


def propagate_step(states: NodeStates, a_full, params: GgnnParams) -> NodeStates:
    a_full = np.asarray(a_full, dtype=np.float64)
    n_nodes = states.h.shape[-2]
    if a_full.shape != (n_nodes, 2 * n_nodes):
        raise ValueError(f"adjacency has shape {a_full.shape}, expected {(n_nodes, 2 * n_nodes)}")
    h_new, _ = _step(states.h, a_full, params)
    _check_finite(h_new, 1)
    return NodeStates(h=h_new, x=states.x)


def node_outputs(h, x, params: GgnnParams):
    return np.concatenate([h, x], axis=-1) @ params.o_w.T + params.o_b


def run(graph, scores, params: GgnnParams, cfg: GgnnConfig, adj: AdjacencyPair | None = None):
    """Roll out ``cfg.t_steps`` propagation steps.

    Returns the final ``NodeStates`` and the knowledge representation, a
    ``(..., V * out_dim)`` array of node outputs in node-index order.
    ``adj`` may be passed to skip rebuilding the adjacency matrices.
    """
    adj = adjacency(graph) if adj is None else adj
    states = init_states(scores, graph, cfg)
    h = states.h
    for t in range(cfg.t_steps):
        h, _ = _step(h, adj.a_full, params)
        _check_finite(h, t + 1)
    out = node_outputs(h, states.x, params)
    f_g = out.reshape(out.shape[:-2] + (-1,))
    return NodeStates(h=h, x=states.x), f_g


def backward(graph, scores, params: GgnnParams, cfg: GgnnConfig, grad_fg, adj: AdjacencyPair | None = None):
    """Reverse-mode gradients of a scalar loss through the rollout.

    ``grad_fg`` is dL/df_g with the same shape as the forward output. Returns
    ``(GgnnParams of gradients, dL/dscores)``; parameter gradients are summed
    over any batch axes.
    """
    adj = adjacency(graph) if adj is None else adj
    a_full = adj.a_full
    n_cat, n_nodes = _graph_dims(graph)
    states = init_states(scores, graph, cfg)
    x = states.x

    h = x
    caches = []
    for t in range(cfg.t_steps):
        h, cache = _step(h, a_full, params)
        caches.append(cache)

    grad_fg = np.asarray(grad_fg, dtype=np.float64)
    batch_shape = x.shape[:-2]
    if grad_fg.shape != batch_shape + (n_nodes * cfg.out_dim,):
        raise ValueError(
            f"upstream gradient has shape {grad_fg.shape}, expected {batch_shape + (n_nodes * cfg.out_dim,)}"
        )
    d_out = grad_fg.reshape(batch_shape + (n_nodes, cfg.out_dim))
    n = cfg.n
    g = GgnnParams.zeros_like(params)

    hx = np.concatenate([h, x], axis=-1)
    g.o_w += _outer_sum(d_out, hx)
    g.o_b += d_out.reshape(-1, cfg.out_dim).sum(axis=0)
    d_hx = d_out @ params.o_w
    dh = d_hx[..., :n].copy()
    dx = d_hx[..., n:].copy()

    for h_prev, a, z, r, rh, cand in reversed(caches):
        dz = dh * (cand - h_prev)
        dcand = dh * z
        dh_prev = dh * (1.0 - z)

        dc_pre = dcand * (1.0 - cand * cand)
        g.w += _outer_sum(dc_pre, a)
        g.u += _outer_sum(dc_pre, rh)
        da = dc_pre @ params.w
        drh = dc_pre @ params.u
        dr = drh * h_prev
        dh_prev += drh * r

        dz_pre = dz * z * (1.0 - z)
        g.w_z += _outer_sum(dz_pre, a)
        g.u_z += _outer_sum(dz_pre, h_prev)
        da += dz_pre @ params.w_z
        dh_prev += dz_pre @ params.u_z

        dr_pre = dr * r * (1.0 - r)
        g.w_r += _outer_sum(dr_pre, a)
        g.u_r += _outer_sum(dr_pre, h_prev)
        da += dr_pre @ params.w_r
        dh_prev += dr_pre @ params.u_r

        g.b += da.reshape(-1, 2 * n).sum(axis=0)
        dh_prev += a_full[:, :n_nodes] @ da[..., :n] + a_full[:, n_nodes:] @ da[..., n:]
        dh = dh_prev

    dx += dh
    return g, dx[..., :n_cat, 0].copy()


def _outer_sum(d, inp):
    """Sum over all leading axes of ``d[..., i] * inp[..., j]``."""
    return d.reshape(-1, d.shape[-1]).T @ inp.reshape(-1, inp.shape[-1])
