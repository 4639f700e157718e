import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kerl import ggnn
from kerl.gradcheck import check_ggnn, numeric_grad, random_graph, rel_error
from kerl.knowledge_graph import KnowledgeGraph, NodeRegistry, adjacency


def sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def scalar_step(h, a_c, p):
    """Loop-by-loop GRU update on python floats; shares no code with ggnn."""
    n_nodes, n = len(h), len(h[0])
    out = []
    for v in range(n_nodes):
        fwd = [sum(a_c[u][v] * h[u][k] for u in range(n_nodes)) for k in range(n)]
        rev = [sum(a_c[v][u] * h[u][k] for u in range(n_nodes)) for k in range(n)]
        a = [val + p.b[k] for k, val in enumerate(fwd + rev)]
        z = [sig(sum(p.w_z[i][j] * a[j] for j in range(2 * n)) + sum(p.u_z[i][j] * h[v][j] for j in range(n)))
             for i in range(n)]
        r = [sig(sum(p.w_r[i][j] * a[j] for j in range(2 * n)) + sum(p.u_r[i][j] * h[v][j] for j in range(n)))
             for i in range(n)]
        cand = [math.tanh(sum(p.w[i][j] * a[j] for j in range(2 * n))
                          + sum(p.u[i][j] * r[j] * h[v][j] for j in range(n))) for i in range(n)]
        out.append([(1 - z[i]) * h[v][i] + z[i] * cand[i] for i in range(n)])
    return out


def two_node_graph(weight=0.7):
    return KnowledgeGraph(NodeRegistry(("bird",), ("wing::red",)), np.array([[weight]]))


def noisy_params(cfg, rng, scale=0.5):
    p = ggnn.GgnnParams.init(cfg, rng)
    for arr in p.arrays().values():
        arr += rng.normal(0, scale, size=arr.shape)
    return p


class TestPropagateStep:
    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(3)
        cfg = ggnn.GgnnConfig(n=3, out_dim=2, t_steps=1)
        graph = two_node_graph()
        params = noisy_params(cfg, rng)
        h = rng.uniform(-1, 1, size=(2, 3))
        states = ggnn.NodeStates(h=h, x=np.zeros_like(h))
        got = ggnn.propagate_step(states, adjacency(graph).a_full, params).h
        expected = scalar_step(h.tolist(), adjacency(graph).a_c.tolist(), params)
        assert np.abs(got - np.array(expected)).max() < 1e-12

    def test_zero_fixed_point(self):
        cfg = ggnn.GgnnConfig(n=4, out_dim=2, t_steps=1)
        params = noisy_params(cfg, np.random.default_rng(0))
        params.b[...] = 0.0
        graph = random_graph(2, 3, np.random.default_rng(1))
        h = np.zeros((5, 4))
        out = ggnn.propagate_step(ggnn.NodeStates(h, h.copy()), adjacency(graph).a_full, params)
        np.testing.assert_array_equal(out.h, 0.0)

    def test_rejects_wrong_adjacency(self):
        cfg = ggnn.GgnnConfig(n=2)
        params = ggnn.GgnnParams.init(cfg, 0)
        h = np.zeros((3, 2))
        with pytest.raises(ValueError):
            ggnn.propagate_step(ggnn.NodeStates(h, h), np.zeros((3, 3)), params)

    def test_non_finite_reports_node(self):
        cfg = ggnn.GgnnConfig(n=2)
        params = ggnn.GgnnParams.init(cfg, 0)
        h = np.zeros((3, 2))
        h[0, 1] = np.nan
        with pytest.raises(FloatingPointError, match="node 0"):
            ggnn.propagate_step(ggnn.NodeStates(h, h), np.zeros((3, 6)), params)


class TestRun:
    def test_bounded_over_random_rollouts(self):
        rng = np.random.default_rng(11)
        cfg = ggnn.GgnnConfig(n=4, out_dim=2, t_steps=6)
        graph = random_graph(3, 4, rng)
        adj = adjacency(graph)
        worst = 0.0
        for _ in range(1000):
            params = noisy_params(cfg, rng, scale=3.0)
            states, _ = ggnn.run(graph, rng.uniform(0, 1, size=3), params, cfg, adj=adj)
            worst = max(worst, np.abs(states.h).max())
        assert worst <= 1.0

    def test_zero_steps_is_output_map_of_init(self):
        cfg = ggnn.GgnnConfig(n=3, out_dim=2, t_steps=0)
        rng = np.random.default_rng(0)
        graph = random_graph(2, 2, rng)
        params = noisy_params(cfg, rng)
        scores = np.array([0.25, 0.75])
        states, f_g = ggnn.run(graph, scores, params, cfg)
        x = np.zeros((4, 3))
        x[:2, 0] = scores
        np.testing.assert_array_equal(states.h, x)
        expected = np.concatenate([x, x], axis=1) @ params.o_w.T + params.o_b
        np.testing.assert_allclose(f_g, expected.ravel(), rtol=0, atol=1e-15)

    def test_two_steps_compose(self):
        cfg = ggnn.GgnnConfig(n=3, out_dim=2, t_steps=2)
        rng = np.random.default_rng(5)
        graph = random_graph(2, 3, rng)
        params = noisy_params(cfg, rng)
        scores = rng.uniform(0, 1, size=2)
        states, _ = ggnn.run(graph, scores, params, cfg)
        s = ggnn.init_states(scores, graph, cfg)
        a_full = adjacency(graph).a_full
        manual = ggnn.propagate_step(ggnn.propagate_step(s, a_full, params), a_full, params)
        np.testing.assert_array_equal(states.h, manual.h)

    def test_node_permutation_equivariance(self):
        rng = np.random.default_rng(2)
        cfg = ggnn.GgnnConfig(n=3, out_dim=2, t_steps=3)
        graph = random_graph(3, 4, rng)
        params = noisy_params(cfg, rng)
        scores = rng.uniform(0, 1, size=3)
        cat_perm, att_perm = rng.permutation(3), rng.permutation(4)
        reg = graph.registry
        permuted = KnowledgeGraph(
            NodeRegistry(tuple(reg.categories[i] for i in cat_perm), tuple(reg.attributes[j] for j in att_perm)),
            graph.s[np.ix_(cat_perm, att_perm)],
        )
        states, _ = ggnn.run(graph, scores, params, cfg)
        states_p, _ = ggnn.run(permuted, scores[cat_perm], params, cfg)
        node_perm = np.concatenate([cat_perm, 3 + att_perm])
        np.testing.assert_allclose(states_p.h, states.h[node_perm], atol=1e-14)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(4)
        cfg = ggnn.GgnnConfig(n=3, out_dim=2, t_steps=2)
        graph = random_graph(2, 3, rng)
        params = noisy_params(cfg, rng)
        scores = rng.uniform(0, 1, size=(4, 2))
        _, batched = ggnn.run(graph, scores, params, cfg)
        for i in range(4):
            np.testing.assert_allclose(batched[i], ggnn.run(graph, scores[i], params, cfg)[1], atol=1e-14)

    def test_cub_scale_representation_width(self):
        reg = NodeRegistry(tuple(f"c{i}" for i in range(200)), tuple(f"p::a{j}" for j in range(312)))
        graph = KnowledgeGraph(reg, np.zeros((200, 312)))
        cfg = ggnn.GgnnConfig(n=10, out_dim=5, t_steps=1)
        _, f_g = ggnn.run(graph, np.full(200, 0.005), ggnn.GgnnParams.init(cfg, 0), cfg)
        assert f_g.shape == (2560,)

    @pytest.mark.parametrize("bad", [[0.5, 1.5], [-0.1, 0.2], [np.nan, 0.0], [0.3]])
    def test_rejects_bad_scores(self, bad):
        cfg = ggnn.GgnnConfig(n=2)
        graph = random_graph(2, 2, np.random.default_rng(0))
        with pytest.raises(ValueError):
            ggnn.run(graph, bad, ggnn.GgnnParams.init(cfg, 0), cfg)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            ggnn.GgnnConfig(n=0)

    def test_validate_shapes(self):
        cfg = ggnn.GgnnConfig(n=3, out_dim=2)
        params = ggnn.GgnnParams.init(cfg, 0)
        params.validate(cfg)
        with pytest.raises(ValueError, match="u_z"):
            params.u_z = np.zeros((2, 2))
            params.validate(cfg)

    def test_init_bounds(self):
        cfg = ggnn.GgnnConfig(n=8, out_dim=3)
        params = ggnn.GgnnParams.init(cfg, 0)
        bound = 1 / np.sqrt(16)
        for name, arr in params.arrays().items():
            if name in ("b", "o_b"):
                assert not arr.any()
            else:
                assert np.abs(arr).max() <= bound


class TestBackward:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradcheck(self, seed):
        assert check_ggnn(np.random.default_rng(seed)) < 1e-4

    def test_gradcheck_batched(self):
        rng = np.random.default_rng(9)
        cfg = ggnn.GgnnConfig(n=2, out_dim=2, t_steps=2)
        graph = random_graph(2, 2, rng)
        params = noisy_params(cfg, rng, 0.3)
        scores = rng.uniform(0.1, 0.9, size=(3, 2))
        weight = rng.normal(size=(3, 8))

        def loss():
            return float((weight * ggnn.run(graph, scores, params, cfg)[1]).sum())

        grads, dscores = ggnn.backward(graph, scores, params, cfg, weight)
        for name, arr in params.arrays().items():
            assert rel_error(getattr(grads, name), numeric_grad(loss, arr)) < 1e-4
        assert rel_error(dscores, numeric_grad(loss, scores)) < 1e-4

    def test_zero_upstream_gives_zero_grads(self):
        rng = np.random.default_rng(0)
        cfg = ggnn.GgnnConfig(n=3, out_dim=2, t_steps=2)
        graph = random_graph(2, 3, rng)
        grads, dscores = ggnn.backward(graph, [0.2, 0.9], noisy_params(cfg, rng), cfg, np.zeros(10))
        assert all(not g.any() for g in grads.arrays().values())
        assert not dscores.any()

    def test_zero_steps_only_output_map_learns(self):
        rng = np.random.default_rng(1)
        cfg = ggnn.GgnnConfig(n=3, out_dim=2, t_steps=0)
        graph = random_graph(2, 3, rng)
        grads, _ = ggnn.backward(graph, [0.2, 0.9], noisy_params(cfg, rng), cfg, rng.normal(size=10))
        for name, arr in grads.arrays().items():
            assert arr.any() == (name in ("o_w", "o_b"))

    def test_wrong_upstream_shape(self):
        cfg = ggnn.GgnnConfig(n=2, out_dim=2, t_steps=1)
        graph = random_graph(2, 2, np.random.default_rng(0))
        with pytest.raises(ValueError):
            ggnn.backward(graph, [0.5, 0.5], ggnn.GgnnParams.init(cfg, 0), cfg, np.zeros(3))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_hidden_state_stays_in_unit_box(seed):
    rng = np.random.default_rng(seed)
    cfg = ggnn.GgnnConfig(n=3, out_dim=1, t_steps=4)
    graph = random_graph(2, 3, rng)
    states, _ = ggnn.run(graph, rng.uniform(0, 1, size=2), noisy_params(cfg, rng, 5.0), cfg)
    assert np.abs(states.h).max() <= 1.0
