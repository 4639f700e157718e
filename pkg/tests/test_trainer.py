import math
from dataclasses import replace

import numpy as np
import pytest

from kerl.data.synthetic import SyntheticConfig, gen_synthetic
from kerl.knowledge_graph import build_graph
from kerl.model import cross_entropy, softmax
from kerl.optim import SGD, Adam
from kerl.trainer import (
    CheckpointError,
    TrainConfig,
    TrainingDivergedError,
    accuracy_report,
    evaluate,
    load_checkpoint,
    mask_coverage,
    mass_on_masks,
    pretrain,
    pretrain_scores,
    save_checkpoint,
    train,
)

TINY = dict(
    epochs=3, batch_size=8, sgd_lr=0.3, l2_normalize=True, sketch_dim=32, gate_hidden=16,
    hidden_dim=3, node_out_dim=2, t_steps=2, backbone_layers=((8, 3, 2), (8, 3, 2)),
)


@pytest.fixture(scope="module")
def tiny():
    data = gen_synthetic(SyntheticConfig(n_categories=4, n_attributes=8, n_parts=2, image_size=32, patch=8,
                                         jitter=2, clutter_patch=6, train_per_class=6, test_per_class=3), seed=0)
    graph = build_graph(data.train.instances(), data.train.registry)
    base, prior = pretrain(data.train, TrainConfig(variant="baseline", **TINY))
    return data, graph, base, prior, pretrain_scores(data.test, base)


class TestLossAndOptim:
    def test_uniform_cross_entropy(self):
        loss, grad = cross_entropy(np.zeros((3, 4)), np.array([0, 1, 3]))
        assert loss == pytest.approx(math.log(4), abs=1e-12)
        np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-15)

    def test_cross_entropy_gradient(self):
        rng = np.random.default_rng(0)
        logits, labels = rng.normal(size=(5, 3)), rng.integers(0, 3, size=5)
        _, grad = cross_entropy(logits, labels)
        onehot = np.eye(3)[labels]
        np.testing.assert_allclose(grad, (softmax(logits) - onehot) / 5, atol=1e-15)

    def test_softmax_rows(self):
        p = softmax(np.random.default_rng(1).normal(size=(6, 5)) * 50)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)

    def test_sgd_quadratic_step(self):
        # f(w) = (w - 3)^2 at w = 1: grad -4, lr 0.1 -> w = 1.4
        w = np.array([1.0])
        SGD({"w": w}, lr=0.1, momentum=0.0).step({"w": 2 * (w - 3.0)})
        assert w[0] == pytest.approx(1.4, abs=1e-15)

    def test_sgd_momentum_and_decay(self):
        w = np.array([1.0])
        opt = SGD({"w": w}, lr=0.1, momentum=0.5, weight_decay=0.2)
        opt.step({"w": np.array([1.0])})  # v = 1.2, w = 0.88
        opt.step({"w": np.array([1.0])})  # v = 0.6 + 1.176 = 1.776, w = 0.88 - 0.1776
        assert w[0] == pytest.approx(0.88 - 0.1776, abs=1e-14)

    def test_adam_first_step(self):
        lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
        w = np.array([0.0])
        Adam({"w": w}, lr=lr, beta1=b1, beta2=b2, eps=eps).step({"w": np.array([1.0])})
        m_hat = (1 - b1) * 1.0 / (1 - b1)
        v_hat = (1 - b2) * 1.0 / (1 - b2)
        assert w[0] == pytest.approx(-lr * m_hat / (math.sqrt(v_hat) + eps), rel=1e-12)

    def test_nonpositive_lr(self):
        with pytest.raises(ValueError):
            SGD({}, lr=0.0)
        with pytest.raises(ValueError):
            TrainConfig(adam_lr=-1.0)


class TestMetrics:
    def test_perfect_predictor(self):
        labels = np.arange(10) % 3
        assert accuracy_report(labels, labels, 3).accuracy == 1.0

    def test_constant_predictor(self):
        labels = np.repeat(np.arange(4), 5)
        rep = accuracy_report(labels, np.zeros(20, dtype=int), 4)
        assert rep.accuracy == 5 / 20
        np.testing.assert_array_equal(rep.per_class, [1.0, 0.0, 0.0, 0.0])

    def test_uniform_gates_give_area_fraction(self):
        rng = np.random.default_rng(0)
        masks = np.where(rng.random((6, 16, 16)) < 0.3, 2, -1)
        cov = mask_coverage(masks, 4)
        assert mass_on_masks(np.full((6, 4, 4), 0.5), cov) == pytest.approx((masks >= 0).mean(), abs=1e-12)

    def test_coverage_cells(self):
        masks = np.full((1, 4, 4), -1)
        masks[0, :2, :2] = 0
        np.testing.assert_array_equal(mask_coverage(masks, 2)[0], [[1.0, 0.0], [0.0, 0.0]])

    def test_mass_concentrated(self):
        cov = np.zeros((1, 2, 2))
        cov[0, 0, 0] = 1.0
        heat = np.zeros((1, 2, 2))
        heat[0, 0, 0] = 3.0
        assert mass_on_masks(heat, cov) == 1.0


class TestTraining:
    def test_baseline_beats_chance(self, tiny):
        data, _, base, _, prior_test = tiny
        assert evaluate(data.train, base).accuracy > 0.25

    @pytest.mark.parametrize("variant", ["baseline", "self_guided", "concat", "kerl"])
    def test_loss_decreases(self, tiny, variant):
        data, graph, _, prior, _ = tiny
        _, metrics = train(data.train, graph, TrainConfig(variant=variant, **TINY), prior)
        assert metrics[-1]["loss"] < metrics[0]["loss"]

    def test_deterministic(self, tiny):
        data, graph, _, prior, _ = tiny
        cfg = TrainConfig(variant="kerl", **TINY)
        a, ma = train(data.train, graph, cfg, prior)
        b, mb = train(data.train, graph, cfg, prior)
        assert ma == mb
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_kerl_requires_prior(self, tiny):
        data, graph, _, _, _ = tiny
        with pytest.raises(ValueError, match="pretrain"):
            train(data.train, graph, TrainConfig(variant="kerl", **TINY))

    def test_divergence_detected(self, tiny):
        data, _, _, _, _ = tiny
        cfg = TrainConfig(variant="baseline", **{**TINY, "sgd_lr": 1e200, "l2_normalize": False})
        with pytest.raises(TrainingDivergedError, match="epoch"):
            with np.errstate(all="ignore"):
                train(data.train, None, cfg)

    def test_optimizer_routing(self, tiny):
        data, graph, _, prior, _ = tiny
        cfg = TrainConfig(variant="kerl", **{**TINY, "epochs": 0})
        ckpt0, _ = train(data.train, graph, cfg, prior)
        # two batches: the zero-initialized gate output blocks GGNN gradients on the first
        n = 2 * cfg.batch_size
        small = data.train.subset(np.arange(n))
        ckpt1, _ = train(small, graph, replace(cfg, epochs=1), prior[:n])
        ggnn_moved = [k for k in ckpt0.params if k.startswith("ggnn.")
                      and not np.array_equal(ckpt0.params[k], ckpt1.params[k])]
        assert ggnn_moved
        ckpt_noadam, _ = train(small, graph, replace(cfg, epochs=1, adam_lr=1e-300), prior[:n])
        for k in ggnn_moved:
            np.testing.assert_allclose(ckpt_noadam.params[k], ckpt0.params[k], atol=1e-290)

    def test_sgd_holds_no_ggnn_state(self, monkeypatch):
        from kerl import trainer

        data = gen_synthetic(SyntheticConfig(n_categories=2, n_attributes=4, n_parts=2, image_size=16, patch=4,
                                             jitter=1, clutter_patch=4, train_per_class=2, test_per_class=1), 0)
        graph = build_graph(data.train.instances(), data.train.registry)
        seen = []
        original = trainer.SGD

        class Spy(original):
            def __init__(self, params, **kw):
                seen.append(set(params))
                super().__init__(params, **kw)

        monkeypatch.setattr(trainer, "SGD", Spy)
        cfg = TrainConfig(variant="kerl", **{**TINY, "epochs": 1, "backbone_layers": ((4, 3, 2),)})
        train(data.train, graph, cfg, np.full((4, 2), 0.5))
        assert seen and not any(k.startswith("ggnn.") for group in seen for k in group)
        assert any("fusion.g1_w" in group for group in seen)

    def test_warm_start_reproduces_baseline(self, tiny):
        data, graph, base, prior, prior_test = tiny
        for variant in ("self_guided", "concat", "kerl"):
            ckpt, _ = train(data.train, graph, TrainConfig(variant=variant, **{**TINY, "epochs": 0}), prior,
                            init_from=base)
            np.testing.assert_allclose(
                ckpt.build_model().predict_logits(data.test.images, prior_test if variant != "self_guided" else None),
                base.build_model().predict_logits(data.test.images), atol=1e-10,
            )

    def test_pretrain_uses_its_own_schedule(self, tiny):
        data = tiny[0]
        cfg = TrainConfig(variant="kerl", **{**TINY, "epochs": 1, "pretrain_epochs": 2, "pretrain_sgd_lr": 0.1})
        ckpt, _ = pretrain(data.train, cfg)
        direct, _ = train(data.train, None, replace(cfg, variant="baseline", epochs=2, sgd_lr=0.1))
        assert all(np.array_equal(ckpt.params[k], direct.params[k]) for k in direct.params)
        with pytest.raises(ValueError):
            TrainConfig(pretrain_sgd_lr=-0.1)

    def test_out_of_fold_scores(self, tiny):
        data, _, _, _, _ = tiny
        ckpt, scores = pretrain(data.train, TrainConfig(variant="baseline", **{**TINY, "epochs": 1}), folds=3)
        assert scores.shape == (len(data.train), 4)
        np.testing.assert_allclose(scores.sum(axis=1), 1.0, atol=1e-9)


class TestCheckpoint:
    def test_round_trip_preserves_evaluation(self, tiny, tmp_path):
        data, graph, _, prior, prior_test = tiny
        ckpt, _ = train(data.train, graph, TrainConfig(variant="kerl", **TINY), prior)
        save_checkpoint(ckpt, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        assert back.graph == ckpt.graph and back.model_config == ckpt.model_config
        a, b = evaluate(data.test, ckpt, prior_scores=prior_test), evaluate(data.test, back, prior_scores=prior_test)
        assert a.as_row() == b.as_row()
        np.testing.assert_array_equal(
            ckpt.build_model().predict_logits(data.test.images, prior_test),
            back.build_model().predict_logits(data.test.images, prior_test),
        )

    def test_region_head_round_trip(self, tiny, tmp_path):
        data, _, _, _, _ = tiny
        cfg = TrainConfig(variant="baseline", **{**TINY, "region_epochs": 2, "epochs": 1})
        ckpt, _ = train(data.train, None, cfg)
        save_checkpoint(ckpt, tmp_path / "r.ckpt")
        rep = evaluate(data.test, load_checkpoint(tmp_path / "r.ckpt"), mode="with_regions")
        assert rep.as_row() == evaluate(data.test, ckpt, mode="with_regions").as_row()

    def test_plain_checkpoint_cannot_use_regions(self, tiny):
        data, _, base, _, _ = tiny
        with pytest.raises(ValueError, match="region"):
            evaluate(data.test, base, mode="with_regions")

    @pytest.mark.parametrize("damage", [lambda b: b"NOTACKPT" + b[8:], lambda b: b[:-3], lambda b: b[:12]])
    def test_corrupt(self, tiny, tmp_path, damage):
        save_checkpoint(tiny[2], tmp_path / "m.ckpt")
        (tmp_path / "m.ckpt").write_bytes(damage((tmp_path / "m.ckpt").read_bytes()))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_config_round_trip(self):
        cfg = TrainConfig(variant="concat", epochs=4, backbone_layers=[[4, 3, 2]])
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_dict({"bogus": 1})
