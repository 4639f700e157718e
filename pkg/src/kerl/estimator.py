"""scikit-learn style front end: ``KERLClassifier().fit(X, y, attribute_scores=...)``.

``X`` is either a uint8 image batch ``(N, H, W, 3)`` or float feature maps
``(N, H', W', d)``. Knowledge variants need per-sample attribute scores (or a
ready graph) at fit time; prediction only needs ``X`` because the prior
category scores come from the baseline trained inside ``fit``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .data.dataset import Dataset
from .fusion import USES_KNOWLEDGE, VARIANTS
from .knowledge_graph import KnowledgeGraph, NodeRegistry, build_graph
from .model import softmax
from .trainer import TrainConfig, fit_pipeline, pretrain_scores


def check_inputs(X, input_kind: str = "auto"):
    """Validate an image or feature-map batch; returns ``(array, kind)``."""
    if input_kind not in ("auto", "image", "features"):
        raise ValueError(f"input_kind must be auto, image or features, got {input_kind!r}")
    raw = np.asarray(X)
    kind = input_kind
    if kind == "auto":
        kind = "image" if raw.dtype == np.uint8 else "features"
    dtype = np.uint8 if kind == "image" else np.float64
    X = check_array(raw, dtype=dtype, allow_nd=True, ensure_min_features=1)
    if X.ndim != 4:
        raise ValueError(f"expected a 4-D batch (N, H, W, C), got shape {X.shape}")
    if kind == "image" and X.shape[-1] != 3:
        raise ValueError(f"images must have 3 channels, got {X.shape[-1]}")
    return X, kind


def check_attribute_scores(scores, n_samples: int) -> np.ndarray:
    scores = check_array(scores, dtype=np.float64)
    if scores.shape[0] != n_samples:
        raise ValueError(f"{scores.shape[0]} attribute rows for {n_samples} samples")
    if (scores < 0).any() or (scores > 1).any():
        raise ValueError("attribute scores must lie in [0, 1]")
    return scores


class KERLClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Knowledge-gated fine-grained classifier and its ablation variants.

    ``fit`` pretrains a baseline at ``pretrain_sgd_lr`` for ``pretrain_epochs``,
    then fine-tunes ``variant`` from it at ``sgd_lr`` for ``epochs``.
    ``transform`` returns the feature vector handed to the final classifier.
    """

    def __init__(
        self,
        variant="kerl",
        epochs=15,
        pretrain_epochs=40,
        batch_size=16,
        sgd_lr=0.01,
        pretrain_sgd_lr=0.1,
        momentum=0.9,
        weight_decay=0.0,
        adam_lr=1e-2,
        t_steps=5,
        hidden_dim=10,
        node_out_dim=5,
        sketch_dim=256,
        gate_hidden=None,
        gate_mode="channel",
        gate_lr_scale=10.0,
        backbone_layers=((16, 3, 2), (32, 3, 2), (32, 3, 2)),
        signed_sqrt=True,
        l2_normalize=True,
        prior_folds=0,
        warm_start=True,
        input_kind="auto",
        random_state=0,
    ):
        self.variant = variant
        self.epochs = epochs
        self.pretrain_epochs = pretrain_epochs
        self.batch_size = batch_size
        self.sgd_lr = sgd_lr
        self.pretrain_sgd_lr = pretrain_sgd_lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.adam_lr = adam_lr
        self.t_steps = t_steps
        self.hidden_dim = hidden_dim
        self.node_out_dim = node_out_dim
        self.sketch_dim = sketch_dim
        self.gate_hidden = gate_hidden
        self.gate_mode = gate_mode
        self.gate_lr_scale = gate_lr_scale
        self.backbone_layers = backbone_layers
        self.signed_sqrt = signed_sqrt
        self.l2_normalize = l2_normalize
        self.prior_folds = prior_folds
        self.warm_start = warm_start
        self.input_kind = input_kind
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        return TrainConfig(
            variant=self.variant, epochs=self.epochs, pretrain_epochs=self.pretrain_epochs,
            batch_size=self.batch_size, sgd_lr=self.sgd_lr, pretrain_sgd_lr=self.pretrain_sgd_lr,
            momentum=self.momentum, weight_decay=self.weight_decay, adam_lr=self.adam_lr, seed=int(self.random_state),
            t_steps=self.t_steps, hidden_dim=self.hidden_dim, node_out_dim=self.node_out_dim,
            sketch_dim=self.sketch_dim, gate_hidden=self.gate_hidden, gate_mode=self.gate_mode,
            gate_lr_scale=self.gate_lr_scale, backbone_layers=self.backbone_layers,
            signed_sqrt=self.signed_sqrt, l2_normalize=self.l2_normalize,
        )

    def fit(self, X, y, attribute_scores=None, graph: KnowledgeGraph | None = None, attribute_names=None):
        config = self._train_config()
        X, kind = check_inputs(X, self.input_kind)
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != len(X):
            raise ValueError(f"y must be 1-D with {len(X)} entries, got shape {y.shape}")
        check_classification_targets(y)
        self.classes_, labels = np.unique(y, return_inverse=True)
        categories = tuple(str(c) for c in self.classes_)

        if attribute_scores is not None:
            scores = check_attribute_scores(attribute_scores, len(X))
        else:
            scores = np.zeros((len(X), 0 if graph is None else graph.n_attributes))
        n_att = scores.shape[1]
        if graph is not None:
            if graph.n_categories != len(categories):
                raise ValueError(f"graph has {graph.n_categories} categories, y has {len(categories)}")
            registry = NodeRegistry(categories, graph.registry.attributes)
            graph = KnowledgeGraph(registry, graph.s)
            if scores.shape[1] != graph.n_attributes:
                raise ValueError("attribute_scores width does not match the graph")
        else:
            names = tuple(attribute_names) if attribute_names is not None else tuple(
                f"attribute::{j}" for j in range(n_att))
            registry = NodeRegistry(categories, names)
        if config.variant in USES_KNOWLEDGE and graph is None:
            if n_att == 0:
                raise ValueError(f"variant {config.variant!r} needs attribute_scores or a graph")
            graph = build_graph(zip(labels.tolist(), scores), registry)

        dataset = Dataset(
            labels=labels, attribute_scores=scores, registry=registry,
            images=X if kind == "image" else None, features=X if kind == "features" else None,
        )
        result = fit_pipeline(dataset, graph, config, folds=self.prior_folds, warm=self.warm_start)
        self.checkpoint_, self.baseline_ = result.checkpoint, result.baseline
        self.graph_ = graph
        self.history_ = result.metrics
        self.input_kind_ = kind
        self.input_shape_ = X.shape[1:]
        self.net_ = self.checkpoint_.build_model()
        return self

    def _validated(self, X):
        check_is_fitted(self, "checkpoint_")
        X, _ = check_inputs(X, self.input_kind_)
        if X.shape[1:] != self.input_shape_:
            raise ValueError(f"expected inputs shaped {self.input_shape_}, got {X.shape[1:]}")
        prior = None
        if self.checkpoint_.model_config.variant in USES_KNOWLEDGE:
            prior = pretrain_scores(_wrap(X, self.input_kind_, len(self.classes_)), self.baseline_)
        return X, prior

    def decision_function(self, X):
        X, prior = self._validated(X)
        return self.net_.predict_logits(X, prior)

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def transform(self, X):
        X, prior = self._validated(X)
        return self.net_.pooled_features(X, prior)


def _wrap(X, kind, n_classes):
    registry = NodeRegistry(tuple(str(i) for i in range(n_classes)), ())
    return Dataset(
        labels=np.zeros(len(X), dtype=np.int64), attribute_scores=np.zeros((len(X), 0)), registry=registry,
        images=X if kind == "image" else None, features=X if kind == "features" else None,
    )
