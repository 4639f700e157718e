"""The full network: backbone -> per-location sketch -> (GGNN) -> head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import ggnn
from .cbp import SketchParams, cbp_backward, make_sketch_params, per_location_pool
from .data.backbone import BackboneConfig, backbone_backward, backbone_forward, init_backbone, preprocess
from .data.io import resize_image
from .fusion import GATED, USES_KNOWLEDGE, VARIANTS, FusionParams, fusion_backward, head_forward
from .knowledge_graph import KnowledgeGraph, adjacency
from .regions import crop_and_map, location_scores, propose_regions


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "kerl"
    n_classes: int = 8
    input_kind: str = "image"  # or "features"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    feature_channels: int | None = None  # required for input_kind="features"
    sketch_dim: int = 512
    sketch_seed: int = 0
    gate_hidden: int | None = None
    gate_mode: str = "channel"
    ggnn: ggnn.GgnnConfig = field(default_factory=ggnn.GgnnConfig)
    signed_sqrt: bool = False
    l2_normalize: bool = False
    # region refinement geometry, in feature cells / pixels
    region_size: int = 6
    region_count: int = 3
    region_iou: float = 0.5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.input_kind not in ("image", "features"):
            raise ValueError("input_kind must be 'image' or 'features'")
        if self.input_kind == "features" and not self.feature_channels:
            raise ValueError("feature_channels is required for precomputed features")

    @property
    def d(self) -> int:
        return self.backbone.out_channels if self.input_kind == "image" else self.feature_channels

    def to_dict(self) -> dict:
        out = asdict(self)
        out["backbone"]["layers"] = [list(x) for x in self.backbone.layers]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        bb = d.pop("backbone")
        d["backbone"] = BackboneConfig(layers=tuple(tuple(x) for x in bb["layers"]), in_channels=bb["in_channels"])
        d["ggnn"] = ggnn.GgnnConfig(**d["ggnn"])
        return cls(**d)


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    z = logits - logits.max(axis=-1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = len(labels)
    loss = -log_p[np.arange(n), labels].mean()
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


class KerlNet:
    """Parameter container with explicit forward and backward passes.

    Parameters are exposed as a flat ``name -> array`` mapping; names are
    prefixed by group (``backbone.``, ``ggnn.``, ``fusion.``, ``region.``).
    """

    def __init__(self, cfg: ModelConfig, graph: KnowledgeGraph | None = None, seed: int = 0):
        if cfg.variant in USES_KNOWLEDGE:
            if graph is None:
                raise ValueError(f"variant {cfg.variant!r} needs a knowledge graph")
            if graph.n_categories != cfg.n_classes:
                raise ValueError("graph category count does not match n_classes")
        self.cfg = cfg
        self.graph = graph if cfg.variant in USES_KNOWLEDGE else None
        self.adj = adjacency(graph) if self.graph is not None else None
        self.sketch: SketchParams = make_sketch_params(cfg.d, cfg.sketch_dim, cfg.sketch_seed)
        rng = np.random.default_rng(seed)
        self.backbone = init_backbone(cfg.backbone, rng) if cfg.input_kind == "image" else []
        knowledge_dim = 0
        self.ggnn_params = None
        if self.graph is not None:
            self.ggnn_params = ggnn.GgnnParams.init(cfg.ggnn, rng)
            knowledge_dim = self.graph.n_nodes * cfg.ggnn.out_dim
        self.fusion = FusionParams.init(
            cfg.variant, cfg.sketch_dim, cfg.n_classes, knowledge_dim,
            hidden=cfg.gate_hidden, gate_mode=cfg.gate_mode, rng=rng,
        )
        self.region = None

    # parameters -------------------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.backbone):
            for k, v in layer.items():
                out[f"backbone.{i}.{k}"] = v
        if self.ggnn_params is not None:
            out.update({f"ggnn.{k}": v for k, v in self.ggnn_params.arrays().items()})
        out.update({f"fusion.{k}": v for k, v in self.fusion.arrays().items()})
        if self.region is not None:
            out.update({f"region.{k}": v for k, v in self.region.items()})
        return out

    def load_parameters(self, arrays: dict[str, np.ndarray]) -> None:
        if any(k.startswith("region.") for k in arrays) and self.region is None:
            self.init_region_head()
        params = self.parameters()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ValueError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in params.items():
            if p.shape != arrays[k].shape:
                raise ValueError(f"parameter {k} has shape {arrays[k].shape}, expected {p.shape}")
            p[...] = arrays[k]

    def init_region_head(self, seed: int = 0) -> None:
        rng = np.random.default_rng(seed)
        n_in = self.cfg.region_count * self.cfg.sketch_dim
        bound = 1.0 / np.sqrt(n_in)
        self.region = {
            "w": rng.uniform(-bound, bound, size=(self.cfg.n_classes, n_in)),
            "b": np.zeros(self.cfg.n_classes),
        }

    # forward / backward -----------------------------------------------------

    def _check_prior(self, prior_scores, n):
        if self.graph is None:
            return None
        if prior_scores is None:
            raise ValueError(f"variant {self.cfg.variant!r} needs prior category scores")
        prior = np.asarray(prior_scores, dtype=np.float64)
        if prior.shape != (n, self.cfg.n_classes):
            raise ValueError(f"prior scores have shape {prior.shape}, expected {(n, self.cfg.n_classes)}")
        return prior

    def feature_maps(self, inputs):
        """Backbone maps and sketched per-location features."""
        if self.cfg.input_kind == "image":
            fmap, cache = backbone_forward(preprocess(inputs), self.backbone, self.cfg.backbone)
        else:
            fmap, cache = np.asarray(inputs, dtype=np.float64), None
            if fmap.ndim != 4 or fmap.shape[-1] != self.cfg.d:
                raise ValueError(f"expected (N, H', W', {self.cfg.d}) feature maps, got {fmap.shape}")
        return fmap, per_location_pool(fmap, self.sketch, self.cfg.signed_sqrt), cache

    def forward(self, inputs, prior_scores=None):
        """Class logits ``(N, C)`` and the cache for :meth:`backward`."""
        prior = self._check_prior(prior_scores, len(inputs))
        fmap, f_i, bb_cache = self.feature_maps(inputs)
        f_g = None
        if prior is not None:
            _, f_g = ggnn.run(self.graph, prior, self.ggnn_params, self.cfg.ggnn, adj=self.adj)
        logits, head_cache = head_forward(self.cfg.variant, f_i, f_g, self.fusion, self.cfg.l2_normalize)
        return logits, dict(fmap=fmap, bb=bb_cache, prior=prior, head=head_cache)

    def backward(self, cache, grad_logits) -> dict[str, np.ndarray]:
        grads = {}
        g_fusion, dfi, dfg = fusion_backward(cache["head"], self.fusion, grad_logits)
        grads.update({f"fusion.{k}": v for k, v in g_fusion.arrays().items()})
        if self.ggnn_params is not None:
            g_ggnn, _ = ggnn.backward(self.graph, cache["prior"], self.ggnn_params, self.cfg.ggnn, dfg, adj=self.adj)
            grads.update({f"ggnn.{k}": v for k, v in g_ggnn.arrays().items()})
        if self.backbone:
            dfmap = cbp_backward(cache["fmap"], self.sketch, dfi, self.cfg.signed_sqrt)
            g_bb = backbone_backward(cache["bb"], self.backbone, self.cfg.backbone, dfmap)
            for i, layer in enumerate(g_bb):
                for k, v in layer.items():
                    grads[f"backbone.{i}.{k}"] = v
        return grads

    def _batched(self, inputs, prior_scores, batch_size, pick):
        out = []
        for start in range(0, len(inputs), batch_size):
            sl = slice(start, start + batch_size)
            prior = None if prior_scores is None else np.asarray(prior_scores)[sl]
            out.append(pick(*self.forward(inputs[sl], prior)))
        return out

    def predict_logits(self, inputs, prior_scores=None, batch_size: int = 64):
        out = self._batched(inputs, prior_scores, batch_size, lambda logits, _: logits)
        return np.concatenate(out) if out else np.zeros((0, self.cfg.n_classes))

    def pooled_features(self, inputs, prior_scores=None, batch_size: int = 64):
        """The vector each sample presents to the classifier (after optional normalization)."""
        out = self._batched(inputs, prior_scores, batch_size, lambda _, cache: cache["head"]["feat"])
        return np.concatenate(out) if out else np.zeros((0, self.fusion.cls_w.shape[1]))

    def highlight_maps(self, inputs, prior_scores=None):
        """Feature maps as seen by the classifier before spatial summation.

        Returns ``(f_i, gates)``; gated variants report ``gates * f_i`` as the
        effective map, others the raw sketch map with ``gates = None``.
        """
        prior = self._check_prior(prior_scores, len(inputs))
        _, f_i, _ = self.feature_maps(inputs)
        if self.cfg.variant not in GATED:
            return f_i, None
        f_g = None
        if prior is not None:
            _, f_g = ggnn.run(self.graph, prior, self.ggnn_params, self.cfg.ggnn, adj=self.adj)
        _, head_cache = head_forward(self.cfg.variant, f_i, f_g, self.fusion, self.cfg.l2_normalize)
        gates = head_cache["gates"]
        return gates * f_i, gates

    # highlighted-region refinement -----------------------------------------

    def region_crops(self, images, prior_scores=None, batch_size: int = 64):
        """Crops (resized back to the input size) around the top highlighted regions.

        Returns an array ``(N, k, S, S, 3)`` plus the per-image crop specs.
        """
        if self.cfg.input_kind != "image":
            raise ValueError("region refinement needs images, not precomputed features")
        images = np.asarray(images)
        size = images.shape[1]
        stride = self.cfg.backbone.stride
        crop = self.cfg.region_size * stride
        k = self.cfg.region_count
        crops = np.zeros((len(images), k) + images.shape[1:], dtype=np.uint8)
        specs = []
        for start in range(0, len(images), batch_size):
            sl = slice(start, start + batch_size)
            prior = None if prior_scores is None else np.asarray(prior_scores)[sl]
            maps, _ = self.highlight_maps(images[sl], prior)
            for b, score_map in enumerate(location_scores(maps)):
                n = start + b
                regions = propose_regions(score_map, self.cfg.region_size, k, self.cfg.region_iou)
                # fewer survivors than k: repeat the best one
                regions = (regions + regions[:1] * k)[:k]
                row = []
                for r_i, region in enumerate(regions):
                    spec = crop_and_map(region, images.shape[1:3], stride=stride, crop=crop, resize=size)
                    patch = images[n, spec.y:spec.y + spec.h, spec.x:spec.x + spec.w]
                    crops[n, r_i] = resize_image(patch, size)
                    row.append((spec, region.score))
                specs.append(row)
        return crops, specs

    def region_features(self, crops, batch_size: int = 64):
        """Sum-pooled sketch features of each crop, concatenated per image."""
        n, k = crops.shape[:2]
        flat = crops.reshape((n * k,) + crops.shape[2:])
        feats = []
        for start in range(0, len(flat), batch_size):
            _, f_i, _ = self.feature_maps(flat[start:start + batch_size])
            feats.append(f_i.sum(axis=(1, 2)))
        feats = np.concatenate(feats) if feats else np.zeros((0, self.cfg.sketch_dim))
        return feats.reshape(n, k * self.cfg.sketch_dim)

    def region_logits(self, region_feats):
        return region_feats @ self.region["w"].T + self.region["b"]


def with_variant(cfg: ModelConfig, variant: str) -> ModelConfig:
    return replace(cfg, variant=variant)
