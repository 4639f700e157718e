"""Training, evaluation and checkpointing.

GGNN parameters are optimized with Adam; every other group uses SGD with
momentum. Training is deterministic given the seed: parameter init, sketch
hashes and the per-epoch sample order all derive from it.
"""
from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import ggnn
from .data.backbone import BackboneConfig
from .data.dataset import Dataset
from .fusion import GATED, USES_KNOWLEDGE, VARIANTS
from .knowledge_graph import KnowledgeGraph, NodeRegistry
from .model import KerlNet, ModelConfig, cross_entropy, softmax
from .optim import SGD, Adam
from .regions import fuse_scores, location_scores, normalize_map

logger = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    variant: str = "kerl"
    epochs: int = 30
    batch_size: int = 16
    sgd_lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 0.0
    adam_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    # model
    t_steps: int = 5
    hidden_dim: int = 10
    node_out_dim: int = 5
    sketch_dim: int = 512
    sketch_seed: int | None = None  # defaults to seed
    gate_hidden: int | None = None
    gate_mode: str = "channel"
    backbone_layers: tuple = ((16, 3, 2), (32, 3, 2), (64, 3, 2))
    signed_sqrt: bool = False
    l2_normalize: bool = False
    # SGD learning-rate multiplier for the gate network (fusion.g1_*, fusion.g2_*)
    gate_lr_scale: float = 1.0
    # baseline pretraining length and SGD rate; 0 means same as epochs / sgd_lr
    pretrain_epochs: int = 0
    pretrain_sgd_lr: float = 0.0
    # highlighted-region head, trained after the main network
    region_epochs: int = 0
    region_lr: float = 1e-3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("sgd_lr", "adam_lr", "region_lr", "gate_lr_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.pretrain_sgd_lr < 0 or self.pretrain_epochs < 0:
            raise ValueError("pretrain_sgd_lr and pretrain_epochs must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        self.backbone_layers = tuple(tuple(int(v) for v in layer) for layer in self.backbone_layers)

    def model_config(self, n_classes: int, input_kind: str = "image", feature_channels=None) -> ModelConfig:
        return ModelConfig(
            variant=self.variant,
            n_classes=n_classes,
            input_kind=input_kind,
            backbone=BackboneConfig(layers=self.backbone_layers),
            feature_channels=feature_channels,
            sketch_dim=self.sketch_dim,
            sketch_seed=self.seed if self.sketch_seed is None else self.sketch_seed,
            gate_hidden=self.gate_hidden,
            gate_mode=self.gate_mode,
            ggnn=ggnn.GgnnConfig(n=self.hidden_dim, out_dim=self.node_out_dim, t_steps=self.t_steps),
            signed_sqrt=self.signed_sqrt,
            l2_normalize=self.l2_normalize,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_layers"] = [list(x) for x in self.backbone_layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict[str, np.ndarray]
    graph: KnowledgeGraph | None = None
    graph_path: str | None = None
    rng_state: dict = field(default_factory=dict)

    def build_model(self) -> KerlNet:
        net = KerlNet(self.model_config, self.graph, seed=self.train_config.seed)
        net.load_parameters(self.params)
        return net

    @classmethod
    def from_model(cls, net: KerlNet, config: TrainConfig, graph_path=None, rng=None) -> "Checkpoint":
        return cls(
            model_config=net.cfg,
            train_config=config,
            params={k: v.copy() for k, v in net.parameters().items()},
            graph=net.graph,
            graph_path=None if graph_path is None else str(graph_path),
            rng_state={} if rng is None else rng.bit_generator.state,
        )


# checkpoint file ------------------------------------------------------------
#
#   magic      8 bytes   b"KERLCKPT"
#   version    uint32    (1)
#   meta_len   uint32
#   meta       meta_len bytes of UTF-8 JSON: configs, graph names/path, RNG state
#   n_tensors  uint32
#   tensors    n_tensors x { name_len uint16, name UTF-8, dtype 1 byte ('d' f64,
#              'q' i64), ndim uint8, dims ndim x uint32, row-major little-endian data }

CHECKPOINT_MAGIC = b"KERLCKPT"
CHECKPOINT_VERSION = 1
_DTYPES = {"d": np.dtype("<f8"), "q": np.dtype("<i8")}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors = dict(ckpt.params)
    meta = {
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "graph_path": ckpt.graph_path,
        "rng_state": _jsonable(ckpt.rng_state),
        "graph": None,
    }
    if ckpt.graph is not None:
        meta["graph"] = {
            "categories": list(ckpt.graph.registry.categories),
            "attributes": list(ckpt.graph.registry.attributes),
        }
        tensors["graph.s"] = ckpt.graph.s
    buf = io.BytesIO()
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = "q" if np.issubdtype(arr.dtype, np.integer) else "d"
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_b)) + name_b)
        buf.write(code.encode() + struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(8) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, meta_len = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(take(meta_len).decode("utf-8"))
    (n_tensors,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        code = take(1).decode()
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: tensor {name} has unknown dtype code {code!r}")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dtype = _DTYPES[code]
        count = int(np.prod(dims)) if dims else 1
        tensors[name] = np.frombuffer(take(count * dtype.itemsize), dtype=dtype).reshape(dims).copy()
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    graph = None
    if meta["graph"] is not None:
        reg = NodeRegistry(tuple(meta["graph"]["categories"]), tuple(meta["graph"]["attributes"]))
        graph = KnowledgeGraph(reg, tensors.pop("graph.s"))
    tc = meta["train_config"]
    return Checkpoint(
        model_config=ModelConfig.from_dict(meta["model_config"]),
        train_config=TrainConfig.from_dict(tc),
        params=tensors,
        graph=graph,
        graph_path=meta["graph_path"],
        rng_state=meta["rng_state"],
    )


# training --------------------------------------------------------------------


def _input_kind(dataset: Dataset):
    if dataset.images is not None:
        return "image", None
    if dataset.features is not None:
        return "features", dataset.features.shape[-1]
    raise ValueError("dataset has neither images nor feature maps")


def _check_prior(config: TrainConfig, prior_scores, n):
    if config.variant not in USES_KNOWLEDGE:
        return None
    if prior_scores is None:
        raise ValueError(
            f"variant {config.variant!r} needs cached category scores from a pretrained baseline; "
            "run pretraining first"
        )
    prior = np.asarray(prior_scores, dtype=np.float64)
    if prior.shape[0] != n:
        raise ValueError(f"{prior.shape[0]} prior score rows for {n} samples")
    return prior


def train(dataset: Dataset, graph: KnowledgeGraph | None, config: TrainConfig, prior_scores=None,
          graph_path=None, init_from: Checkpoint | None = None):
    """Train one variant. Returns ``(Checkpoint, per-epoch metrics)``.

    Each metrics row is a dict with ``epoch``, ``loss`` (mean over batches)
    and ``train_accuracy``. ``init_from`` warm-starts the backbone and the
    image columns of the classifier from a trained checkpoint (normally the
    pretrained baseline).
    """
    input_kind, channels = _input_kind(dataset)
    prior = _check_prior(config, prior_scores, len(dataset))
    model_cfg = config.model_config(dataset.n_classes, input_kind, channels)
    net = KerlNet(model_cfg, graph if config.variant in USES_KNOWLEDGE else None, seed=config.seed)
    if init_from is not None:
        warm_start(net, init_from)
    rng = np.random.default_rng(config.seed)

    params = net.parameters()
    ggnn_params = {k: v for k, v in params.items() if k.startswith("ggnn.")}
    gate_params = {k: v for k, v in params.items() if k.startswith(("fusion.g1_", "fusion.g2_"))}
    sgd_params = {k: v for k, v in params.items() if not k.startswith("ggnn.") and k not in gate_params}
    sgd = SGD(sgd_params, lr=config.sgd_lr, momentum=config.momentum, weight_decay=config.weight_decay)
    gate_sgd = SGD(gate_params, lr=config.sgd_lr * config.gate_lr_scale, momentum=config.momentum,
                   weight_decay=config.weight_decay) if gate_params else None
    adam = Adam(ggnn_params, lr=config.adam_lr, beta1=config.beta1, beta2=config.beta2,
                eps=config.adam_eps) if ggnn_params else None

    inputs, labels = dataset.inputs, dataset.labels
    metrics = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        losses, correct = [], 0
        for start in range(0, len(order), config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            logits, cache = net.forward(inputs[idx], None if prior is None else prior[idx])
            loss, dlogits = cross_entropy(logits, labels[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch starting {start} "
                    f"(variant={config.variant}, sgd_lr={config.sgd_lr})"
                )
            grads = net.backward(cache, dlogits)
            sgd.step(grads)
            if gate_sgd is not None:
                gate_sgd.step(grads)
            if adam is not None:
                adam.step(grads)
            losses.append(loss)
            correct += int((logits.argmax(axis=1) == labels[idx]).sum())
        metrics.append({"epoch": epoch, "loss": float(np.mean(losses)), "train_accuracy": correct / len(dataset)})
        logger.info("epoch %d loss %.4f acc %.3f", epoch, metrics[-1]["loss"], metrics[-1]["train_accuracy"])

    if config.region_epochs > 0:
        train_region_head(net, dataset, prior, config, rng)
    return Checkpoint.from_model(net, config, graph_path=graph_path, rng=rng), metrics


def warm_start(net: KerlNet, source: Checkpoint) -> None:
    """Copy backbone weights and the image part of the classifier from ``source``.

    Knowledge columns of a concatenation classifier are zeroed so the warm
    model reproduces the source's predictions at step 0.
    """
    src = source.model_config
    if (src.sketch_dim, src.sketch_seed, src.d) != (net.cfg.sketch_dim, net.cfg.sketch_seed, net.cfg.d):
        raise ValueError("warm start needs identical sketch dimensions and seed")
    if src.backbone != net.cfg.backbone or src.n_classes != net.cfg.n_classes:
        raise ValueError("warm start needs an identical backbone and class count")
    params = net.parameters()
    for name, value in source.params.items():
        if name.startswith("backbone."):
            params[name][...] = value
    c = net.cfg.sketch_dim
    params["fusion.cls_w"][...] = 0.0
    params["fusion.cls_w"][:, :c] = source.params["fusion.cls_w"][:, :c]
    params["fusion.cls_b"][...] = source.params["fusion.cls_b"]


def train_region_head(net: KerlNet, dataset: Dataset, prior, config: TrainConfig, rng) -> None:
    """Fit the affine classifier on concatenated highlighted-region crop features."""
    crops, _ = net.region_crops(dataset.images, prior)
    feats = net.region_features(crops)
    net.init_region_head(config.seed)
    params = {"w": net.region["w"], "b": net.region["b"]}
    sgd = SGD(params, lr=config.region_lr, momentum=config.momentum, weight_decay=config.weight_decay)
    labels = dataset.labels
    for _ in range(config.region_epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            logits = net.region_logits(feats[idx])
            _, dlogits = cross_entropy(logits, labels[idx])
            sgd.step({"w": dlogits.T @ feats[idx], "b": dlogits.sum(axis=0)})


def pretrain_scores(dataset: Dataset, checkpoint: Checkpoint, batch_size: int = 64) -> np.ndarray:
    """Softmax outputs of a trained baseline, one row per sample."""
    net = checkpoint.build_model()
    return softmax(net.predict_logits(dataset.inputs, None, batch_size))


def pretrain(dataset: Dataset, config: TrainConfig, folds: int = 0):
    """Train the baseline scorer and produce prior scores for ``dataset``.

    With ``folds > 1`` the scores for each training sample come from a baseline
    trained without that sample's fold (out-of-fold), so downstream models see
    scores with test-time reliability. The returned checkpoint is always
    trained on the full dataset and scores unseen data.
    """
    base_cfg = replace(config, variant="baseline", region_epochs=0, epochs=config.pretrain_epochs or config.epochs,
                       sgd_lr=config.pretrain_sgd_lr or config.sgd_lr)
    ckpt, _ = train(dataset, None, base_cfg)
    if folds <= 1:
        return ckpt, pretrain_scores(dataset, ckpt)
    scores = np.zeros((len(dataset), dataset.n_classes))
    for fold, held in enumerate(_stratified_folds(dataset.labels, folds, config.seed)):
        mask = np.ones(len(dataset), dtype=bool)
        mask[held] = False
        fold_ckpt, _ = train(dataset.subset(np.flatnonzero(mask)), None, replace(base_cfg, seed=config.seed + 1 + fold))
        scores[held] = pretrain_scores(dataset.subset(held), fold_ckpt)
    return ckpt, scores


@dataclass
class PipelineResult:
    checkpoint: Checkpoint
    baseline: Checkpoint
    train_prior: np.ndarray
    metrics: list[dict]


def fit_pipeline(dataset: Dataset, graph: KnowledgeGraph | None, config: TrainConfig, folds: int = 0,
                 warm: bool = True, baseline: tuple[Checkpoint, np.ndarray] | None = None) -> PipelineResult:
    """Pretrain the baseline, derive prior scores, then train ``config.variant``.

    ``warm`` starts the variant from the baseline's backbone and classifier.
    A precomputed ``(baseline checkpoint, train prior)`` pair skips pretraining,
    which lets several variants share one baseline.
    """
    if baseline is None:
        baseline = pretrain(dataset, config, folds=folds)
    base_ckpt, prior = baseline
    if config.variant == "baseline" and not warm:
        return PipelineResult(base_ckpt, base_ckpt, prior, [])
    ckpt, metrics = train(dataset, graph, config, prior if config.variant in USES_KNOWLEDGE else None,
                          init_from=base_ckpt if warm else None)
    return PipelineResult(ckpt, base_ckpt, prior, metrics)


def _stratified_folds(labels, folds, seed):
    rng = np.random.default_rng(seed)
    assignment = np.zeros(len(labels), dtype=int)
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c))
        assignment[members] = np.arange(len(members)) % folds
    return [np.flatnonzero(assignment == f) for f in range(folds)]


# evaluation ------------------------------------------------------------------


@dataclass
class EvalReport:
    accuracy: float
    per_class: np.ndarray
    n: int
    predictions: np.ndarray
    # synthetic only: share of the highlight map on ground-truth attribute cells
    attention_mass: float | None = None
    location_mass: float | None = None
    chance_mass: float | None = None

    def as_row(self) -> dict:
        row = {"accuracy": self.accuracy, "n": self.n}
        for name in ("attention_mass", "location_mass", "chance_mass"):
            if getattr(self, name) is not None:
                row[name] = getattr(self, name)
        return row


def mask_coverage(masks, stride: int) -> np.ndarray:
    """Fraction of each ``stride x stride`` cell covered by attribute pixels."""
    masks = np.asarray(masks) >= 0
    n, h, w = masks.shape
    hc, wc = h // stride, w // stride
    cells = masks[:, :hc * stride, :wc * stride].reshape(n, hc, stride, wc, stride)
    return cells.mean(axis=(2, 4))


def mass_on_masks(maps, coverage) -> float:
    """Mean over samples of ``sum(map * coverage) / sum(map)``; maps must be >= 0."""
    maps = np.asarray(maps, dtype=np.float64)
    total = maps.sum(axis=(1, 2))
    inside = (maps * coverage).sum(axis=(1, 2))
    valid = total > 0
    if not valid.any():
        return 0.0
    return float((inside[valid] / total[valid]).mean())


def evaluate(dataset: Dataset, checkpoint: Checkpoint, mode: str = "plain", prior_scores=None,
             batch_size: int = 64) -> EvalReport:
    """Top-1 accuracy; ``with_regions`` averages in the highlighted-region head."""
    if mode not in ("plain", "with_regions"):
        raise ValueError("mode must be 'plain' or 'with_regions'")
    net = checkpoint.build_model()
    prior = _check_prior(checkpoint.train_config, prior_scores, len(dataset))
    logits = net.predict_logits(dataset.inputs, prior, batch_size)
    probs = softmax(logits)
    if mode == "with_regions":
        if net.region is None:
            raise ValueError("checkpoint has no region head; train with region_epochs > 0")
        crops, _ = net.region_crops(dataset.images, prior, batch_size)
        probs = fuse_scores(probs, softmax(net.region_logits(net.region_features(crops, batch_size))))
    preds = probs.argmax(axis=1)
    report = accuracy_report(dataset.labels, preds, dataset.n_classes)
    if dataset.masks is not None and dataset.images is not None:
        _attach_localization(report, net, dataset, prior, batch_size)
    return report


def accuracy_report(labels, preds, n_classes) -> EvalReport:
    labels, preds = np.asarray(labels), np.asarray(preds)
    per_class = np.full(n_classes, np.nan)
    for c in range(n_classes):
        sel = labels == c
        if sel.any():
            per_class[c] = float((preds[sel] == c).mean())
    acc = float((preds == labels).mean()) if len(labels) else float("nan")
    return EvalReport(accuracy=acc, per_class=per_class, n=len(labels), predictions=preds)


def highlight_summary(net: KerlNet, images, prior, batch_size=64):
    """Per-sample ``(attention map, normalized location-score map)``.

    The attention map is the channel-mean gate for gated variants and the
    normalized location score otherwise.
    """
    att, loc = [], []
    for start in range(0, len(images), batch_size):
        sl = slice(start, start + batch_size)
        maps, gates = net.highlight_maps(images[sl], None if prior is None else prior[sl])
        norm = normalize_map(location_scores(maps))
        loc.append(norm)
        att.append(norm if gates is None else gates.mean(axis=-1))
    return np.concatenate(att), np.concatenate(loc)


def _attach_localization(report, net, dataset, prior, batch_size):
    coverage = mask_coverage(dataset.masks, net.cfg.backbone.stride)
    att, loc = highlight_summary(net, dataset.images, prior, batch_size)
    if att.shape != coverage.shape:
        return
    report.attention_mass = mass_on_masks(att, coverage)
    report.location_mass = mass_on_masks(loc, coverage)
    report.chance_mass = float(coverage.mean())
