"""On-disk dataset directories and the loader used by the command line.

A dataset directory holds ``dataset.json``::

    {"format": "kerl-dataset", "version": 1,
     "categories": [...], "attributes": [...], "splits": ["train", "test"], ...}

plus one ``<split>.npz`` per split with arrays ``labels``, ``attribute_scores``,
``ids`` and any of ``images`` (uint8 NHWC), ``features``, ``boxes``, ``masks``.
A directory without ``dataset.json`` is read as a CUB-200-2011 tree.
"""
from __future__ import annotations

import json
import os
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..knowledge_graph import NodeRegistry
from .cub import load_cub
from .dataset import Dataset
from .io import DataFormatError, read_feature_tensor

MANIFEST = "dataset.json"
DATA_ENV = "KERL_DATA"
_ARRAYS = ("images", "features", "boxes", "masks")


def resolve_data_path(path) -> Path:
    """``path`` itself, or ``$KERL_DATA/path`` when it is relative and missing locally."""
    path = Path(path)
    if not path.exists() and not path.is_absolute() and os.environ.get(DATA_ENV):
        alt = Path(os.environ[DATA_ENV]) / path
        if alt.exists():
            return alt
    return path


def save_dataset_dir(root, splits: dict[str, Dataset], extra: dict | None = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    registry = next(iter(splits.values())).registry
    for name, ds in splits.items():
        if ds.registry != registry:
            raise ValueError("all splits must share one category/attribute registry")
        arrays = {"labels": ds.labels, "attribute_scores": ds.attribute_scores, "ids": np.asarray(ds.ids, dtype=str)}
        arrays.update({k: getattr(ds, k) for k in _ARRAYS if getattr(ds, k) is not None})
        np.savez_compressed(root / f"{name}.npz", **arrays)
    manifest = {
        "format": "kerl-dataset",
        "version": 1,
        "categories": list(registry.categories),
        "attributes": list(registry.attributes),
        "splits": list(splits),
        **(extra or {}),
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(root) -> dict:
    path = Path(root) / MANIFEST
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None
    if manifest.get("format") != "kerl-dataset":
        raise DataFormatError("not a kerl dataset manifest", path)
    return manifest


def load_dataset_dir(root, split: str) -> Dataset:
    root = Path(root)
    manifest = read_manifest(root)
    if split not in manifest["splits"]:
        raise ValueError(f"split {split!r} not in {manifest['splits']}")
    registry = NodeRegistry(tuple(manifest["categories"]), tuple(manifest["attributes"]))
    path = root / f"{split}.npz"
    if not path.is_file():
        raise DataFormatError("missing split archive", path)
    with np.load(path, allow_pickle=False) as z:
        kwargs = {k: z[k] for k in _ARRAYS if k in z.files}
        return Dataset(
            labels=z["labels"],
            attribute_scores=z["attribute_scores"],
            registry=registry,
            ids=[str(i) for i in z["ids"]],
            **kwargs,
        )


def feature_file_name(sample_id: str) -> str:
    return sample_id.replace("/", "__") + ".kft"


def attach_features(dataset: Dataset, feature_dir) -> Dataset:
    """Swap images for precomputed ``(H', W', d)`` maps read from ``feature_dir``."""
    feature_dir = Path(feature_dir)
    maps = [read_feature_tensor(feature_dir / feature_file_name(i)) for i in dataset.ids]
    shapes = {m.shape for m in maps}
    if len(shapes) != 1 or len(next(iter(shapes))) != 3:
        raise DataFormatError(f"feature maps must share one (H', W', d) shape, got {sorted(shapes)}", feature_dir)
    return replace(dataset, images=None, features=np.stack(maps).astype(np.float64))


def load_data(path, split: str = "train", mode: str = "image", image_size: int | None = 64,
              feature_dir=None) -> Dataset:
    """Load a dataset directory or a CUB tree, optionally with precomputed features."""
    path = resolve_data_path(path)
    if not path.exists():
        raise FileNotFoundError(f"data path {path} does not exist")
    if (path / MANIFEST).is_file():
        ds = load_dataset_dir(path, split)
    else:
        ds = load_cub(path, split, mode, image_size=None if feature_dir is not None else image_size)
    if feature_dir is not None:
        ds = attach_features(ds, resolve_data_path(feature_dir))
    return ds
