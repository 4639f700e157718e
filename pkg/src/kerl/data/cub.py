"""CUB-200-2011 annotation parser.

Files read, relative to the ``CUB_200_2011`` directory (whitespace-separated,
ids 1-based):

    images.txt                               <image_id> <relative_path>
    classes.txt                              <class_id> <class_name>
    image_class_labels.txt                   <image_id> <class_id>
    train_test_split.txt                     <image_id> <is_training_image>
    bounding_boxes.txt                       <image_id> <x> <y> <width> <height>
    attributes/image_attribute_labels.txt    <image_id> <attribute_id> <is_present> <certainty_id> [<time> ...]
    attributes.txt or attributes/attributes.txt (also looked up one level up)
                                             <attribute_id> <part>::<value>

Attribute scores are ``is_present * weight[certainty_id]``.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..knowledge_graph import NodeRegistry
from .dataset import Dataset
from .io import DataFormatError, read_image

DEFAULT_CERTAINTY_WEIGHTS = {1: 1 / 3, 2: 2 / 3, 3: 2 / 3, 4: 1.0}


def _resolve_root(root) -> Path:
    root = Path(root)
    if (root / "images.txt").is_file():
        return root
    if (root / "CUB_200_2011" / "images.txt").is_file():
        return root / "CUB_200_2011"
    raise FileNotFoundError(f"no CUB-200-2011 annotations under {root}")


def _rows(path: Path, min_fields: int):
    if not path.is_file():
        raise DataFormatError("missing annotation file", path)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) < min_fields:
                raise DataFormatError(f"expected at least {min_fields} fields, got {len(fields)}", path, lineno)
            yield lineno, fields


def _int(value, path, lineno):
    try:
        return int(value)
    except ValueError:
        raise DataFormatError(f"expected an integer, got {value!r}", path, lineno) from None


def _float(value, path, lineno):
    try:
        return float(value)
    except ValueError:
        raise DataFormatError(f"expected a number, got {value!r}", path, lineno) from None


def _names(path: Path):
    names = {}
    for lineno, fields in _rows(path, 2):
        names[_int(fields[0], path, lineno)] = " ".join(fields[1:])
    ids = sorted(names)
    if ids != list(range(1, len(ids) + 1)):
        raise DataFormatError("ids must run 1..N without gaps", path)
    return [names[i] for i in ids]


def _attribute_names_path(root: Path) -> Path:
    for cand in (root / "attributes.txt", root / "attributes" / "attributes.txt", root.parent / "attributes.txt"):
        if cand.is_file():
            return cand
    raise DataFormatError("missing attributes.txt", root / "attributes.txt")


def load_cub(
    root,
    split: str = "train",
    mode: str = "image",
    image_size: int | None = None,
    certainty_weights: dict[int, float] | None = None,
) -> Dataset:
    """Parse CUB annotations for ``split`` ('train', 'test' or 'all').

    Images are decoded only when ``image_size`` is given; in ``bbox`` mode they
    are cropped to the annotated box first.
    """
    if split not in ("train", "test", "all"):
        raise ValueError(f"split must be train, test or all, got {split!r}")
    if mode not in ("image", "bbox"):
        raise ValueError(f"mode must be image or bbox, got {mode!r}")
    weights = dict(DEFAULT_CERTAINTY_WEIGHTS if certainty_weights is None else certainty_weights)
    root = _resolve_root(root)

    paths = {}
    p = root / "images.txt"
    for lineno, f in _rows(p, 2):
        paths[_int(f[0], p, lineno)] = f[1]
    classes = _names(root / "classes.txt")
    attributes = _names(_attribute_names_path(root))
    registry = NodeRegistry(tuple(classes), tuple(attributes))

    labels = {}
    p = root / "image_class_labels.txt"
    for lineno, f in _rows(p, 2):
        cls = _int(f[1], p, lineno)
        if not 1 <= cls <= len(classes):
            raise DataFormatError(f"class id {cls} out of range", p, lineno)
        labels[_int(f[0], p, lineno)] = cls - 1

    is_train = {}
    p = root / "train_test_split.txt"
    for lineno, f in _rows(p, 2):
        is_train[_int(f[0], p, lineno)] = _int(f[1], p, lineno) == 1

    boxes = {}
    p = root / "bounding_boxes.txt"
    if p.is_file():
        for lineno, f in _rows(p, 5):
            boxes[_int(f[0], p, lineno)] = [_float(v, p, lineno) for v in f[1:5]]
    elif mode == "bbox":
        raise DataFormatError("missing annotation file", p)

    image_ids = sorted(paths)
    for name, table in (("image_class_labels.txt", labels), ("train_test_split.txt", is_train)):
        missing = [i for i in image_ids if i not in table]
        if missing:
            raise DataFormatError(f"no entry for image id {missing[0]}", root / name)
    keep = [i for i in image_ids if split == "all" or is_train[i] == (split == "train")]
    row_of = {img: r for r, img in enumerate(keep)}

    scores = np.zeros((len(keep), len(attributes)))
    p = root / "attributes" / "image_attribute_labels.txt"
    # some rows in the official release carry extra trailing fields; only the
    # first four are used
    for lineno, f in _rows(p, 4):
        img = _int(f[0], p, lineno)
        r = row_of.get(img)
        if r is None:
            if img not in paths:
                raise DataFormatError(f"unknown image id {img}", p, lineno)
            continue
        att = _int(f[1], p, lineno)
        if not 1 <= att <= len(attributes):
            raise DataFormatError(f"attribute id {att} out of range", p, lineno)
        present = _int(f[2], p, lineno)
        certainty = _int(f[3], p, lineno)
        if present not in (0, 1):
            raise DataFormatError(f"is_present must be 0 or 1, got {present}", p, lineno)
        if certainty not in weights:
            raise DataFormatError(f"unknown certainty id {certainty}", p, lineno)
        scores[r, att - 1] = present * weights[certainty]

    box_arr = np.array([boxes[i] for i in keep]) if boxes and all(i in boxes for i in keep) else None
    images = None
    if image_size is not None:
        images = np.stack([
            read_image(root / "images" / paths[i], size=image_size,
                       box=boxes[i] if mode == "bbox" else None)
            for i in keep
        ]) if keep else np.zeros((0, image_size, image_size, 3), np.uint8)
    return Dataset(
        labels=np.array([labels[i] for i in keep], dtype=np.int64),
        attribute_scores=scores,
        registry=registry,
        images=images,
        boxes=box_arr,
        ids=[paths[i] for i in keep],
    )
