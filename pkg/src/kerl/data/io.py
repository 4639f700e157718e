"""File formats: feature tensors, score caches, images.

Feature tensor (``.kft``), little-endian::

    magic   4 bytes  b"KFT1"
    ndim    uint32
    dims    ndim x uint32
    data    prod(dims) x float32, row-major
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

FEATURE_MAGIC = b"KFT1"


class DataFormatError(ValueError):
    def __init__(self, message, path=None, line=None):
        self.path, self.line = path, line
        where = "" if path is None else f"{path}" + ("" if line is None else f":{line}")
        super().__init__(f"{where}: {message}" if where else message)


def write_feature_tensor(path, array) -> None:
    array = np.ascontiguousarray(array, dtype="<f4")
    header = FEATURE_MAGIC + struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(array.tobytes())


def read_feature_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FEATURE_MAGIC:
        raise DataFormatError("not a feature tensor (bad magic)", path)
    if len(data) < 8:
        raise DataFormatError("truncated header", path)
    (ndim,) = struct.unpack_from("<I", data, 4)
    offset = 8 + 4 * ndim
    if len(data) < offset:
        raise DataFormatError("truncated header", path)
    dims = struct.unpack_from(f"<{ndim}I", data, 8)
    count = int(np.prod(dims)) if dims else 1
    if len(data) - offset != 4 * count:
        raise DataFormatError(f"expected {4 * count} data bytes, found {len(data) - offset}", path)
    return np.frombuffer(data, dtype="<f4", offset=offset).reshape(dims).astype(np.float32)


def save_scores(path, scores, ids) -> None:
    """Cache per-sample category scores (float64, bit-exact) with sample ids."""
    np.savez(path, scores=np.asarray(scores, dtype=np.float64), ids=np.asarray(ids, dtype=str))


def load_scores(path):
    with np.load(path, allow_pickle=False) as z:
        return z["scores"].copy(), [str(i) for i in z["ids"]]


def read_image(path, size=None, box=None) -> np.ndarray:
    """Decode to (H, W, 3) uint8, optionally cropping to ``box`` (x, y, w, h) then resizing."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        if box is not None:
            x, y, w, h = clip_box(box, img.width, img.height)
            img = img.crop((x, y, x + w, y + h))
        if size is not None:
            img = img.resize((size, size), Image.BILINEAR)
        return np.asarray(img, dtype=np.uint8).copy()


def clip_box(box, width, height):
    x, y, w, h = (float(v) for v in box)
    x0, y0 = max(int(np.floor(x)), 0), max(int(np.floor(y)), 0)
    x1, y1 = min(int(np.ceil(x + w)), width), min(int(np.ceil(y + h)), height)
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"box {box} lies outside a {width}x{height} image")
    return x0, y0, x1 - x0, y1 - y0


def resize_image(image, size) -> np.ndarray:
    return np.asarray(Image.fromarray(np.asarray(image, dtype=np.uint8)).resize((size, size), Image.BILINEAR))


def write_image(path, array) -> None:
    """Write uint8 (H, W) as PGM or (H, W, 3) as PPM/PNG by extension."""
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path)
