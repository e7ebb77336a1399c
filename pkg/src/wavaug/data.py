"""Dataset ingestion and image export.

Three sources are supported:

* ``idx``: the big-endian IDX container used by the classic digits corpus
  (pixel bytes scaled by 1/255, images zero-padded to a dyadic size);
* ``image-dir``: a directory of PNG/PGM files plus ``labels.csv``;
* ``synthetic``: a seeded ten-class shapes corpus rendered at 32x32, or a
  two-class blobs set for convergence checks.
"""
from __future__ import annotations

import csv
import gzip
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image

from .nn import Batch

__all__ = [
    "DatasetSource",
    "DatasetError",
    "SHAPE_CLASSES",
    "load_dataset",
    "iterate_batches",
    "synthetic_shapes",
    "synthetic_blobs",
    "read_idx",
    "write_idx",
    "pad_to_dyadic",
    "export_images",
    "load_image_dir",
]

SHAPE_CLASSES = (
    "disc", "ring", "square", "frame", "triangle",
    "plus", "cross", "hstripes", "vstripes", "diamond",
)


class DatasetError(ValueError):
    pass


@dataclass
class DatasetSource:
    format: str = "synthetic"
    path: Optional[str] = None
    labels_path: Optional[str] = None
    split: str = "train"
    size: Optional[int] = None
    seed: int = 0
    image_size: int = 32
    generator: str = "shapes"

    def __post_init__(self) -> None:
        if self.format not in ("idx", "image-dir", "synthetic"):
            raise DatasetError(f"unknown dataset format {self.format!r}")
        if self.split not in ("train", "test"):
            raise DatasetError(f"split must be 'train' or 'test', got {self.split!r}")
        if self.generator not in ("shapes", "blobs"):
            raise DatasetError(f"unknown synthetic generator {self.generator!r}")
        if self.format != "synthetic" and not self.path:
            raise DatasetError(f"{self.format} source needs a path")


# ----------------------------------------------------------------------
# IDX

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) into an array of its native dtype."""
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise DatasetError(f"{path}: bad magic {data[:4].hex() if data else '(empty)'}")
    code, ndim = data[2], data[3]
    if code not in _IDX_TYPES or ndim == 0:
        raise DatasetError(f"{path}: bad magic 0x{data[:4].hex()}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DatasetError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    dtype = np.dtype(_IDX_TYPES[code])
    need = int(np.prod(dims)) * dtype.itemsize
    if len(data) - header < need:
        raise DatasetError(f"{path}: truncated file ({len(data) - header} of {need} payload bytes)")
    return np.frombuffer(data[header:header + need], dtype=dtype).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    codes = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}
    key = array.dtype.newbyteorder("=")
    if key not in codes:
        raise DatasetError(f"dtype {array.dtype} has no IDX code")
    code = codes[key]
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    with open(path, "wb") as fh:
        fh.write(header + array.astype(_IDX_TYPES[code]).tobytes())


def pad_to_dyadic(images: np.ndarray, size: int = 32) -> np.ndarray:
    """Zero-pad N x H x W x C images symmetrically up to ``size``."""
    n, h, w, c = images.shape
    if h > size or w > size:
        raise DatasetError(f"images of {h}x{w} exceed the target size {size}")
    top, left = (size - h) // 2, (size - w) // 2
    out = np.zeros((n, size, size, c), dtype=np.float64)
    out[:, top:top + h, left:left + w] = images
    return out


def _load_idx(source: DatasetSource) -> Batch:
    images = read_idx(source.path)
    if images.ndim not in (3, 4):
        raise DatasetError(f"{source.path}: expected N x H x W (x C) images, got {images.shape}")
    if not source.labels_path:
        raise DatasetError("idx source needs labels_path")
    labels = read_idx(source.labels_path)
    if labels.ndim != 1:
        raise DatasetError(f"{source.labels_path}: labels must be one-dimensional")
    if labels.shape[0] != images.shape[0]:
        raise DatasetError(
            f"label/image count mismatch: {labels.shape[0]} labels for {images.shape[0]} images")
    x = images.astype(np.float64)
    if images.dtype == np.uint8:
        x /= 255.0
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise DatasetError(f"{source.path}: pixel values fall outside [0, 1]")
    if x.ndim == 3:
        x = x[..., None]
    return Batch(pad_to_dyadic(x, source.image_size), labels.astype(np.int64))


# ----------------------------------------------------------------------
# image directories

def _read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype == np.uint16:
        x = arr.astype(np.float64) / 65535.0
    else:
        x = arr.astype(np.float64) / 255.0
    if x.ndim == 2:
        x = x[..., None]
    return x


def load_image_dir(path) -> Batch:
    root = Path(path)
    label_file = root / "labels.csv"
    if not label_file.exists():
        raise DatasetError(f"{root}: missing labels.csv")
    names, labels = [], []
    with open(label_file, newline="") as fh:
        for row in csv.DictReader(fh):
            names.append(row["filename"])
            labels.append(int(row["label"]))
    if not names:
        raise DatasetError(f"{label_file}: no rows")
    images = []
    for name in names:
        f = root / name
        if not f.exists():
            raise DatasetError(f"{f}: listed in labels.csv but missing")
        images.append(_read_image(f))
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DatasetError(f"{root}: images have differing shapes {sorted(shapes)}")
    return Batch(np.stack(images), np.array(labels))


# ----------------------------------------------------------------------
# synthetic shapes

_BACKGROUND = (0.0, 0.4)
_CONTRAST = (0.2, 0.6)
_NOISE = (0.03, 0.10)


def _render(kind: int, rng: np.random.Generator, size: int) -> np.ndarray:
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = c + rng.uniform(-3.5, 3.5)
    cy = c + rng.uniform(-3.5, 3.5)
    r = rng.uniform(6.5, 10.0) * size / 32.0
    theta = rng.uniform(-0.3, 0.3)
    dx, dy = xx - cx, yy - cy
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    t = max(1.6, 0.22 * r)  # stroke width
    name = SHAPE_CLASSES[kind]
    if name == "disc":
        d = np.hypot(u, v) - r
    elif name == "ring":
        d = np.abs(np.hypot(u, v) - 0.8 * r) - t / 2
    elif name == "square":
        d = np.maximum(np.abs(u), np.abs(v)) - 0.85 * r
    elif name == "frame":
        d = np.abs(np.maximum(np.abs(u), np.abs(v)) - 0.8 * r) - t / 2
    elif name == "triangle":
        # upward triangle as the intersection of three half-planes
        k = np.sqrt(3.0)
        d = np.maximum(np.maximum(-v - 0.55 * r, (k * u + v) / 2 - 0.55 * r),
                       (-k * u + v) / 2 - 0.55 * r)
    elif name == "plus":
        arm = np.minimum(np.maximum(np.abs(u) - t / 2, np.abs(v) - r),
                         np.maximum(np.abs(v) - t / 2, np.abs(u) - r))
        d = arm
    elif name == "cross":
        a = (u + v) / np.sqrt(2.0)
        b = (u - v) / np.sqrt(2.0)
        d = np.minimum(np.maximum(np.abs(a) - t / 2, np.abs(b) - r),
                       np.maximum(np.abs(b) - t / 2, np.abs(a) - r))
    elif name in ("hstripes", "vstripes"):
        w = v if name == "hstripes" else u
        period = rng.uniform(5.0, 7.0) * size / 32.0
        phase = rng.uniform(0, period)
        stripe = np.abs(((w + phase) % period) - period / 2) - period / 4
        box = np.maximum(np.abs(u), np.abs(v)) - r
        d = np.maximum(stripe, box)
    else:  # diamond outline
        d = np.abs(np.abs(u) + np.abs(v) - r) - t / 2
    mask = 1.0 / (1.0 + np.exp(np.clip(d / 0.5, -50, 50)))
    bg = rng.uniform(*_BACKGROUND)
    fg = min(1.0, bg + rng.uniform(*_CONTRAST))
    gx, gy = rng.uniform(-0.08, 0.08, size=2)
    background = bg + gx * (xx - c) / size + gy * (yy - c) / size
    img = background + (fg - bg) * mask
    img += rng.normal(0.0, rng.uniform(*_NOISE), size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synthetic_shapes(n: int, seed: int = 0, size: int = 32) -> Batch:
    """Balanced, seeded shapes corpus: ``n`` grayscale ``size`` x ``size`` images."""
    if n < 1:
        raise DatasetError("synthetic dataset size must be positive")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % len(SHAPE_CLASSES)
    rng.shuffle(labels)
    images = np.stack([_render(int(k), rng, size) for k in labels])[..., None]
    return Batch(images, labels, num_classes=len(SHAPE_CLASSES))


def synthetic_blobs(n: int, seed: int = 0, size: int = 32) -> Batch:
    """Two linearly separable classes: a soft bright blob in the left or right half."""
    if n < 1:
        raise DatasetError("synthetic dataset size must be positive")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = np.where(labels == 0, 0.25, 0.75) * size + rng.uniform(-2, 2, n)
    cy = size / 2 + rng.uniform(-4, 4, n)
    sigma = rng.uniform(2.5, 4.0, n) * size / 32.0
    d2 = (xx[None] - cx[:, None, None]) ** 2 + (yy[None] - cy[:, None, None]) ** 2
    img = 0.1 + 0.8 * np.exp(-d2 / (2 * sigma[:, None, None] ** 2))
    img += rng.normal(0.0, 0.02, size=img.shape)
    return Batch(np.clip(img, 0.0, 1.0)[..., None], labels, num_classes=2)


GENERATORS = {"shapes": synthetic_shapes, "blobs": synthetic_blobs}

_SYNTH_SIZES = {"train": 4000, "test": 1000}
# independent streams for the two splits
_SYNTH_SPLIT_OFFSET = {"train": 0, "test": 1_000_003}


def load_dataset(source: DatasetSource) -> Batch:
    """Load a whole dataset into memory as one :class:`Batch`."""
    if source.format == "synthetic":
        n = source.size or _SYNTH_SIZES[source.split]
        return GENERATORS[source.generator](
            n, source.seed + _SYNTH_SPLIT_OFFSET[source.split], source.image_size)
    if not os.path.exists(source.path):
        raise DatasetError(f"{source.path}: no such file or directory")
    batch = _load_idx(source) if source.format == "idx" else load_image_dir(source.path)
    if source.size:
        batch = batch.subset(slice(0, source.size))
    return batch


def iterate_batches(data: Batch, batch_size: int, rng: Optional[np.random.Generator] = None
                    ) -> Iterator[Batch]:
    """Yield minibatches, shuffled when ``rng`` is given."""
    order = np.arange(len(data)) if rng is None else rng.permutation(len(data))
    for start in range(0, len(data), batch_size):
        yield data.subset(order[start:start + batch_size])


# ----------------------------------------------------------------------
# export

def _to_bytes(x: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def export_images(batch: Batch, directory, format: str = "png", provenance: Optional[dict] = None,
                  prefix: str = "img") -> dict:
    """Write 8-bit images plus ``labels.csv`` and ``manifest.json``; returns the manifest."""
    fmt = format.lower()
    if fmt not in ("png", "pgm"):
        raise ValueError(f"format must be 'png' or 'pgm', got {format!r}")
    root = Path(directory)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {root}: {exc}") from exc
    entries = []
    width = max(5, len(str(len(batch))))
    for i, (img, label) in enumerate(zip(batch.images, batch.labels)):
        arr = _to_bytes(img)
        name = f"{prefix}_{i:0{width}d}.{fmt}"
        path = root / name
        if fmt == "pgm" and arr.shape[-1] != 1:
            raise ValueError("PGM export needs single-channel images")
        pil = Image.fromarray(arr[..., 0] if arr.shape[-1] == 1 else arr)
        try:
            pil.save(path, format="PPM" if fmt == "pgm" else "PNG")
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        entries.append({"filename": name, "label": int(label)})
    with open(root / "labels.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["filename", "label"])
        writer.writeheader()
        writer.writerows(entries)
    manifest = {"count": len(entries), "format": fmt, "files": entries,
                "provenance": provenance or {}}
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest

