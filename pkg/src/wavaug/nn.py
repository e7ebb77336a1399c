"""Small convolutional classifier with hand-written backward passes.

Everything runs in float64 on NHWC arrays (batch, height, width, channel)
with images in [0, 1].  Normalization layers keep two
independent sets of running statistics, one per *path* (``"clean"`` and
``"adv"``), while all trainable parameters are shared between paths.
"""
from __future__ import annotations

import copy
import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ArchSpec",
    "Batch",
    "Classifier",
    "BackwardResult",
    "PATHS",
    "softmax",
    "cross_entropy",
    "predict",
    "forward",
    "loss",
    "backward",
    "sgd_step",
    "features",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "CheckpointError",
]

PATHS = ("clean", "adv")
DEBUG = bool(os.environ.get("WAVAUG_DEBUG"))


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    num_classes: Optional[int] = None

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim == 3:
            self.images = self.images[..., None]
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x H x W x C, got shape {self.images.shape}")
        n = self.images.shape[0]
        if n < 1:
            raise ValueError("batch is empty")
        if self.labels.shape != (n,):
            raise ValueError(f"label/image count mismatch: {self.labels.shape[0]} vs {n}")
        if self.labels.min() < 0 or (self.num_classes is not None
                                     and self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, index) -> "Batch":
        return Batch(self.images[index], self.labels[index], self.num_classes)


@dataclass
class ArchSpec:
    """Architecture description, stored verbatim in checkpoints."""

    in_channels: int = 1
    image_size: int = 32
    widths: Tuple[int, ...] = (8, 16)
    hidden: int = 64
    num_classes: int = 10
    norm: str = "batch"

    def __post_init__(self) -> None:
        self.widths = tuple(int(w) for w in self.widths)
        if self.norm not in ("batch", "layer"):
            raise ValueError(f"norm must be 'batch' or 'layer', got {self.norm!r}")
        if self.image_size % (1 << len(self.widths)):
            raise ValueError("image_size must be divisible by 2^len(widths)")

    @property
    def feature_dim(self) -> int:
        return self.hidden


class _Ctx(NamedTuple):
    path: str
    train: bool
    update_stats: bool


class Layer:
    param_names: Tuple[str, ...] = ()

    def params(self) -> List[np.ndarray]:
        return [getattr(self, n) for n in self.param_names]

    def forward(self, x, ctx):
        raise NotImplementedError

    def backward(self, dy, cache):
        raise NotImplementedError


class Conv2d(Layer):
    """3x3 convolution, stride 1, zero padding 1 (NHWC in and out)."""

    param_names = ("weight", "bias")

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        fan_in = cin * 9
        bound = np.sqrt(6.0 / fan_in)
        self.weight = rng.uniform(-bound, bound, size=(cout, cin, 3, 3))
        self.bias = np.zeros(cout)

    def forward(self, x, ctx):
        n, h, w, c = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        cols = sliding_window_view(xp, (3, 3), axis=(1, 2)).reshape(n * h * w, c * 9)
        wmat = self.weight.reshape(self.weight.shape[0], -1)
        y = cols @ wmat.T + self.bias
        return y.reshape(n, h, w, -1), (cols, x.shape)

    def backward(self, dy, cache):
        cols, (n, h, w, c) = cache
        cout = dy.shape[-1]
        dflat = dy.reshape(-1, cout)
        wmat = self.weight.reshape(cout, -1)
        dw = (dflat.T @ cols).reshape(self.weight.shape)
        db = dflat.sum(axis=0)
        dcols = (dflat @ wmat).reshape(n, h, w, c, 3, 3)
        dxp = np.zeros((n, h + 2, w + 2, c))
        for i in range(3):
            for j in range(3):
                dxp[:, i:i + h, j:j + w, :] += dcols[..., i, j]
        return dxp[:, 1:-1, 1:-1, :], [dw, db]


class Dense(Layer):
    param_names = ("weight", "bias")

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, gain: float = 2.0):
        bound = np.sqrt(3.0 * gain / fan_in)
        self.weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        self.bias = np.zeros(fan_out)

    def forward(self, x, ctx):
        return x @ self.weight + self.bias, x

    def backward(self, dy, x):
        return dy @ self.weight.T, [x.T @ dy, dy.sum(axis=0)]


class ReLU(Layer):
    def forward(self, x, ctx):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, dy, mask):
        return np.where(mask, dy, 0.0), []


class MaxPool2(Layer):
    """2x2 max pooling; ties route the gradient to the first window element."""

    def forward(self, x, ctx):
        q = (x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2])
        y = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
        taken = np.zeros(y.shape, dtype=bool)
        masks = []
        for part in q:
            m = (part == y) & ~taken
            taken |= m
            masks.append(m)
        return y, (masks, x.shape)

    def backward(self, dy, cache):
        masks, shape = cache
        dx = np.empty(shape)
        for (i, j), m in zip(((0, 0), (0, 1), (1, 0), (1, 1)), masks):
            dx[:, i::2, j::2] = np.where(m, dy, 0.0)
        return dx, []


class Flatten(Layer):
    def forward(self, x, ctx):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, shape):
        return dy.reshape(shape), []


class BatchNorm2d(Layer):
    """Per-channel batch normalization with one running-stat set per path."""

    param_names = ("gamma", "beta")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.momentum = momentum
        self.eps = eps
        self.stats = {p: {"mean": np.zeros(channels), "var": np.ones(channels)} for p in PATHS}

    def forward(self, x, ctx):
        if ctx.train:
            mean = x.mean(axis=(0, 1, 2))
            var = x.var(axis=(0, 1, 2))
            if ctx.update_stats:
                m = x.size // x.shape[-1]
                st = self.stats[ctx.path]
                st["mean"] = (1 - self.momentum) * st["mean"] + self.momentum * mean
                unbiased = var * m / max(m - 1, 1)
                st["var"] = (1 - self.momentum) * st["var"] + self.momentum * unbiased
            kind = "train"
        else:
            st = self.stats[ctx.path]
            mean, var = st["mean"], st["var"]
            kind = "eval"
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        return self.gamma * xhat + self.beta, (kind, xhat, inv)

    def backward(self, dy, cache):
        kind, xhat, inv = cache
        dgamma = (dy * xhat).sum(axis=(0, 1, 2))
        dbeta = dy.sum(axis=(0, 1, 2))
        if kind == "eval":
            return dy * (self.gamma * inv), [dgamma, dbeta]
        m = dy.size // dy.shape[-1]
        dx = (self.gamma * inv / m) * (m * dy - dbeta - xhat * dgamma)
        return dx, [dgamma, dbeta]


class LayerNorm2d(Layer):
    """Per-sample normalization over (H, W, C) with per-channel affine.

    Holds no running statistics, so both paths behave identically.
    """

    param_names = ("gamma", "beta")

    def __init__(self, channels: int, eps: float = 1e-5):
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.eps = eps
        self.stats = {p: {} for p in PATHS}

    def forward(self, x, ctx):
        mean = x.mean(axis=(1, 2, 3), keepdims=True)
        var = x.var(axis=(1, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        return self.gamma * xhat + self.beta, (xhat, inv)

    def backward(self, dy, cache):
        xhat, inv = cache
        dgamma = (dy * xhat).sum(axis=(0, 1, 2))
        dbeta = dy.sum(axis=(0, 1, 2))
        dxhat = dy * self.gamma
        m = xhat[0].size
        dx = (inv / m) * (
            m * dxhat
            - dxhat.sum(axis=(1, 2, 3), keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=(1, 2, 3), keepdims=True)
        )
        return dx, [dgamma, dbeta]


class BackwardResult(NamedTuple):
    loss: float
    param_grads: List[np.ndarray]
    input_grad: np.ndarray
    logits: np.ndarray


class Classifier:
    """conv-norm-relu-pool blocks, a hidden dense layer, and a linear head.

    The hidden layer's ReLU output is the feature vector used by the
    distribution metrics.
    """

    def __init__(self, arch: Optional[ArchSpec] = None, seed: int = 0):
        self.arch = arch or ArchSpec()
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        a = self.arch
        layers: List[Layer] = []
        cin = a.in_channels
        for width in a.widths:
            norm = BatchNorm2d(width) if a.norm == "batch" else LayerNorm2d(width)
            layers += [Conv2d(cin, width, rng), norm, ReLU(), MaxPool2()]
            cin = width
        side = a.image_size >> len(a.widths)
        layers += [Flatten(), Dense(cin * side * side, a.hidden, rng), ReLU(),
                   Dense(a.hidden, a.num_classes, rng, gain=1.0)]
        self.layers = layers
        self.velocity: Optional[List[np.ndarray]] = None

    # ------------------------------------------------------------------
    @property
    def norm_layers(self) -> List[Layer]:
        return [l for l in self.layers if isinstance(l, (BatchNorm2d, LayerNorm2d))]

    @property
    def head(self) -> Dense:
        return self.layers[-1]

    def params(self) -> List[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def set_params(self, values: Sequence[np.ndarray]) -> None:
        values = list(values)
        i = 0
        for layer in self.layers:
            for name in layer.param_names:
                cur = getattr(layer, name)
                if values[i].shape != cur.shape:
                    raise ValueError(f"parameter shape mismatch: {values[i].shape} vs {cur.shape}")
                setattr(layer, name, np.array(values[i], dtype=np.float64))
                i += 1
        if i != len(values):
            raise ValueError("parameter count mismatch")

    def norm_stats(self, path: str) -> List[Dict[str, np.ndarray]]:
        return [layer.stats[path] for layer in self.norm_layers]

    def copy(self) -> "Classifier":
        other = Classifier.__new__(Classifier)
        other.arch = ArchSpec(**asdict(self.arch))
        other.seed = self.seed
        other.layers = copy.deepcopy(self.layers)
        other.velocity = None if self.velocity is None else [v.copy() for v in self.velocity]
        return other

    # ------------------------------------------------------------------
    def _prepare(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 3:
            x = x[..., None]
        a = self.arch
        want = (a.image_size, a.image_size, a.in_channels)
        if x.ndim != 4 or x.shape[1:] != want:
            raise ValueError(f"shape mismatch: model expects N x {want}, got {x.shape}")
        return x

    def run(self, images, path: str = "clean", mode: str = "eval",
            update_stats: Optional[bool] = None, upto: Optional[int] = None,
            keep: bool = False):
        """Forward pass returning ``(output, caches, activations)``.

        ``upto`` stops after that many layers; ``keep`` records every
        intermediate activation.
        """
        if path not in PATHS:
            raise ValueError(f"path must be one of {PATHS}, got {path!r}")
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        train = mode == "train"
        ctx = _Ctx(path, train, train if update_stats is None else bool(update_stats) and train)
        x = self._prepare(images)
        caches, acts = [], []
        for layer in self.layers[:upto]:
            x, cache = layer.forward(x, ctx)
            if DEBUG and not np.all(np.isfinite(x)):
                raise FloatingPointError(f"non-finite activation after {type(layer).__name__}")
            caches.append(cache)
            if keep:
                acts.append(x)
        return x, caches, acts

    def backprop(self, dout, caches) -> Tuple[List[np.ndarray], np.ndarray]:
        grads: List[List[np.ndarray]] = []
        d = dout
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            d, g = layer.backward(d, cache)
            grads.append(g)
        flat = [g for layer_grads in reversed(grads) for g in layer_grads]
        return flat, d


# ----------------------------------------------------------------------
# functional surface

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_labels(logits: np.ndarray, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"shape mismatch: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"label out of range [0, {logits.shape[1]})")
    return labels


def cross_entropy(logits, labels, reduction: str = "mean") -> float:
    """Cross-entropy of ``logits`` against integer ``labels``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(logits, labels)
    nll = -_log_softmax(logits)[np.arange(labels.size), labels]
    if reduction == "none":
        return nll
    return float(nll.sum() if reduction == "sum" else nll.mean())


loss = cross_entropy


def _cross_entropy_grad(logits, labels, reduction: str) -> np.ndarray:
    g = softmax(logits)
    g[np.arange(labels.size), labels] -= 1.0
    return g / labels.size if reduction == "mean" else g


def predict(logits: np.ndarray) -> np.ndarray:
    """Arg-max class; ties resolve to the lowest index."""
    return np.argmax(logits, axis=1)


def forward(model: Classifier, images, path: str = "clean", mode: str = "eval",
            update_stats: Optional[bool] = None) -> np.ndarray:
    if isinstance(images, Batch):
        images = images.images
    out, _, _ = model.run(images, path, mode, update_stats)
    return out


def backward(model: Classifier, images, labels=None, path: str = "clean", mode: str = "train",
             reduction: str = "mean", update_stats: Optional[bool] = None) -> BackwardResult:
    """Forward + cross-entropy + backward; returns parameter and input gradients."""
    if isinstance(images, Batch):
        images, labels = images.images, images.labels
    logits, caches, _ = model.run(images, path, mode, update_stats)
    labels = _check_labels(logits, labels)
    value = cross_entropy(logits, labels, reduction)
    grads, dx = model.backprop(_cross_entropy_grad(logits, labels, reduction), caches)
    return BackwardResult(value, grads, dx, logits)


def sgd_step(model: Classifier, param_grads: Sequence[np.ndarray], lr: float,
             momentum: float = 0.0, weight_decay: float = 0.0) -> Classifier:
    """In-place SGD with heavy-ball momentum (buffers live on the model)."""
    params = model.params()
    if len(param_grads) != len(params):
        raise ValueError("gradient count does not match parameter count")
    if model.velocity is None:
        model.velocity = [np.zeros_like(p) for p in params]
    new = []
    for p, g, v in zip(params, param_grads, model.velocity):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch: {g.shape} vs {p.shape}")
        d = g + weight_decay * p if weight_decay else g
        v *= momentum
        v += d
        new.append(p - lr * v)
    model.set_params(new)
    return model


def features(model: Classifier, images, path: str = "clean") -> np.ndarray:
    """Eval-mode activations of the layer feeding the classification head."""
    if isinstance(images, Batch):
        images = images.images
    out, _, _ = model.run(images, path, "eval", upto=len(model.layers) - 1)
    return out


def layer_activations(model: Classifier, images, path: str = "clean") -> List[np.ndarray]:
    """Eval-mode post-ReLU activations of every block (used by the LPIPS proxy)."""
    _, _, acts = model.run(images, path, "eval", keep=True)
    return [a for layer, a in zip(model.layers, acts) if isinstance(layer, ReLU)]


# ----------------------------------------------------------------------
# checkpoints
#
#   b"WAVG" | u32 version | payload | u32 crc32(payload)
#   payload = u32 len | arch JSON | u32 seed | u32 n_tensors
#             | per tensor: u32 ndim, ndim x u32 dims
#             | parameter buffers (f64 LE)
#             | u32 n_norm | per norm layer and path (clean, adv): mean, var (f64 LE)

MAGIC = b"WAVG"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(model: Classifier) -> bytes:
    arch = json.dumps(asdict(model.arch), sort_keys=True).encode()
    params = model.params()
    parts = [struct.pack("<I", len(arch)), arch, struct.pack("<II", model.seed, len(params))]
    for p in params:
        parts.append(struct.pack("<I", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
    for p in params:
        parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    norms = model.norm_layers
    parts.append(struct.pack("<I", len(norms)))
    for layer in norms:
        for path in PATHS:
            for key in ("mean", "var"):
                if key in layer.stats[path]:
                    parts.append(np.ascontiguousarray(layer.stats[path][key], dtype="<f8").tobytes())
    payload = b"".join(parts)
    return MAGIC + struct.pack("<I", FORMAT_VERSION) + payload + struct.pack("<I", zlib.crc32(payload))


def save_checkpoint(model: Classifier, path) -> int:
    """Write a checkpoint; returns its CRC32."""
    data = checkpoint_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return struct.unpack("<I", data[-4:])[0]


def load_checkpoint(path_or_bytes) -> Classifier:
    if isinstance(path_or_bytes, (bytes, bytearray)):
        data = bytes(path_or_bytes)
    else:
        with open(path_or_bytes, "rb") as fh:
            data = fh.read()
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointError("bad magic: not a WAVG checkpoint")
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    payload, (crc,) = data[8:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError("CRC mismatch: checkpoint is corrupted or truncated")
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(payload):
            raise CheckpointError("truncated checkpoint")
        chunk = payload[off:off + n]
        off += n
        return chunk

    (alen,) = struct.unpack("<I", take(4))
    arch = ArchSpec(**json.loads(take(alen)))
    seed, count = struct.unpack("<II", take(8))
    shapes = []
    for _ in range(count):
        (ndim,) = struct.unpack("<I", take(4))
        shapes.append(struct.unpack(f"<{ndim}I", take(4 * ndim)))
    model = Classifier(arch, seed)
    expected = [p.shape for p in model.params()]
    if [tuple(s) for s in shapes] != expected:
        raise CheckpointError("manifest does not match the stored architecture")
    values = []
    for shape in shapes:
        size = int(np.prod(shape))
        values.append(np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64))
    model.set_params(values)
    (n_norm,) = struct.unpack("<I", take(4))
    if n_norm != len(model.norm_layers):
        raise CheckpointError("normalization layer count mismatch")
    for layer in model.norm_layers:
        for path in PATHS:
            for key in ("mean", "var"):
                if key in layer.stats[path]:
                    size = layer.stats[path][key].size
                    layer.stats[path][key] = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64)
    if off != len(payload):
        raise CheckpointError("trailing bytes in checkpoint payload")
    return model
