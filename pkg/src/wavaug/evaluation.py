"""Clean accuracy, a small common-corruption suite with mCE, attack-quality
metrics (ASR, normalized FID and LPIPS proxies, SCORE) and transfer curves.

The FID and LPIPS quantities here are proxies computed from the repo's own
classifier, not Inception-v3 or a learned perceptual network.  Their
normalizations follow the published formulas so that the bounds and the
monotonicity can be checked.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import fft, ndimage

from .attack import AttackConfig, advwavaug_steps, pgd_steps
from .nn import Batch, Classifier, features, forward, layer_activations, predict
from .wavelet import default_levels

__all__ = [
    "CORRUPTIONS",
    "SEVERITY_TABLE",
    "CorruptionSpec",
    "corrupt",
    "desk_c_suite",
    "corrupt_dataset",
    "accuracy",
    "corruption_errors",
    "mce",
    "mce_from_errors",
    "asr",
    "frechet_distance",
    "normalize_fid",
    "fid_norm",
    "lpips_distance",
    "lpips_norm",
    "score",
    "transfer_eval",
    "MetricReport",
    "resolve_threads",
    "WHITE_BOX",
    "BLACK_BOX",
]

log = logging.getLogger(__name__)

CORRUPTIONS = (
    "gaussian_noise", "shot_noise", "impulse_noise",
    "defocus_blur", "motion_blur",
    "brightness", "contrast",
    "pixelate", "jpeg_quantize",
)

# Per-kind parameter for severities 1..5.
SEVERITY_TABLE: Dict[str, Tuple[float, ...]] = {
    "gaussian_noise": (0.04, 0.06, 0.08, 0.09, 0.10),   # noise std
    "shot_noise": (60, 25, 12, 5, 3),                   # photons per unit intensity
    "impulse_noise": (0.03, 0.06, 0.09, 0.17, 0.27),    # salt-and-pepper fraction
    "defocus_blur": (1.0, 1.5, 2.0, 2.5, 3.0),          # disk radius in pixels
    "motion_blur": (3, 5, 7, 9, 11),                    # line kernel length
    "brightness": (0.1, 0.2, 0.3, 0.4, 0.5),            # additive shift
    "contrast": (0.75, 0.5, 0.4, 0.3, 0.15),            # scale about the image mean
    "pixelate": (2, 3, 4, 5, 6),                        # block size
    "jpeg_quantize": (80, 65, 58, 50, 40),              # quality factor
}

# Standard JPEG luminance quantization table.
_JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

WHITE_BOX = dict(ubf=10.0, lbl=0.0, ubl=0.5)
BLACK_BOX = dict(ubf=200.0, lbl=0.1, ubl=0.6)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in CORRUPTIONS:
            raise ValueError(f"unknown corruption {self.kind!r}; choose from {CORRUPTIONS}")
        if not 0 <= self.severity <= 5:
            raise ValueError(f"severity must be in 0..5, got {self.severity}")

    @property
    def parameter(self) -> Optional[float]:
        return None if self.severity == 0 else SEVERITY_TABLE[self.kind][self.severity - 1]


def _disk(radius: float) -> np.ndarray:
    r = int(math.ceil(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    k = (xx ** 2 + yy ** 2 <= radius ** 2).astype(np.float64)
    return k / k.sum()


def _line(length: int, angle: float) -> np.ndarray:
    half = (length - 1) / 2
    size = int(length) | 1
    k = np.zeros((size, size))
    c = size // 2
    for t in np.linspace(-half, half, int(length)):
        i = int(round(c + t * math.sin(angle)))
        j = int(round(c + t * math.cos(angle)))
        k[i, j] += 1.0
    return k / k.sum()


def _blur(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    for n in range(x.shape[0]):
        for c in range(x.shape[-1]):
            out[n, :, :, c] = ndimage.convolve(x[n, :, :, c], kernel, mode="reflect")
    return out


def _block_mean(x: np.ndarray, b: int, axis: int) -> np.ndarray:
    size = x.shape[axis]
    starts = np.arange(0, size, b)
    counts = np.diff(np.append(starts, size))
    sums = np.add.reduceat(x, starts, axis=axis)
    shape = [1] * x.ndim
    shape[axis] = -1
    return np.repeat(sums / counts.reshape(shape), counts, axis=axis)


def _jpeg(x: np.ndarray, quality: int) -> np.ndarray:
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    q = np.clip(np.floor((_JPEG_LUMA * scale + 50) / 100), 1, 255)
    n, h, w, c = x.shape
    ph, pw = (-h) % 8, (-w) % 8
    xp = np.pad(x, ((0, 0), (0, ph), (0, pw), (0, 0)), mode="edge") * 255.0 - 128.0
    H, W = xp.shape[1] // 8, xp.shape[2] // 8
    blocks = xp.reshape(n, H, 8, W, 8, c)
    coef = fft.dctn(blocks, axes=(2, 4), norm="ortho")
    coef = np.round(coef / q[None, None, :, None, :, None]) * q[None, None, :, None, :, None]
    rec = fft.idctn(coef, axes=(2, 4), norm="ortho").reshape(xp.shape)
    return np.clip((rec + 128.0) / 255.0, 0.0, 1.0)[:, :h, :w, :]


def corrupt(images, spec: CorruptionSpec) -> np.ndarray:
    """Apply one corruption to an ``N x H x W x C`` (or ``H x W x C``) array."""
    x = np.asarray(images, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"expected N x H x W x C images, got shape {x.shape}")
    if spec.severity == 0:
        out = x.copy()
    else:
        out = _CORRUPTORS[spec.kind](x, spec.parameter, np.random.default_rng(spec.seed))
    out = np.clip(out, 0.0, 1.0)
    return out[0] if single else out


def _contrast(x, c, rng):
    mean = x.mean(axis=(1, 2, 3), keepdims=True)
    return (x - mean) * c + mean


def _impulse(x, amount, rng):
    u = rng.random(x.shape)
    out = x.copy()
    out[u < amount / 2] = 0.0
    out[(u >= amount / 2) & (u < amount)] = 1.0
    return out


def _motion(x, length, rng):
    out = np.empty_like(x)
    for n in range(x.shape[0]):
        k = _line(int(length), rng.uniform(-math.pi / 4, math.pi / 4))
        out[n:n + 1] = _blur(x[n:n + 1], k)
    return out


_CORRUPTORS = {
    "gaussian_noise": lambda x, s, rng: x + rng.normal(0.0, s, size=x.shape),
    "shot_noise": lambda x, lam, rng: rng.poisson(x * lam) / lam,
    "impulse_noise": _impulse,
    "defocus_blur": lambda x, r, rng: _blur(x, _disk(r)),
    "motion_blur": _motion,
    "brightness": lambda x, b, rng: x + b,
    "contrast": _contrast,
    "pixelate": lambda x, b, rng: _block_mean(_block_mean(x, int(b), 1), int(b), 2),
    "jpeg_quantize": lambda x, q, rng: _jpeg(x, int(q)),
}


def desk_c_suite(seed: int = 0, kinds: Sequence[str] = CORRUPTIONS,
                 severities: Sequence[int] = (1, 2, 3, 4, 5)) -> List[CorruptionSpec]:
    """Every (kind, severity) pair, each with its own derived seed."""
    return [CorruptionSpec(k, s, seed * 1_000 + 10 * i + s)
            for i, k in enumerate(kinds) for s in severities]


def corrupt_dataset(data: Batch, spec: CorruptionSpec) -> Batch:
    return Batch(corrupt(data.images, spec), data.labels, data.num_classes)


def resolve_threads(threads: Optional[int] = None) -> int:
    """Explicit value, else ``WAVAUG_THREADS``, else 1."""
    if threads is None:
        threads = int(os.environ.get("WAVAUG_THREADS", "1"))
    if threads < 1:
        raise ValueError("threads must be >= 1")
    return threads


def _chunked(fn, n: int, chunk: int, threads: int) -> list:
    # results come back in chunk order whatever the thread count
    spans = [(i, min(i + chunk, n)) for i in range(0, n, chunk)]
    if threads == 1:
        return [fn(a, b) for a, b in spans]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda ab: fn(*ab), spans))


def _predictions(model: Classifier, images, path: str, threads: int = 1, chunk: int = 250):
    images = np.asarray(images, dtype=np.float64)
    parts = _chunked(lambda a, b: predict(forward(model, images[a:b], path=path, mode="eval")),
                     len(images), chunk, threads)
    return np.concatenate(parts)


def accuracy(model: Classifier, dataset: Batch, path: str = "clean",
             threads: Optional[int] = None) -> float:
    """Top-1 accuracy in eval mode; ties go to the lowest class index."""
    if dataset is None or len(dataset) == 0:
        raise ValueError("empty dataset")
    pred = _predictions(model, dataset.images, path, resolve_threads(threads))
    return float(np.count_nonzero(pred == dataset.labels)) / len(dataset)


def corruption_errors(model: Classifier, dataset: Batch,
                      suite: Optional[Sequence[CorruptionSpec]] = None,
                      path: str = "clean", threads: Optional[int] = None,
                      corrupted: Optional[Dict[CorruptionSpec, Batch]] = None
                      ) -> Dict[str, Dict[int, float]]:
    """Top-1 error per kind and severity.

    ``corrupted`` may hold pre-built corrupted copies so several models can
    share one set.
    """
    suite = desk_c_suite() if suite is None else suite
    out: Dict[str, Dict[int, float]] = {}
    for spec in suite:
        data = corrupted[spec] if corrupted is not None else corrupt_dataset(dataset, spec)
        out.setdefault(spec.kind, {})[spec.severity] = 1.0 - accuracy(model, data, path, threads)
    return out


def mce_from_errors(errors: Dict[str, Dict[int, float]],
                    baseline_errors: Dict[str, Dict[int, float]]
                    ) -> Tuple[Dict[str, float], float]:
    """``CE_k = 100 * sum_s err_k,s / sum_s base_k,s`` and their mean."""
    ce = {}
    for kind, by_sev in errors.items():
        if kind not in baseline_errors or set(baseline_errors[kind]) != set(by_sev):
            raise ValueError(f"baseline has no matching entries for {kind!r}")
        sev = sorted(by_sev)
        denom = math.fsum(baseline_errors[kind][s] for s in sev)
        if denom == 0:
            raise ValueError(f"baseline has zero error on {kind!r}; CE undefined")
        ce[kind] = 100.0 * math.fsum(by_sev[s] for s in sev) / denom
    return ce, math.fsum(ce.values()) / len(ce)


def mce(model: Classifier, baseline_model: Classifier, dataset: Batch,
        suite: Optional[Sequence[CorruptionSpec]] = None, path: str = "clean",
        threads: Optional[int] = None) -> Tuple[Dict[str, float], float]:
    """Corruption error normalized by ``baseline_model`` (a vanilla checkpoint)."""
    suite = desk_c_suite() if suite is None else suite
    corrupted = {spec: corrupt_dataset(dataset, spec) for spec in suite}
    errs = corruption_errors(model, dataset, suite, path, threads, corrupted)
    base = errs if baseline_model is model else corruption_errors(
        baseline_model, dataset, suite, path, threads, corrupted)
    return mce_from_errors(errs, base)


def asr(model: Classifier, adv_images, labels, path: str = "clean") -> float:
    """Fraction of adversarial inputs the model gets wrong."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty batch")
    pred = predict(forward(model, adv_images, path=path, mode="eval"))
    return float(np.count_nonzero(pred != labels)) / labels.size


def _shrunk_cov(f: np.ndarray, shrinkage) -> np.ndarray:
    n, d = f.shape
    cov = np.cov(f, rowvar=False).reshape(d, d)
    if shrinkage == "auto":
        shrinkage = 0.0 if n > d else d / (n + d)
    if shrinkage is None or shrinkage == 0:
        if n <= d:
            raise ValueError(
                f"covariance is degenerate with {n} samples in {d} dims; pass a shrinkage")
        return cov
    if not 0 < shrinkage <= 1:
        raise ValueError("shrinkage must lie in (0, 1]")
    target = np.trace(cov) / d
    return (1 - shrinkage) * cov + shrinkage * target * np.eye(d)


def _psd_sqrt(c: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(c)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a, b, shrinkage="auto") -> float:
    """Frechet distance between Gaussian fits of two feature sets (rows are samples).

    ``shrinkage`` blends each covariance toward a scaled identity; ``"auto"``
    does so only when samples do not outnumber dimensions, ``None`` never
    does and raises instead.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least two samples per feature set")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    ca, cb = _shrunk_cov(a, shrinkage), _shrunk_cov(b, shrinkage)
    diff = a.mean(axis=0) - b.mean(axis=0)
    ra = _psd_sqrt(ca)
    cross = np.sqrt(np.clip(np.linalg.eigvalsh(ra @ cb @ ra), 0.0, None)).sum()
    return max(0.0, float(diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * cross))


def normalize_fid(raw: float, ubf: float = WHITE_BOX["ubf"]) -> float:
    """``sqrt(1 - min(raw, ubf) / ubf)``."""
    if ubf <= 0:
        raise ValueError("ubf must be positive")
    if raw < 0:
        raise ValueError("raw distance must be non-negative")
    return math.sqrt(1.0 - min(raw, ubf) / ubf)


def fid_norm(clean_features, adv_features, ubf: float = WHITE_BOX["ubf"],
             shrinkage="auto") -> float:
    return normalize_fid(frechet_distance(clean_features, adv_features, shrinkage), ubf)


def _unit(a: np.ndarray, eps: float = 1e-10) -> np.ndarray:
    return a / (np.sqrt((a * a).sum(axis=-1, keepdims=True)) + eps)


def lpips_distance(model: Classifier, x, y, path: str = "clean") -> np.ndarray:
    """Per-pair perceptual proxy.

    For every ReLU activation of the classifier the channel vector at each
    position is scaled to unit length; the squared difference is averaged
    over positions and then over layers.
    """
    fx = layer_activations(model, x, path=path)
    fy = layer_activations(model, y, path=path)
    per_layer = []
    for a, b in zip(fx, fy):
        d = ((_unit(a) - _unit(b)) ** 2).sum(axis=-1)
        per_layer.append(d.reshape(d.shape[0], -1).mean(axis=1))
    return np.mean(per_layer, axis=0)


def lpips_norm(distances, lbl: float = WHITE_BOX["lbl"], ubl: float = WHITE_BOX["ubl"]) -> float:
    """Map a mean distance ``d`` to ``sqrt(1 - (clamp(d, lbl, ubl) - lbl) / (ubl - lbl))``.

    With ``lbl = 0`` and ``ubl = 0.5`` this is ``sqrt(1 - 2 d)``.  Zero
    distance maps to 1 and anything at or above ``ubl`` maps to 0.
    """
    if lbl >= ubl:
        raise ValueError(f"need lbl < ubl, got {lbl} >= {ubl}")
    d = float(np.mean(distances))
    clamped = min(max(d, lbl), ubl)
    return math.sqrt(max(0.0, 1.0 - (clamped - lbl) / (ubl - lbl)))


def score(asr_value: float, fid_value: float, lpips_value: float) -> float:
    """``100 * ASR * FID * LPIPS``."""
    for name, v in (("asr", asr_value), ("fid", fid_value), ("lpips", lpips_value)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    return 100.0 * asr_value * fid_value * lpips_value


def _quality(target: Classifier, x, x_adv, labels, feat_clean, ubf, lbl, ubl) -> dict:
    a = asr(target, x_adv, labels)
    f = fid_norm(feat_clean, features(target, x_adv), ubf)
    lp = lpips_norm(lpips_distance(target, x, x_adv), lbl, ubl)
    return {"asr": a, "fid_norm": f, "lpips_norm": lp, "score": score(a, f, lp)}


def transfer_eval(source: Classifier, target: Classifier, attack_config: AttackConfig,
                  dataset: Batch, iterations: int = 100, budget: float = 16 / 255,
                  ubf: float = BLACK_BOX["ubf"], lbl: float = BLACK_BOX["lbl"],
                  ubl: float = BLACK_BOX["ubl"]) -> dict:
    """Attack ``source`` with many small steps and score each step on ``target``.

    PGD uses ``alpha = budget / iterations`` inside an ``budget`` ball.
    AdvWavAug uses its schedule scaled by ``(budget * 255) / iterations`` so
    that both reach a comparable final strength.  Clipping is off, as in the
    published black-box protocol.  Returns ``{"start": point, "curve": [..]}``
    with one curve point per iteration.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if source is target or np.array_equal(
            np.concatenate([p.ravel() for p in source.params()]),
            np.concatenate([p.ravel() for p in target.params()])):
        log.warning("source and target checkpoints are identical; this is a white-box run")
    x, y = dataset.images, dataset.labels
    feat_clean = features(target, x)
    start = _quality(target, x, x, y, feat_clean, ubf, lbl, ubl)
    start["iteration"] = 0
    path = "clean"
    if attack_config.kind == "pgd":
        cfg = replace(attack_config, steps=iterations, epsilon=budget,
                      alpha=budget / iterations, clamp_output=False, path=path)
        steps = pgd_steps(source, x, y, cfg)
    elif attack_config.kind == "advwavaug":
        factor = budget * 255.0 / iterations
        levels = attack_config.levels
        sched = attack_config.resolve_schedule(levels or default_levels(x.shape[1:3]))
        cfg = replace(attack_config, steps=iterations, schedule=sched.scaled(factor),
                      clamp_output=False, path=path)
        steps = (r.images for r in advwavaug_steps(source, x, y, cfg))
    else:
        raise ValueError("transfer evaluation needs a gradient attack (pgd or advwavaug)")
    curve = []
    for i, x_adv in enumerate(steps, start=1):
        point = _quality(target, x, x_adv, y, feat_clean, ubf, lbl, ubl)
        point["iteration"] = i
        curve.append(point)
    return {"attack": attack_config.kind, "iterations": iterations, "start": start,
            "curve": curve}


@dataclass
class MetricReport:
    """Everything an ``eval`` run measures; unset metrics stay ``None``."""

    model: str = "model"
    top1_acc: Dict[str, float] = field(default_factory=dict)
    corruption_error: Dict[str, Dict[int, float]] = field(default_factory=dict)
    ce: Dict[str, float] = field(default_factory=dict)
    mce: Optional[float] = None
    mce_normalized: bool = True
    asr: Optional[float] = None
    fid_norm: Optional[float] = None
    lpips_norm: Optional[float] = None
    score: Optional[float] = None
    baseline: Optional[str] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["corruption_error"] = {k: {str(s): v for s, v in sev.items()}
                                 for k, sev in self.corruption_error.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "MetricReport":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown report keys: {sorted(unknown)}")
        data = dict(data)
        data["corruption_error"] = {k: {int(s): v for s, v in sev.items()}
                                    for k, sev in data.get("corruption_error", {}).items()}
        return cls(**data)

    def csv_row(self) -> dict:
        row = {"model": self.model}
        row.update({f"acc_{k}": v for k, v in self.top1_acc.items()})
        row.update({f"ce_{k}": v for k, v in self.ce.items()})
        row["mce"] = self.mce
        for k in ("asr", "fid_norm", "lpips_norm", "score"):
            row[k] = getattr(self, k)
        return row

    @staticmethod
    def table_csv(reports: Iterable["MetricReport"]) -> str:
        """Model rows by {clean, corruption kinds, mCE, attack metrics} columns."""
        rows = [r.csv_row() for r in reports]
        cols: List[str] = []
        for r in rows:
            cols.extend(c for c in r if c not in cols)
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: ("" if r.get(c) is None else r.get(c)) for c in cols})
        return buf.getvalue()
