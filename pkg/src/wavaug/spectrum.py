"""Wavelet-domain perturbation machinery.

Coefficients below a magnitude threshold are treated as sparse; the
adversarial variable is a per-coefficient multiplier ``1 + delta`` so that
exact zeros can never be switched on.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .wavelet import FilterBank, WaveletPyramid, dwt2d

__all__ = [
    "AttentionMap",
    "BandStepSchedule",
    "PerturbBound",
    "TABLE1",
    "threshold_filter",
    "quantile_threshold",
    "per_sample_threshold",
    "apply_attention",
    "perturbation_bound",
    "attention_gradient",
    "table1_schedule",
]

# Step sizes per band, columns H1..H6 then L (finest band first).
TABLE1 = {
    "S1": (0.50, 0.07, 0.05, 0.03, 0.02, 0.010, 0.001),
    "S2": (0.40, 0.06, 0.04, 0.03, 0.02, 0.010, 0.001),
    "S3": (0.30, 0.05, 0.04, 0.03, 0.02, 0.015, 0.015),
    "S4": (0.10, 0.30, 0.05, 0.03, 0.02, 0.010, 0.010),
    "S5": (0.09, 0.09, 0.13, 0.15, 0.17, 0.150, 0.150),
    "S6": (0.09, 0.09, 0.09, 0.11, 0.13, 0.150, 0.170),
}


@dataclass
class AttentionMap:
    """Multiplier field ``1 + delta`` stored as its deviation ``delta``."""

    delta: WaveletPyramid

    @classmethod
    def identity(cls, like: WaveletPyramid) -> "AttentionMap":
        return cls(like.zeros_like())

    def multiplier(self) -> WaveletPyramid:
        return self.delta.map(lambda d: 1.0 + d)

    def norm(self, p: float = 2) -> np.ndarray:
        """p-norm of ``delta`` per leading index."""
        return np.linalg.norm(self.delta.flatten(), ord=p, axis=-1)


@dataclass
class BandStepSchedule:
    h_steps: Tuple[float, ...]
    l_step: float
    setting_id: str = "custom"

    def __post_init__(self) -> None:
        self.h_steps = tuple(float(s) for s in self.h_steps)
        self.l_step = float(self.l_step)
        if not self.h_steps:
            raise ValueError("schedule needs at least one detail step")
        if any(s < 0 for s in self.h_steps) or self.l_step < 0:
            raise ValueError("step sizes must be non-negative")

    @property
    def levels(self) -> int:
        return len(self.h_steps)

    @classmethod
    def uniform(cls, alpha: float, levels: int) -> "BandStepSchedule":
        return cls((alpha,) * levels, alpha, "uniform")

    def scaled(self, factor: float) -> "BandStepSchedule":
        return BandStepSchedule(tuple(s * factor for s in self.h_steps), self.l_step * factor,
                                self.setting_id)

    def as_pyramid(self, like: WaveletPyramid) -> WaveletPyramid:
        """Broadcast the band steps onto a pyramid of the given layout."""
        if like.levels != self.levels:
            raise ValueError(
                f"schedule has {self.levels} detail levels but the pyramid has {like.levels}"
            )
        bands = [np.full_like(like.approx, self.l_step)]
        for step, trio in zip(self.h_steps, like.details):
            bands.extend(np.full_like(b, step) for b in trio)
        return WaveletPyramid.from_bands(bands, like.original_shape)

    def to_dict(self) -> dict:
        return {"setting": self.setting_id, "h_steps": list(self.h_steps), "l_step": self.l_step}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "BandStepSchedule":
        unknown = set(data) - {"setting", "h_steps", "l_step"}
        if unknown:
            raise ValueError(f"unknown schedule keys: {sorted(unknown)}")
        return cls(tuple(data["h_steps"]), data["l_step"], data.get("setting", "custom"))

    @classmethod
    def from_json(cls, text: str) -> "BandStepSchedule":
        return cls.from_dict(json.loads(text))


def table1_schedule(setting: str, levels: int = 6) -> BandStepSchedule:
    """One row of the band step table, truncated to ``levels`` detail bands.

    When fewer than six levels are used the finest-first detail entries are
    kept and the row's lowest-band entry is used for the approx band.
    """
    try:
        row = TABLE1[setting.upper()]
    except KeyError:
        raise ValueError(f"unknown setting {setting!r}; choose from {sorted(TABLE1)}") from None
    if not 1 <= levels <= 6:
        raise ValueError(f"levels must be in 1..6, got {levels}")
    return BandStepSchedule(row[:levels], row[6], setting.upper())


def threshold_filter(pyramid: WaveletPyramid, T) -> Tuple[WaveletPyramid, np.ndarray]:
    """Zero every coefficient with ``|c| < T``.

    ``T`` may be a scalar or an array over the pyramid's leading axes (one
    threshold per image).  Returns the filtered pyramid and the number of
    retained coefficients, shaped like ``T``.
    """
    T = np.asarray(T, dtype=np.float64)
    if np.any(T < 0):
        raise ValueError("threshold must be non-negative")
    lead = pyramid.lead_shape
    Tb = T.reshape(T.shape + (1,) * (len(lead) - T.ndim + 2))
    filtered = pyramid.map(lambda b: np.where(np.abs(b) < Tb, 0.0, b))
    keep = np.abs(pyramid.flatten()) >= T.reshape(T.shape + (1,) * (len(lead) - T.ndim + 1))
    count = keep.reshape(T.shape + (-1,)).sum(axis=-1)
    return filtered, count


def quantile_threshold(pyramid: WaveletPyramid, keep_fraction: float) -> float:
    """Threshold that keeps ``ceil(keep_fraction * size)`` of the magnitudes."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    if keep_fraction == 1.0:
        return 0.0
    mags = np.sort(np.abs(pyramid.flatten()).ravel())[::-1]
    k = math.ceil(keep_fraction * mags.size)
    return float(mags[k - 1])


def per_sample_threshold(pyramid: WaveletPyramid, keep_fraction: float) -> np.ndarray:
    """:func:`quantile_threshold` applied independently to each leading-axis-0 item."""
    n = pyramid.lead_shape[0] if pyramid.lead_shape else None
    if n is None:
        return np.asarray(quantile_threshold(pyramid, keep_fraction))
    return np.array([quantile_threshold(pyramid[i], keep_fraction) for i in range(n)])


def apply_attention(pyramid: WaveletPyramid, attention: AttentionMap) -> WaveletPyramid:
    """Elementwise ``z * (1 + delta)``."""
    return pyramid.map(lambda z, d: z * (1.0 + d), attention.delta)


@dataclass
class PerturbBound:
    epsilon_f: float
    n_nonsparse: int
    threshold: float
    p_norm: float = 2
    P: float = 1.0
    Q: float = 1.0
    epsilon_tilde: float = field(init=False)

    def __post_init__(self) -> None:
        self.epsilon_tilde = perturbation_bound(
            self.epsilon_f, self.n_nonsparse, self.threshold, self.P, self.Q, self.p_norm)


def perturbation_bound(epsilon_f, n, T, P=1.0, Q=1.0, p=2):
    """Upper bound ``P*Q*eps / (n**(1/p) * T)`` on ``||delta||_p``."""
    if p not in (2, np.inf, math.inf, "inf"):
        raise ValueError(f"p must be 2 or inf, got {p}")
    n = np.asarray(n)
    T = np.asarray(T, dtype=np.float64)
    if np.any(n < 1):
        raise ValueError("bound undefined: no non-sparse coefficients (n = 0)")
    if np.any(T <= 0):
        raise ValueError("bound undefined: threshold must be positive")
    if P <= 0 or Q <= 0:
        raise ValueError("P and Q must be positive")
    root = np.sqrt(n) if p == 2 else 1.0
    out = P * Q * np.asarray(epsilon_f, dtype=np.float64) / (root * T)
    return float(out) if out.ndim == 0 else out


def attention_gradient(image_grad, z_f: WaveletPyramid,
                       bank: "FilterBank | str | None" = None) -> WaveletPyramid:
    """Gradient of the loss w.r.t. ``delta`` given the image-space gradient.

    ``x = W^-1(z * (1 + delta))`` and ``W`` is orthogonal, so the pullback
    of an image gradient ``g`` is ``W(g) * z``.
    """
    g = np.asarray(image_grad, dtype=np.float64)
    if g.shape != z_f.lead_shape + tuple(z_f.original_shape):
        raise ValueError(
            f"shape mismatch: gradient {g.shape} vs pyramid over "
            f"{z_f.lead_shape + tuple(z_f.original_shape)}"
        )
    gw = dwt2d(g, z_f.levels, bank)
    return gw.map(np.multiply, z_f)
