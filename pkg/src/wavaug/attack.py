"""Perturbation generators: wavelet-domain attention attack, PGD, Gaussian noise."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator, NamedTuple, Optional, Union

import numpy as np

from .nn import Classifier, backward
from .spectrum import (AttentionMap, BandStepSchedule, apply_attention, attention_gradient,
                       per_sample_threshold, table1_schedule, threshold_filter)
from .wavelet import WaveletPyramid, default_levels, dwt2d, get_bank, idwt2d

__all__ = [
    "AttackConfig",
    "WavAugResult",
    "advwavaug_attack",
    "advwavaug_steps",
    "pgd_steps",
    "pgd_attack",
    "gaussian_augment",
    "augment",
    "ATTACK_KINDS",
    "STEP_RULES",
]

ATTACK_KINDS = ("advwavaug", "pgd", "gaussian")
STEP_RULES = ("raw", "sign")


@dataclass
class AttackConfig:
    """Settings for any of the three augmenters.

    ``schedule`` is used by ``advwavaug`` (a step-table setting name S1..S6 or
    an explicit :class:`BandStepSchedule`); ``epsilon``/``alpha`` by ``pgd``;
    ``mean``/``std`` by ``gaussian``.  ``keep_fraction`` optionally thresholds the wavelet
    coefficients before attacking so only that fraction stays non-zero.
    ``step_rule`` picks the attention update: ``"raw"`` adds ``alpha * grad``
    as the training pseudocode writes it; ``"sign"`` adds ``alpha * sign(grad)``
    so each step moves a multiplier by exactly its band step, independent of
    how confident the model is.
    """

    kind: str = "advwavaug"
    steps: int = 1
    schedule: Union[str, BandStepSchedule] = "S3"
    levels: Optional[int] = None
    bank: str = "sym8"
    epsilon: float = 1.0 / 255
    alpha: float = 1.0 / 255
    mean: float = 0.0
    std: float = 0.001
    clamp_output: bool = True
    keep_fraction: Optional[float] = None
    path: str = "adv"
    seed: int = 0
    step_rule: str = "raw"

    def __post_init__(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; choose from {ATTACK_KINDS}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.epsilon < 0 or self.alpha < 0:
            raise ValueError("epsilon and alpha must be non-negative")
        if self.std < 0:
            raise ValueError("std must be non-negative")
        if self.step_rule not in STEP_RULES:
            raise ValueError(f"unknown step_rule {self.step_rule!r}; choose from {STEP_RULES}")
        if isinstance(self.schedule, dict):
            self.schedule = BandStepSchedule.from_dict(self.schedule)

    def resolve_schedule(self, levels: int) -> BandStepSchedule:
        if isinstance(self.schedule, BandStepSchedule):
            return self.schedule
        return table1_schedule(self.schedule, levels)

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(self.schedule, BandStepSchedule):
            d["schedule"] = self.schedule.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "AttackConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown attack config keys: {sorted(unknown)}")
        return cls(**data)


class WavAugResult(NamedTuple):
    images: np.ndarray           # N x H x W x C adversarial images
    attention: AttentionMap      # final delta, laid out over (N, C, H, W)
    coeffs: WaveletPyramid       # z_f, the (optionally thresholded) clean coefficients
    adv_coeffs: WaveletPyramid   # z_f * (1 + delta)
    n_nonsparse: Optional[np.ndarray]
    threshold: Optional[np.ndarray]


def _nchw(images: np.ndarray) -> np.ndarray:
    return np.asarray(images, dtype=np.float64).transpose(0, 3, 1, 2)


def _nhwc(x: np.ndarray) -> np.ndarray:
    return x.transpose(0, 2, 3, 1)


def _prepare(config: AttackConfig, images):
    bank = get_bank(config.bank)
    x = _nchw(images)
    levels = config.levels or default_levels(x.shape[-2:])
    schedule = config.resolve_schedule(levels)
    if schedule.levels != levels:
        raise ValueError(
            f"schedule has {schedule.levels} detail levels but the pyramid has {levels}")
    z = dwt2d(x, levels, bank)
    n_keep = thresh = None
    if config.keep_fraction is not None:
        thresh = per_sample_threshold(z, config.keep_fraction)
        z, n_keep = threshold_filter(z, thresh)
    return bank, z, schedule.as_pyramid(z), n_keep, thresh


def advwavaug_steps(model: Classifier, images, labels, config: Optional[AttackConfig] = None
                    ) -> Iterator[WavAugResult]:
    """Yield the attack state after each of ``config.steps`` updates."""
    config = config or AttackConfig()
    bank, z, alpha, n_keep, thresh = _prepare(config, images)
    attention = AttentionMap.identity(z)
    for _ in range(config.steps):
        x_cur = idwt2d(apply_attention(z, attention), bank)
        grad = backward(model, _nhwc(x_cur), labels, path=config.path, mode="eval",
                        reduction="sum").input_grad
        step = attention_gradient(_nchw(grad), z, bank)
        if config.step_rule == "sign":
            step = step.map(np.sign)
        attention = AttentionMap(attention.delta + alpha.map(np.multiply, step))
        adv_coeffs = apply_attention(z, attention)
        x_adv = _nhwc(idwt2d(adv_coeffs, bank))
        if config.clamp_output:
            x_adv = np.clip(x_adv, 0.0, 1.0)
        yield WavAugResult(x_adv, attention, z, adv_coeffs, n_keep, thresh)


def advwavaug_attack(model: Classifier, images, labels, config: Optional[AttackConfig] = None
                     ) -> WavAugResult:
    """Gradient ascent on a per-coefficient multiplicative wavelet attention map.

    Each step adds ``alpha * grad`` (or ``alpha * sign(grad)`` with
    ``step_rule="sign"``), ``alpha`` taken per band from the schedule.  Zero
    coefficients get zero gradient, so sparsity survives either rule.  The
    gradient is that of the summed per-sample loss through the model's
    ``config.path`` statistics in eval mode, so running statistics are never
    touched.
    """
    for result in advwavaug_steps(model, images, labels, config):
        pass
    return result


def pgd_steps(model: Classifier, images, labels, config: Optional[AttackConfig] = None
              ) -> Iterator[np.ndarray]:
    config = config or AttackConfig(kind="pgd")
    x = np.asarray(images, dtype=np.float64)
    delta = np.zeros_like(x)
    for _ in range(config.steps):
        if config.epsilon == 0:
            yield x.copy()
            continue
        x_cur = np.clip(x + delta, 0.0, 1.0) if config.clamp_output else x + delta
        grad = backward(model, x_cur, labels, path=config.path, mode="eval",
                        reduction="sum").input_grad
        delta = np.clip(delta + config.alpha * np.sign(grad), -config.epsilon, config.epsilon)
        out = x + delta
        yield np.clip(out, 0.0, 1.0) if config.clamp_output else out


def pgd_attack(model: Classifier, images, labels, config: Optional[AttackConfig] = None
               ) -> np.ndarray:
    """L-inf sign-gradient ascent with projection onto the epsilon ball."""
    for out in pgd_steps(model, images, labels, config):
        pass
    return out


def gaussian_augment(images, mean: float = 0.0, std: float = 0.001, seed: int = 0) -> np.ndarray:
    """Add i.i.d. N(mean, std^2) pixel noise and clamp to [0, 1]."""
    if std < 0:
        raise ValueError("std must be non-negative")
    x = np.asarray(images, dtype=np.float64)
    noise = np.random.default_rng(seed).normal(mean, std, size=x.shape) if std else mean
    return np.clip(x + noise, 0.0, 1.0)


def augment(model: Classifier, images, labels, config: AttackConfig, seed: Optional[int] = None
            ) -> np.ndarray:
    """Dispatch on ``config.kind`` and return only the augmented images."""
    if config.kind == "advwavaug":
        return advwavaug_attack(model, images, labels, config).images
    if config.kind == "pgd":
        return pgd_attack(model, images, labels, config)
    return gaussian_augment(images, config.mean, config.std,
                            config.seed if seed is None else seed)
