"""Training loops: vanilla, AdvProp-style dual path, and plain adversarial training."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np

from .attack import AttackConfig, augment
from .data import iterate_batches
from .nn import ArchSpec, Batch, Classifier, backward, cross_entropy, predict, sgd_step

__all__ = [
    "TrainConfig",
    "EpochRecord",
    "TrainReport",
    "learning_rate",
    "train",
    "train_vanilla",
    "train_advprop",
    "train_normal_at",
    "PRESETS",
    "TRAIN_MODES",
]

log = logging.getLogger(__name__)

TRAIN_MODES = ("vanilla", "advprop", "normal_at")


@dataclass
class TrainConfig:
    epochs: int = 20
    warmup_epochs: int = 1
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-5
    mode: str = "vanilla"
    augmenter: str = "none"
    attack: AttackConfig = field(default_factory=AttackConfig)
    arch: ArchSpec = field(default_factory=ArchSpec)
    seed: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.attack, dict):
            self.attack = AttackConfig.from_dict(self.attack)
        if isinstance(self.arch, dict):
            self.arch = ArchSpec(**self.arch)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {TRAIN_MODES}")
        if self.augmenter not in ("none", "gaussian", "pgd", "advwavaug"):
            raise ValueError(f"unknown augmenter {self.augmenter!r}")
        if self.augmenter != "none" and self.attack.kind != self.augmenter:
            self.attack = replace(self.attack, kind=self.augmenter)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attack"] = self.attack.to_dict()
        d["arch"]["widths"] = list(self.arch.widths)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


# Recipes kept for reference; the ImageNet one is far beyond desk scale.
PRESETS = {
    "desk": dict(epochs=20, warmup_epochs=1, batch_size=128, lr=0.05),
    "imagenet-105": dict(epochs=105, warmup_epochs=5, batch_size=256, lr=0.2,
                           momentum=0.9, weight_decay=5e-5),
    "pgd-at": dict(augmenter="pgd", mode="normal_at",
                   attack=AttackConfig(kind="pgd", epsilon=2 / 255, alpha=2 / 255, steps=1)),
    "advprop-pgd": dict(augmenter="pgd", mode="advprop",
                        attack=AttackConfig(kind="pgd", epsilon=1 / 255, alpha=1 / 255, steps=1)),
    "advprop-advwavaug": dict(augmenter="advwavaug", mode="advprop",
                              attack=AttackConfig(kind="advwavaug", schedule="S3", steps=1)),
    "advprop-gaussian": dict(augmenter="gaussian", mode="advprop",
                             attack=AttackConfig(kind="gaussian", mean=0.0, std=0.001)),
}


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    clean_loss: float
    adv_loss: Optional[float]
    train_acc: float


@dataclass
class TrainReport:
    config: dict
    epochs: List[EpochRecord] = field(default_factory=list)
    checkpoint_crc: Optional[int] = None
    checkpoint_path: Optional[str] = None
    wall_clock: float = 0.0

    def to_jsonl(self, include_timing: bool = False) -> str:
        """One JSON record per epoch; timing is opt-in so reruns compare byte-equal."""
        lines = [json.dumps(asdict(r), sort_keys=True) for r in self.epochs]
        summary = {"summary": True, "checkpoint_crc": self.checkpoint_crc,
                   "checkpoint_path": self.checkpoint_path}
        if include_timing:
            summary["wall_clock"] = self.wall_clock
        lines.append(json.dumps(summary, sort_keys=True))
        return "\n".join(lines) + "\n"


def learning_rate(t: float, base: float, epochs: int, warmup: int) -> float:
    """Linear warmup from 0 over ``warmup`` epochs then cosine decay to 0.

    ``t`` is the fractional epoch (epoch + step / steps_per_epoch).
    """
    if warmup > 0 and t < warmup:
        return base * t / warmup
    span = epochs - warmup
    if span <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * min(t - warmup, span) / span))


def _clean_step(model, batch, path, mode="train"):
    return backward(model, batch.images, batch.labels, path=path, mode=mode)


def train(dataset: Batch, config: TrainConfig, model: Optional[Classifier] = None,
          epoch_callback=None) -> Tuple[Classifier, TrainReport]:
    """Run one of the three training modes; deterministic given ``config.seed``."""
    if dataset is None or len(dataset) == 0:
        raise ValueError("empty dataset")
    if config.mode != "vanilla" and config.augmenter == "none":
        raise ValueError(f"mode {config.mode!r} needs an augmenter (gaussian, pgd or advwavaug)")
    start = time.perf_counter()
    model = model or Classifier(config.arch, seed=config.seed)
    rng = np.random.default_rng([config.seed, 1])
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    report = TrainReport(config=config.to_dict())
    attack = config.attack
    # attack-time forwards read the statistics of the path the adversarial batch trains
    if config.mode == "normal_at":
        attack = replace(attack, path="clean")
    step = 0
    for epoch in range(config.epochs):
        clean_losses, adv_losses, correct, seen = [], [], 0, 0
        for i, batch in enumerate(iterate_batches(dataset, config.batch_size, rng)):
            lr = learning_rate(epoch + i / steps_per_epoch, config.lr, config.epochs,
                               config.warmup_epochs)
            if config.mode == "vanilla":
                res = _clean_step(model, batch, "clean")
                grads = res.param_grads
                clean_losses.append(res.loss)
                logits = res.logits
            else:
                x_adv = augment(model, batch.images, batch.labels, attack,
                                seed=config.seed * 1_000_003 + step)
                if config.mode == "advprop":
                    rc = _clean_step(model, batch, "clean")
                    ra = backward(model, x_adv, batch.labels, path="adv", mode="train")
                    grads = [gc + ga for gc, ga in zip(rc.param_grads, ra.param_grads)]
                    clean_losses.append(rc.loss)
                    adv_losses.append(ra.loss)
                    logits = rc.logits
                else:
                    n = len(batch)
                    joint = np.concatenate([batch.images, x_adv])
                    labels = np.concatenate([batch.labels, batch.labels])
                    # mean over 2n doubled == mean(clean) + mean(adv)
                    rj = backward(model, joint, labels, path="clean", mode="train")
                    grads = [2.0 * g for g in rj.param_grads]
                    clean_losses.append(cross_entropy(rj.logits[:n], batch.labels))
                    adv_losses.append(cross_entropy(rj.logits[n:], batch.labels))
                    logits = rj.logits[:n]
            sgd_step(model, grads, lr, config.momentum, config.weight_decay)
            correct += int((predict(logits) == batch.labels).sum())
            seen += len(batch)
            step += 1
        record = EpochRecord(
            epoch=epoch,
            lr=learning_rate(epoch, config.lr, config.epochs, config.warmup_epochs),
            clean_loss=float(np.mean(clean_losses)),
            adv_loss=float(np.mean(adv_losses)) if adv_losses else None,
            train_acc=correct / seen,
        )
        report.epochs.append(record)
        log.info("epoch %d: clean %.4f adv %s acc %.4f", epoch, record.clean_loss,
                 record.adv_loss, record.train_acc)
        if epoch_callback is not None:
            epoch_callback(model, record)
    report.wall_clock = time.perf_counter() - start
    return model, report


def train_vanilla(dataset: Batch, config: TrainConfig) -> Tuple[Classifier, TrainReport]:
    return train(dataset, _with(config, mode="vanilla", augmenter="none"))


def train_advprop(dataset: Batch, config: TrainConfig) -> Tuple[Classifier, TrainReport]:
    return train(dataset, _with(config, mode="advprop"))


def train_normal_at(dataset: Batch, config: TrainConfig) -> Tuple[Classifier, TrainReport]:
    return train(dataset, _with(config, mode="normal_at"))


def _with(config: TrainConfig, **changes) -> TrainConfig:
    d = {f: getattr(config, f) for f in TrainConfig.__dataclass_fields__}
    d.update(changes)
    return TrainConfig(**d)
