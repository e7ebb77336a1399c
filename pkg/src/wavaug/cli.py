"""``wavaug`` command line.

Every subcommand accepts ``--config FILE`` (a JSON object keyed by the long
flag names with dashes turned into underscores); flags given on the command
line win over the file.  Unknown keys or flags are rejected before any
computation starts.

Exit codes: 0 success, 1 invalid usage or configuration, 2 failure while
running (I/O, corrupt inputs, a failing self test).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import __version__
from .attack import AttackConfig, advwavaug_attack, augment
from .data import DatasetSource, export_images, load_dataset
from .evaluation import (CORRUPTIONS, WHITE_BOX, CorruptionSpec, MetricReport, accuracy, asr,
                         corrupt_dataset, corruption_errors, desk_c_suite, fid_norm,
                         lpips_distance, lpips_norm, mce_from_errors, resolve_threads, score,
                         transfer_eval)
from .nn import ArchSpec, Batch, features, load_checkpoint, save_checkpoint
from .spectrum import TABLE1, BandStepSchedule
from .training import PRESETS, TrainConfig, train

__all__ = ["main", "run", "ConfigError"]

log = logging.getLogger("wavaug")


class ConfigError(ValueError):
    """Bad flags or configuration; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


# Defaults per subcommand.  Parsed flags default to SUPPRESS so that only
# flags actually given override the config file.
_DATA = {"data_format": "synthetic", "data_path": None, "labels_path": None,
         "split": "test", "size": None, "data_seed": 0, "generator": "shapes"}

DEFAULTS: Dict[str, dict] = {
    "train": {**_DATA, "split": "train", "preset": None, "mode": "vanilla",
              "augmenter": "none", "schedule": "S3", "step_rule": "raw", "levels": None,
              "steps": 1, "epsilon": 1 / 255, "alpha": 1 / 255, "std": 0.001,
              "epochs": 20, "warmup_epochs": 1, "batch_size": 128, "lr": 0.05,
              "momentum": 0.9, "weight_decay": 5e-5, "norm": "batch", "seed": 0,
              "out": "model.wavg", "report": None},
    "attack": {**_DATA, "checkpoint": None, "attack": "advwavaug", "schedule": "S3",
               "step_rule": "raw", "levels": None, "steps": 1, "epsilon": 1 / 255,
               "alpha": 1 / 255, "std": 0.001, "keep_fraction": None, "no_clamp": False,
               "path": "clean", "seed": 0, "out_dir": None, "format": "png",
               "out": None},
    "eval": {**_DATA, "checkpoint": None, "baseline": None, "suite": "desk-c",
             "name": None, "seed": 0, "out": None, "csv": None},
    "corrupt-gen": {**_DATA, "kind": "all", "severity": None, "seed": 0,
                    "out_dir": None, "format": "png"},
    "transfer": {**_DATA, "source": None, "target": None, "attack": "advwavaug",
                 "schedule": "S3", "step_rule": "raw", "levels": None,
                 "iterations": 100, "budget": 16 / 255, "seed": 0, "out": None},
    "report": {"inputs": [], "out": None, "format": "csv"},
    "selftest": {},
}


def _add_data(p):
    p.add_argument("--data-format", choices=["idx", "image-dir", "synthetic"])
    p.add_argument("--data-path")
    p.add_argument("--labels-path")
    p.add_argument("--split", choices=["train", "test"])
    p.add_argument("--size", type=int)
    p.add_argument("--data-seed", type=int)
    p.add_argument("--generator", choices=["shapes", "blobs"], help="synthetic corpus")


def _add_attack(p, with_extras=True):
    p.add_argument("--schedule", help="S1..S6 or a JSON schedule file")
    p.add_argument("--step-rule", choices=["raw", "sign"])
    p.add_argument("--levels", type=int)
    if with_extras:
        p.add_argument("--steps", type=int)
        p.add_argument("--epsilon", type=float)
        p.add_argument("--alpha", type=float)
        p.add_argument("--std", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wavaug", description="Wavelet-domain adversarial augmentation.",
                     argument_default=argparse.SUPPRESS)
    parser.add_argument("--version", action="version", version=f"wavaug {__version__}")
    parser.add_argument("--threads", type=int, help="eval fan-out (default WAVAUG_THREADS or 1)")
    parser.add_argument("-v", "--verbose", action="count")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file of option values")
        p.add_argument("--dump-config", action="store_true",
                       help="print the merged configuration and exit")
        return p

    p = cmd("train", "train a classifier")
    _add_data(p)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--mode", choices=["vanilla", "advprop", "normal_at"])
    p.add_argument("--augmenter", choices=["none", "gaussian", "pgd", "advwavaug"])
    _add_attack(p)
    for flag, typ in (("--epochs", int), ("--warmup-epochs", int), ("--batch-size", int),
                      ("--lr", float), ("--momentum", float), ("--weight-decay", float),
                      ("--seed", int)):
        p.add_argument(flag, type=typ)
    p.add_argument("--norm", choices=["batch", "layer"])
    p.add_argument("--out", help="checkpoint path (default model.wavg)")
    p.add_argument("--report", help="JSONL report path (default <out>.jsonl)")

    p = cmd("attack", "attack a checkpoint and report attack quality")
    _add_data(p)
    p.add_argument("--checkpoint")
    p.add_argument("--attack", choices=["advwavaug", "pgd", "gaussian"])
    _add_attack(p)
    p.add_argument("--keep-fraction", type=float)
    p.add_argument("--no-clamp", action="store_true")
    p.add_argument("--path", choices=["clean", "adv"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", help="export adversarial images here")
    p.add_argument("--format", choices=["png", "pgm"])
    p.add_argument("--out", help="metrics JSON path (default stdout)")

    p = cmd("eval", "clean and corruption accuracy, mCE")
    _add_data(p)
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", help="vanilla checkpoint that normalizes mCE")
    p.add_argument("--suite", choices=["desk-c", "none"])
    p.add_argument("--name")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="MetricReport JSON path (default stdout)")
    p.add_argument("--csv")

    p = cmd("corrupt-gen", "write a corrupted copy of a dataset")
    _add_data(p)
    p.add_argument("--kind", choices=["all", *CORRUPTIONS])
    p.add_argument("--severity", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--format", choices=["png", "pgm"])

    p = cmd("transfer", "transfer attack curve from source to target")
    _add_data(p)
    p.add_argument("--source")
    p.add_argument("--target")
    p.add_argument("--attack", choices=["advwavaug", "pgd"])
    _add_attack(p, with_extras=False)
    p.add_argument("--iterations", type=int)
    p.add_argument("--budget", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = cmd("report", "tabulate MetricReport JSON files")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--out")
    p.add_argument("--format", choices=["csv", "json"])

    cmd("selftest", "run the invariant suite")
    return parser


# ---------------------------------------------------------------- config

def merge_config(command: str, given: dict) -> Tuple[dict, set]:
    """Defaults, then the ``--config`` file, then explicit flags.

    Also returns the set of keys that were set by the file or a flag.
    """
    cfg = dict(DEFAULTS[command])
    explicit = set()
    path = given.pop("config", None)
    if path:
        try:
            with open(path) as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(loaded)
        explicit |= set(loaded)
    cfg.update(given)
    explicit |= set(given)
    return cfg, explicit


def _need(cfg, *keys):
    for k in keys:
        if not cfg.get(k):
            raise ConfigError(f"--{k.replace('_', '-')} is required")


def _source(cfg) -> DatasetSource:
    try:
        return DatasetSource(format=cfg["data_format"], path=cfg["data_path"],
                             labels_path=cfg["labels_path"], split=cfg["split"],
                             size=cfg["size"], seed=cfg["data_seed"],
                             generator=cfg["generator"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _schedule(value):
    if isinstance(value, dict):
        return BandStepSchedule.from_dict(value)
    if isinstance(value, str) and value.upper() in TABLE1:
        return value.upper()
    try:
        return BandStepSchedule.from_json(Path(value).read_text())
    except OSError as exc:
        raise ConfigError(f"schedule {value!r} is neither S1..S6 nor a readable file") from exc


def _attack_config(cfg, kind) -> AttackConfig:
    return AttackConfig(kind=kind, steps=cfg.get("steps", 1), schedule=_schedule(cfg["schedule"]),
                        levels=cfg["levels"], epsilon=cfg.get("epsilon", 1 / 255),
                        alpha=cfg.get("alpha", 1 / 255), std=cfg.get("std", 0.001),
                        step_rule=cfg["step_rule"], seed=cfg.get("seed", 0),
                        keep_fraction=cfg.get("keep_fraction"),
                        clamp_output=not cfg.get("no_clamp", False),
                        path=cfg.get("path", "adv"))


_ATTACK_KEYS = {"schedule": "schedule", "step_rule": "step_rule", "levels": "levels",
                "steps": "steps", "epsilon": "epsilon", "alpha": "alpha", "std": "std"}
_TRAIN_KEYS = ("epochs", "warmup_epochs", "batch_size", "lr", "momentum", "weight_decay",
               "mode", "augmenter", "seed")


def train_config(cfg: dict, explicit: Optional[set] = None) -> TrainConfig:
    """Precedence: defaults, then ``--preset``, then file and flag values."""
    explicit = set(cfg) if explicit is None else explicit
    preset = dict(PRESETS[cfg["preset"]]) if cfg["preset"] else {}
    fields = {k: cfg[k] for k in _TRAIN_KEYS}
    fields.update({k: v for k, v in preset.items() if k != "attack" and k not in explicit})
    kind = fields["augmenter"] if fields["augmenter"] != "none" else "advwavaug"
    attack = preset.get("attack") or _attack_config(cfg, kind)
    overrides = {f: cfg[k] for k, f in _ATTACK_KEYS.items() if k in explicit}
    if "schedule" in overrides:
        overrides["schedule"] = _schedule(overrides["schedule"])
    attack = replace(attack, kind=kind, path="adv", **overrides)
    return TrainConfig(attack=attack, arch=ArchSpec(norm=cfg["norm"]), **fields)


# ---------------------------------------------------------------- commands

def _write(text: str, path: Optional[str]) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _fit_arch(data: Batch, arch: ArchSpec) -> ArchSpec:
    return replace(arch, in_channels=data.images.shape[-1], image_size=data.images.shape[1],
                   num_classes=max(arch.num_classes, int(data.labels.max()) + 1))


def cmd_train(cfg, threads, explicit=None):
    config = train_config(cfg, explicit)
    data = load_dataset(_source(cfg))
    config = replace(config, arch=_fit_arch(data, config.arch))
    model, report = train(data, config)
    out = cfg["out"]
    report.checkpoint_crc = save_checkpoint(model, out)
    report.checkpoint_path = out
    _write(report.to_jsonl(), cfg["report"] or out + ".jsonl")
    log.info("wrote %s (crc %08x)", out, report.checkpoint_crc)
    return 0


def cmd_attack(cfg, threads, explicit=None):
    _need(cfg, "checkpoint")
    config = _attack_config(cfg, cfg["attack"])
    model = load_checkpoint(cfg["checkpoint"])
    data = load_dataset(_source(cfg))
    x, y = data.images, data.labels
    if config.kind == "advwavaug":
        x_adv = advwavaug_attack(model, x, y, config).images
    else:
        x_adv = augment(model, x, y, config)
    a = asr(model, x_adv, y)
    f = fid_norm(features(model, x), features(model, x_adv), WHITE_BOX["ubf"])
    lp = lpips_norm(lpips_distance(model, x, x_adv), WHITE_BOX["lbl"], WHITE_BOX["ubl"])
    result = {"attack": config.to_dict(), "clean_acc": accuracy(model, data, threads=threads),
              "adv_acc": 1.0 - a, "asr": a, "fid_norm": f, "lpips_norm": lp,
              "score": score(a, f, lp),
              "linf": float(np.abs(x_adv - x).max()),
              "l2_mean": float(np.linalg.norm((x_adv - x).reshape(len(x), -1), axis=1).mean())}
    if cfg["out_dir"]:
        export_images(Batch(np.clip(x_adv, 0, 1), y), cfg["out_dir"], cfg["format"],
                      provenance={"command": "attack", "checkpoint": cfg["checkpoint"],
                                  "attack": config.to_dict()})
    _write(json.dumps(result, indent=2, sort_keys=True), cfg["out"])
    return 0


def cmd_eval(cfg, threads, explicit=None):
    _need(cfg, "checkpoint")
    model = load_checkpoint(cfg["checkpoint"])
    data = load_dataset(_source(cfg))
    report = MetricReport(model=cfg["name"] or Path(cfg["checkpoint"]).stem,
                          baseline=cfg["baseline"])
    report.top1_acc["clean"] = accuracy(model, data, threads=threads)
    if cfg["suite"] == "desk-c":
        suite = desk_c_suite(cfg["seed"])
        corrupted = {s: corrupt_dataset(data, s) for s in suite}
        errs = corruption_errors(model, data, suite, threads=threads, corrupted=corrupted)
        report.corruption_error = errs
        report.top1_acc["desk-c"] = 1.0 - float(np.mean(
            [e for sev in errs.values() for e in sev.values()]))
        if cfg["baseline"]:
            base = load_checkpoint(cfg["baseline"])
            base_errs = corruption_errors(base, data, suite, threads=threads,
                                          corrupted=corrupted)
            report.ce, report.mce = mce_from_errors(errs, base_errs)
        else:
            # without a reference model: plain mean error in percent
            report.ce = {k: 100.0 * float(np.mean(list(v.values()))) for k, v in errs.items()}
            report.mce = float(np.mean(list(report.ce.values())))
            report.mce_normalized = False
    _write(report.to_json(), cfg["out"])
    if cfg["csv"]:
        Path(cfg["csv"]).write_text(MetricReport.table_csv([report]))
    return 0


def cmd_corrupt_gen(cfg, threads, explicit=None):
    _need(cfg, "out_dir")
    data = load_dataset(_source(cfg))
    kinds = CORRUPTIONS if cfg["kind"] == "all" else (cfg["kind"],)
    sevs = (1, 2, 3, 4, 5) if cfg["severity"] is None else (cfg["severity"],)
    try:
        suite = desk_c_suite(cfg["seed"], kinds, sevs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    root = Path(cfg["out_dir"])
    index = []
    for spec in suite:
        sub = root / spec.kind / str(spec.severity)
        export_images(corrupt_dataset(data, spec), sub, cfg["format"],
                      provenance={"command": "corrupt-gen", "kind": spec.kind,
                                  "severity": spec.severity, "seed": spec.seed,
                                  "parameter": spec.parameter})
        index.append({"kind": spec.kind, "severity": spec.severity, "dir": str(sub)})
    root.mkdir(parents=True, exist_ok=True)
    (root / "index.json").write_text(json.dumps(index, indent=2))
    return 0


def cmd_transfer(cfg, threads, explicit=None):
    _need(cfg, "source", "target")
    src, tgt = load_checkpoint(cfg["source"]), load_checkpoint(cfg["target"])
    data = load_dataset(_source(cfg))
    config = _attack_config(cfg, cfg["attack"])
    curve = transfer_eval(src, tgt, config, data, iterations=cfg["iterations"],
                          budget=cfg["budget"])
    _write(json.dumps(curve, indent=2), cfg["out"])
    return 0


def cmd_report(cfg, threads, explicit=None):
    if not cfg["inputs"]:
        raise ConfigError("report needs at least one MetricReport JSON file")
    reports = []
    for path in cfg["inputs"]:
        with open(path) as fh:
            reports.append(MetricReport.from_dict(json.load(fh)))
    if cfg["format"] == "csv":
        _write(MetricReport.table_csv(reports), cfg["out"])
    else:
        _write(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True), cfg["out"])
    return 0


def cmd_selftest(cfg, threads, explicit=None):
    from .selftest import run_selftest
    results = run_selftest()
    failed = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 2 if failed else 0


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "eval": cmd_eval,
            "corrupt-gen": cmd_corrupt_gen, "transfer": cmd_transfer, "report": cmd_report,
            "selftest": cmd_selftest}


def _validate(command: str, cfg: dict, explicit: set) -> None:
    """Build every config object up front so bad values fail with exit 1."""
    try:
        if command == "train":
            train_config(cfg, explicit)
            _source(cfg)
        elif command in ("attack", "transfer"):
            _attack_config(cfg, cfg["attack"])
            _source(cfg)
        elif command in ("eval", "corrupt-gen"):
            _source(cfg)
            if command == "corrupt-gen" and cfg["severity"] is not None:
                CorruptionSpec(CORRUPTIONS[0], cfg["severity"])
        if "iterations" in cfg and cfg["iterations"] < 1:
            raise ConfigError("--iterations must be >= 1")
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        try:
            ns = vars(parser.parse_args(argv))
        except SystemExit as exc:  # --help / --version
            return int(exc.code or 0)
        command = ns.pop("command", None)
        if command is None:
            parser.print_help(sys.stderr)
            return 1
        threads = resolve_threads(ns.pop("threads", None))
        level = logging.DEBUG if ns.pop("verbose", 0) else logging.INFO
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
        dump = ns.pop("dump_config", False)
        cfg, explicit = merge_config(command, ns)
        _validate(command, cfg, explicit)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if dump:
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return 0
    try:
        return COMMANDS[command](cfg, threads, explicit)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
