import json

import numpy as np
import pytest

from wavaug.cli import DEFAULTS, run, train_config
from wavaug.nn import load_checkpoint

DATA = ["--size", "64"]


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    out = d / "m.wavg"
    assert run(["train", "--epochs", "1", "--batch-size", "32", *DATA, "--out", str(out)]) == 0
    return d, out


def test_unknown_flag_and_command(capsys):
    assert run(["--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert run(["train", "--nope"]) == 1
    assert run(["frobnicate"]) == 1
    assert run([]) == 1
    assert run(["--help"]) == 0


def test_config_file_and_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 3, "lr": 0.1}))
    assert run(["train", "--config", str(cfg), "--lr", "0.2", "--dump-config"]) == 0
    merged = json.loads(capsys.readouterr().out)
    assert merged["epochs"] == 3 and merged["lr"] == 0.2
    # write-back is a fixed point
    cfg2 = tmp_path / "c2.json"
    cfg2.write_text(json.dumps(merged))
    assert run(["train", "--config", str(cfg2), "--dump-config"]) == 0
    assert json.loads(capsys.readouterr().out) == merged
    cfg.write_text(json.dumps({"epochs": 3, "colour": "red"}))
    assert run(["train", "--config", str(cfg)]) == 1
    assert "colour" in capsys.readouterr().err
    cfg.write_text("{not json")
    assert run(["train", "--config", str(cfg)]) == 1


def test_validation_errors_exit_1(capsys):
    assert run(["train", "--epochs", "0"]) == 1
    assert run(["train", "--mode", "advprop", "--schedule", "S9"]) == 1
    assert run(["attack"]) == 1
    assert run(["corrupt-gen", "--out-dir", "x", "--severity", "9"]) == 1


def test_runtime_failure_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.wavg"
    bad.write_bytes(b"nope")
    assert run(["eval", "--checkpoint", str(bad)]) == 2
    assert "magic" in capsys.readouterr().err
    assert run(["eval", "--checkpoint", str(tmp_path / "missing.wavg")]) == 2


def test_preset_and_flags(capsys):
    assert run(["train", "--preset", "pgd-at", "--dump-config"]) == 0
    cfg = dict(DEFAULTS["train"], preset="pgd-at")
    tc = train_config(cfg, {"preset"})
    assert tc.mode == "normal_at" and tc.attack.kind == "pgd" and tc.attack.epsilon == 2 / 255
    tc = train_config(dict(cfg, epsilon=3 / 255), {"preset", "epsilon"})
    assert tc.attack.epsilon == 3 / 255


def test_train_advprop_contract(tmp_path):
    out = tmp_path / "a.wavg"
    argv = ["train", "--mode", "advprop", "--augmenter", "advwavaug", "--schedule", "S3",
            "--seed", "1", "--epochs", "1", *DATA, "--out", str(out)]
    assert run(argv) == 0
    report = (tmp_path / "a.wavg.jsonl").read_text().splitlines()
    assert len(report) == 2 and json.loads(report[0])["adv_loss"] is not None
    first = out.read_bytes()
    assert run(argv) == 0
    assert out.read_bytes() == first
    assert load_checkpoint(out).seed == 1


def test_eval_contract(ckpt, capsys):
    d, out = ckpt
    rep = d / "r.json"
    assert run(["eval", "--checkpoint", str(out), "--suite", "desk-c", *DATA,
                "--baseline", str(out), "--out", str(rep), "--csv", str(d / "r.csv")]) == 0
    r = json.loads(rep.read_text())
    assert r["mce"] == 100.0 and len(r["ce"]) == 9
    assert (d / "r.csv").read_text().startswith("model,")
    assert run(["eval", "--checkpoint", str(out), *DATA, "--out", str(d / "r2.json")]) == 0
    r2 = json.loads((d / "r2.json").read_text())
    assert r2["mce_normalized"] is False and r2["mce"] > 0
    assert run(["report", str(rep), str(d / "r2.json")]) == 0
    assert capsys.readouterr().out.count("\n") == 3


def test_threads_flag_same_result(ckpt, monkeypatch):
    d, out = ckpt
    monkeypatch.setenv("WAVAUG_THREADS", "2")
    assert run(["eval", "--checkpoint", str(out), *DATA, "--out", str(d / "t2.json")]) == 0
    assert run(["--threads", "1", "eval", "--checkpoint", str(out), *DATA,
                "--out", str(d / "t1.json")]) == 0
    assert (d / "t1.json").read_text() == (d / "t2.json").read_text()


def test_attack_and_export(ckpt):
    d, out = ckpt
    res = d / "atk.json"
    assert run(["attack", "--checkpoint", str(out), *DATA, "--out", str(res),
                "--out-dir", str(d / "imgs"), "--format", "pgm"]) == 0
    r = json.loads(res.read_text())
    assert 0 <= r["asr"] <= 1 and 0 <= r["score"] <= 100
    assert json.loads((d / "imgs" / "manifest.json").read_text())["count"] == 64
    assert run(["attack", "--checkpoint", str(out), "--attack", "pgd", *DATA,
                "--out", str(d / "p.json")]) == 0
    assert json.loads((d / "p.json").read_text())["linf"] <= 1 / 255 + 1e-12


def test_corrupt_gen(tmp_path):
    assert run(["corrupt-gen", "--kind", "contrast", "--severity", "2", "--size", "5",
                "--out-dir", str(tmp_path)]) == 0
    m = json.loads((tmp_path / "contrast" / "2" / "manifest.json").read_text())
    assert m["count"] == 5 and m["provenance"]["parameter"] == 0.5
    assert len(json.loads((tmp_path / "index.json").read_text())) == 1


def test_transfer_command(ckpt, tmp_path):
    d, out = ckpt
    other = tmp_path / "o.wavg"
    assert run(["train", "--epochs", "1", *DATA, "--seed", "3", "--out", str(other)]) == 0
    curve = tmp_path / "c.json"
    assert run(["transfer", "--source", str(out), "--target", str(other), *DATA,
                "--iterations", "3", "--out", str(curve)]) == 0
    c = json.loads(curve.read_text())
    assert len(c["curve"]) == 3 and c["start"]["iteration"] == 0


def test_schedule_file(ckpt, tmp_path):
    d, out = ckpt
    s = tmp_path / "s.json"
    s.write_text(json.dumps({"setting": "custom", "h_steps": [0.1, 0.1, 0.1], "l_step": 0.0}))
    assert run(["attack", "--checkpoint", str(out), *DATA, "--schedule", str(s),
                "--out", str(tmp_path / "a.json")]) == 0
    assert json.loads((tmp_path / "a.json").read_text())["attack"]["schedule"]["l_step"] == 0.0


def test_selftest_passes(capsys):
    assert run(["selftest"]) == 0
    assert "FAIL" not in capsys.readouterr().out
