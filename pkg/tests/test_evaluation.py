import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import linalg

from conftest import tiny_model
from wavaug.attack import AttackConfig
from wavaug.data import synthetic_shapes
from wavaug.evaluation import (CORRUPTIONS, SEVERITY_TABLE, CorruptionSpec, MetricReport,
                               accuracy, asr, corrupt, corruption_errors, desk_c_suite,
                               fid_norm, frechet_distance, lpips_distance, lpips_norm, mce,
                               mce_from_errors, normalize_fid, resolve_threads, score,
                               transfer_eval)
from wavaug.nn import ArchSpec, Batch, Classifier, forward, predict
from wavaug.training import TrainConfig, train

# printed white-box table rows: ASR, FID, LPIPS, SCORE
WHITE_BOX_ROWS = [
    (62.7, 96.1, 97.8, 58.9), (70.7, 95.9, 99.3, 67.3),
    (82.7, 95.9, 97.6, 77.4), (83.5, 96.1, 99.3, 79.6),
    (71.8, 72.8, 97.2, 50.8), (72.9, 91.9, 99.3, 66.5),
    (40.0, 97.4, 98.9, 38.5), (40.8, 97.6, 99.6, 39.6),
    (37.5, 79.9, 96.2, 28.8), (37.7, 96.6, 98.4, 35.8),
    (55.2, 98.5, 99.0, 53.8), (60.5, 96.9, 99.3, 58.2),
]


@pytest.fixture(scope="module")
def images():
    return synthetic_shapes(40, seed=2).images


@pytest.fixture(scope="module")
def pair():
    # transfer only means something between models that actually learned the task
    tr = synthetic_shapes(1000, seed=11)
    cfg = dict(epochs=4, batch_size=64, weight_decay=5e-4)
    a, _ = train(tr, TrainConfig(seed=0, **cfg))
    b, _ = train(tr, TrainConfig(seed=1, **cfg))
    return a, b, synthetic_shapes(300, seed=12)


@pytest.mark.parametrize("kind", CORRUPTIONS)
def test_corruption_contracts(kind, images):
    assert np.array_equal(corrupt(images, CorruptionSpec(kind, 0)), images)
    dist = []
    for s in range(1, 6):
        spec = CorruptionSpec(kind, s, seed=3)
        out = corrupt(images, spec)
        assert out.shape == images.shape and out.min() >= 0 and out.max() <= 1
        assert np.array_equal(out, corrupt(images, spec))
        dist.append(float(np.mean((out - images) ** 2)))
    assert all(b >= a - 1e-12 for a, b in zip(dist, dist[1:])), dist
    assert dist[0] > 0


def test_contrast_preserves_mean(images):
    for s in range(1, 6):
        out = corrupt(images, CorruptionSpec("contrast", s))
        assert np.abs(out.mean(axis=(1, 2, 3)) - images.mean(axis=(1, 2, 3))).max() < 1e-9
        c = SEVERITY_TABLE["contrast"][s - 1]
        m = images.mean(axis=(1, 2, 3), keepdims=True)
        assert np.allclose(out, (images - m) * c + m, atol=1e-12)


@pytest.mark.parametrize("sev", range(1, 6))
def test_gaussian_noise_std(sev):
    x = np.full((1000, 32, 32, 1), 0.5)
    noise = corrupt(x, CorruptionSpec("gaussian_noise", sev, seed=sev)) - 0.5
    sigma = SEVERITY_TABLE["gaussian_noise"][sev - 1]
    assert abs(noise.std() / sigma - 1) < 0.02


def test_single_image_and_errors(images):
    one = corrupt(images[0], CorruptionSpec("pixelate", 3))
    assert one.shape == images[0].shape
    with pytest.raises(ValueError):
        CorruptionSpec("fog", 1)
    with pytest.raises(ValueError):
        CorruptionSpec("contrast", 6)


def test_pixelate_blocks_are_constant(images):
    out = corrupt(images, CorruptionSpec("pixelate", 3))  # block 4
    blk = out[:, :4, :4]
    assert np.allclose(blk, blk[:, :1, :1])
    assert np.allclose(blk[:, 0, 0], images[:, :4, :4].mean(axis=(1, 2)))


def test_jpeg_is_identity_on_flat_gray():
    x = np.full((1, 16, 16, 1), 128 / 255)
    assert np.allclose(corrupt(x, CorruptionSpec("jpeg_quantize", 5)), x, atol=1e-12)


def test_suite_layout():
    suite = desk_c_suite()
    assert len(suite) == 45 and len({s.seed for s in suite}) == 45


def test_accuracy_examples():
    m = tiny_model(size=8, classes=10)
    m.head.weight[:] = 0
    m.head.bias[:] = 0
    x = np.random.default_rng(0).random((100, 8, 8, 1))
    y = np.arange(100) % 10
    assert accuracy(m, Batch(x, y)) == 0.1
    with pytest.raises(ValueError):
        accuracy(m, None)


def test_accuracy_recount(pair):
    a, _, test = pair
    data = test.subset(slice(0, 100))
    logits = forward(a, data.images)
    brute = sum(int(np.argmax(logits[i]) == data.labels[i]) for i in range(100)) / 100
    assert accuracy(a, data) == brute
    assert accuracy(a, data, threads=3) == brute


def test_memorizer_gets_full_accuracy():
    m = tiny_model(size=8, classes=10)
    x = np.random.default_rng(0).random((10, 8, 8, 1))
    y = predict(forward(m, x))
    assert accuracy(m, Batch(x, y)) == 1.0


def test_mce_examples(pair):
    a, b, test = pair
    suite = desk_c_suite(kinds=("gaussian_noise", "contrast"), severities=(1, 3, 5))
    ce, m = mce(a, a, test, suite)
    assert m == 100.0 and all(v == 100.0 for v in ce.values())
    base = {"k1": {1: 0.4, 2: 0.6}, "k2": {1: 0.2, 2: 0.2}}
    half = {k: {s: v / 2 for s, v in d.items()} for k, d in base.items()}
    assert mce_from_errors(half, base)[1] == pytest.approx(50.0, abs=1e-12)
    with pytest.raises(ValueError, match="zero error"):
        mce_from_errors(half, {"k1": {1: 0.0, 2: 0.0}, "k2": base["k2"]})
    two = mce(a, b, test, suite)[1]
    assert math.isfinite(two) and two > 0


def test_corruption_errors_thread_invariant(pair):
    a, _, test = pair
    suite = desk_c_suite(kinds=("shot_noise",), severities=(2, 4))
    assert corruption_errors(a, test, suite, threads=1) == corruption_errors(a, test, suite,
                                                                              threads=4)


def test_asr_examples():
    m = tiny_model(size=8, classes=3)
    m.head.weight[:] = 0
    m.head.bias[:] = [0, 1, 0]
    x = np.zeros((4, 8, 8, 1))
    assert asr(m, x, [1, 1, 1, 1]) == 0.0
    assert asr(m, x, [0, 2, 0, 2]) == 1.0
    assert asr(m, x, [1, 0, 2, 0]) == 0.75


def test_frechet_against_scipy_sqrtm():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((400, 5))
    b = rng.standard_normal((300, 5)) @ rng.standard_normal((5, 5)) + 0.3
    ca, cb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    ref = (((a.mean(0) - b.mean(0)) ** 2).sum() + np.trace(ca) + np.trace(cb)
           - 2 * np.trace(linalg.sqrtm(ca @ cb)).real)
    assert frechet_distance(a, b) == pytest.approx(ref, rel=1e-8)
    assert frechet_distance(a, a) == pytest.approx(0.0, abs=1e-9)


def test_frechet_degenerate_needs_shrinkage():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((5, 10)), rng.standard_normal((6, 10))
    with pytest.raises(ValueError, match="degenerate"):
        frechet_distance(a, b, shrinkage=None)
    assert frechet_distance(a, b) > 0
    assert frechet_distance(a, b, shrinkage=0.5) > 0


def test_fid_norm_examples():
    f = np.random.default_rng(5).standard_normal((200, 4))
    assert fid_norm(f, f) == pytest.approx(1.0, abs=1e-6)
    assert normalize_fid(12.0, 10) == 0.0
    assert normalize_fid(10.0, 10) == 0.0
    assert normalize_fid(7.5, 10) == pytest.approx(0.5)
    assert normalize_fid(0.0, 200) == 1.0


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 50), st.floats(0, 50))
def test_fid_norm_monotone(a, b):
    lo, hi = sorted((a, b))
    assert normalize_fid(hi, 10) <= normalize_fid(lo, 10)


def test_lpips_norm_examples():
    assert lpips_norm([0.0]) == 1.0
    assert lpips_norm([0.5]) == 0.0 and lpips_norm([0.9]) == 0.0
    assert lpips_norm([0.25]) == pytest.approx(math.sqrt(0.5), abs=1e-4)
    assert lpips_norm([0.0], 0.1, 0.6) == 1.0
    assert lpips_norm([0.6], 0.1, 0.6) == 0.0
    with pytest.raises(ValueError):
        lpips_norm([0.1], 0.5, 0.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_lpips_norm_monotone(a, b):
    lo, hi = sorted((a, b))
    for bounds in ((0.0, 0.5), (0.1, 0.6)):
        assert lpips_norm([hi], *bounds) <= lpips_norm([lo], *bounds)


def test_lpips_distance(pair):
    a, _, test = pair
    x = test.images[:10]
    assert np.all(lpips_distance(a, x, x) == 0)
    noisy = corrupt(x, CorruptionSpec("gaussian_noise", 3))
    worse = corrupt(x, CorruptionSpec("gaussian_noise", 5, seed=1))
    d1, d2 = lpips_distance(a, x, noisy).mean(), lpips_distance(a, x, worse).mean()
    assert 0 < d1 < d2


@pytest.mark.parametrize("row", WHITE_BOX_ROWS)
def test_score_reproduces_table(row):
    a, f, l, s = row
    assert abs(score(a / 100, f / 100, l / 100) - s) <= 0.1


def test_score_edges():
    assert score(0.0, 0.5, 0.5) == 0.0
    assert score(1.0, 1.0, 1.0) == 100.0
    with pytest.raises(ValueError):
        score(1.2, 0.5, 0.5)


@pytest.mark.parametrize("kind", ["pgd", "advwavaug"])
def test_transfer_curve(pair, kind):
    a, b, test = pair
    out = transfer_eval(a, b, AttackConfig(kind=kind), test, iterations=12)
    assert len(out["curve"]) == 12
    start = out["start"]
    assert start["asr"] == pytest.approx(1 - accuracy(b, test))
    assert start["fid_norm"] == pytest.approx(1.0, abs=1e-6) and start["lpips_norm"] == 1.0
    asrs = [start["asr"]] + [p["asr"] for p in out["curve"]]
    ups = sum(y >= x for x, y in zip(asrs, asrs[1:]))
    assert ups >= 0.9 * 12
    assert out["curve"][-1]["asr"] > start["asr"]
    assert json.loads(json.dumps(out)) == out


def test_transfer_warns_on_same_model(pair, caplog):
    a, _, test = pair
    transfer_eval(a, a, AttackConfig(kind="pgd"), test.subset(slice(0, 80)), iterations=2)
    assert "identical" in caplog.text


def test_metric_report_serialization():
    r = MetricReport(model="m", top1_acc={"clean": 0.9}, corruption_error={"contrast": {1: 0.2}},
                     ce={"contrast": 80.0}, mce=80.0)
    again = MetricReport.from_dict(json.loads(r.to_json()))
    assert again == r
    csv_text = MetricReport.table_csv([r, MetricReport(model="n", mce=90.0)])
    header, first, second = csv_text.strip().splitlines()
    assert header.startswith("model,acc_clean,ce_contrast,mce")
    assert first.startswith("m,0.9,80.0,80.0") and second.startswith("n,,,90.0")


def test_threads_resolution(monkeypatch):
    monkeypatch.delenv("WAVAUG_THREADS", raising=False)
    assert resolve_threads() == 1
    monkeypatch.setenv("WAVAUG_THREADS", "3")
    assert resolve_threads() == 3 and resolve_threads(2) == 2
    with pytest.raises(ValueError):
        resolve_threads(0)
