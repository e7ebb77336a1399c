"""Fast invariant suite behind ``wavaug selftest``.

Each check is small enough that the whole suite runs in seconds; the pytest
suite repeats them at larger scale.
"""
from __future__ import annotations

import math
import time
from typing import Callable, List, NamedTuple

import numpy as np

from .attack import AttackConfig, advwavaug_attack, gaussian_augment, pgd_attack
from .nn import (ArchSpec, Classifier, backward, checkpoint_bytes, cross_entropy, forward,
                 load_checkpoint, sgd_step, softmax)
from .spectrum import (AttentionMap, TABLE1, apply_attention, attention_gradient,
                       perturbation_bound, quantile_threshold, table1_schedule,
                       threshold_filter)
from .wavelet import dwt1d, dwt2d, get_bank, haar_bank, idwt1d, idwt2d, sym8_bank

__all__ = ["CheckResult", "CHECKS", "run_selftest"]


class CheckResult(NamedTuple):
    name: str
    ok: bool
    detail: str
    seconds: float


def _tiny(norm: str = "batch", seed: int = 0) -> Classifier:
    return Classifier(ArchSpec(in_channels=1, image_size=8, widths=(2, 2), hidden=6,
                               num_classes=3, norm=norm), seed=seed)


def _rel_close(a, b, rtol=1e-4, atol=1e-8) -> bool:
    return abs(a - b) <= rtol * max(abs(a), abs(b)) + atol


# ---------------------------------------------------------------- wavelet

def check_filter_banks():
    for bank in (sym8_bank(), haar_bank()):
        bank.check()
    return "sym8 and Haar pass normalization and QMF checks"


def check_round_trip():
    rng = np.random.default_rng(0)
    worst = 0.0
    for size, levels in ((32, 3), (64, 4), (16, 2)):
        for bank in ("sym8", "haar"):
            x = rng.standard_normal((size, size))
            y = idwt2d(dwt2d(x, levels, bank), bank)
            worst = max(worst, float(np.abs(y - x).max()))
    s = rng.standard_normal(128)
    worst = max(worst, float(np.abs(idwt1d(*dwt1d(s, sym8_bank()), sym8_bank()) - s).max()))
    assert worst < 1e-10, worst
    return f"max error {worst:.1e}"


def check_parseval_linearity():
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal((2, 32, 32))
    px, py = dwt2d(x, 3), dwt2d(y, 3)
    assert math.isclose(float((px.flatten() ** 2).sum()), float((x ** 2).sum()), rel_tol=1e-9)
    assert math.isclose(float(px.flatten() @ py.flatten()), float((x * y).sum()),
                        rel_tol=1e-9, abs_tol=1e-9)
    lin = idwt2d(px * 2.0 - py * 3.0) - (2 * x - 3 * y)
    assert np.abs(lin).max() < 1e-9
    return "energy, inner products and linearity preserved"


# ---------------------------------------------------------------- spectrum

def check_threshold_and_quantile():
    rng = np.random.default_rng(2)
    p = dwt2d(rng.standard_normal((64, 64)), 3)
    T = quantile_threshold(p, 0.1)
    _, n = threshold_filter(p, T)
    assert abs(int(n) - math.ceil(0.1 * 4096)) <= 1, n
    same, n0 = threshold_filter(p, 0.0)
    assert int(n0) == 4096 and np.array_equal(same.flatten(), p.flatten())
    return f"{int(n)} survivors at keep 0.1"


def check_sparsity():
    rng = np.random.default_rng(3)
    p = dwt2d(rng.standard_normal((32, 32)), 3)
    p, _ = threshold_filter(p, quantile_threshold(p, 0.2))
    att = AttentionMap(p.map(lambda b: rng.standard_normal(b.shape)))
    out = apply_attention(p, att)
    zero = p.flatten() == 0
    assert np.all(out.flatten()[zero] == 0)
    assert np.array_equal(apply_attention(p, AttentionMap.identity(p)).flatten(), p.flatten())
    return f"{int(zero.sum())} zero coefficients stayed zero"


def check_attention_gradient():
    rng = np.random.default_rng(4)
    bank = get_bank("sym8")
    w = rng.standard_normal((8, 8))
    z = dwt2d(rng.standard_normal((8, 8)), 1, bank)
    delta = z.map(lambda b: 0.1 * rng.standard_normal(b.shape))

    def f(d):
        return float((w * idwt2d(z.map(lambda a, b: a * (1 + b), d), bank)).sum())

    g = attention_gradient(w, z, bank).flatten()
    flat = delta.flatten()
    for i in rng.choice(flat.size, 12, replace=False):
        e = np.zeros_like(flat)
        e[i] = 1e-5
        num = (f(delta.unflatten(flat + e)) - f(delta.unflatten(flat - e))) / 2e-5
        assert _rel_close(g[i], num), (i, g[i], num)
    return "matches central differences"


def check_bound_formula():
    assert math.isclose(perturbation_bound(1.0, 4, 0.5), 1.0)
    assert math.isclose(perturbation_bound(1.0, 9, 0.5, p=math.inf), 2.0)
    assert perturbation_bound(2.0, 4, 0.5) > perturbation_bound(1.0, 4, 0.5)
    assert perturbation_bound(1.0, 4, 0.5) > perturbation_bound(1.0, 9, 0.5)
    return "examples and monotonicity hold"


def check_schedules():
    for key, row in TABLE1.items():
        s = table1_schedule(key, 6)
        assert s.h_steps + (s.l_step,) == row
    return f"{len(TABLE1)} rows verified"


# ---------------------------------------------------------------- netcore

def check_layer_gradients():
    rng = np.random.default_rng(5)
    x = rng.random((4, 8, 8, 1))
    y = np.array([0, 1, 2, 1])
    for norm in ("batch", "layer"):
        m = _tiny(norm)
        res = backward(m, x, y, "clean", "train", update_stats=False)
        params = m.params()
        for p, g in zip(params, res.param_grads):
            idx = tuple(rng.integers(0, s) for s in p.shape)
            old = p[idx]
            p[idx] = old + 1e-5
            lp = backward(m, x, y, "clean", "train", update_stats=False).loss
            p[idx] = old - 1e-5
            lm = backward(m, x, y, "clean", "train", update_stats=False).loss
            p[idx] = old
            assert _rel_close(g[idx], (lp - lm) / 2e-5), (norm, g[idx], (lp - lm) / 2e-5)
        i = (1, 3, 4, 0)
        xp, xm = x.copy(), x.copy()
        xp[i] += 1e-5
        xm[i] -= 1e-5
        num = (backward(m, xp, y, update_stats=False).loss
               - backward(m, xm, y, update_stats=False).loss) / 2e-5
        assert _rel_close(res.input_grad[i], num)
    return "every parameter tensor and the input gradient"


def check_loss_and_softmax():
    assert math.isclose(cross_entropy(np.zeros((3, 10)), [0, 4, 9]), math.log(10), rel_tol=1e-12)
    assert math.isclose(cross_entropy(np.array([[1.0, 0.0]]), [0]),
                        math.log1p(math.exp(-1)), rel_tol=1e-12)
    p = softmax(np.random.default_rng(6).standard_normal((5, 7)))
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
    return "closed forms reproduced"


def check_path_isolation():
    m = _tiny()
    x = np.random.default_rng(7).random((4, 8, 8, 1))
    before = [{k: v.copy() for k, v in s.items()} for s in m.norm_stats("clean")]
    forward(m, x, path="adv", mode="train")
    after = m.norm_stats("clean")
    assert all(np.array_equal(b[k], a[k]) for b, a in zip(before, after) for k in b)
    return "adv-path training forward left clean stats bitwise unchanged"


def check_sgd_and_checkpoint():
    m = _tiny()
    g = [np.ones_like(p) for p in m.params()]
    w0 = [p.copy() for p in m.params()]
    sgd_step(m, g, lr=1.0, momentum=0.9)
    sgd_step(m, g, lr=1.0, momentum=0.9)
    assert all(np.allclose(p, w - 2.9) for p, w in zip(m.params(), w0))
    blob = checkpoint_bytes(m)
    assert checkpoint_bytes(load_checkpoint(blob)) == blob
    return "momentum recurrence and checkpoint round trip"


# ---------------------------------------------------------------- attack

def check_attacks():
    rng = np.random.default_rng(8)
    m = Classifier(ArchSpec(image_size=16, widths=(2, 2), hidden=6, num_classes=3), seed=1)
    x = rng.random((3, 16, 16, 1))
    y = np.array([0, 1, 2])
    m.head.weight[:] = 0.0
    flat = advwavaug_attack(m, x, y, AttackConfig(levels=2, clamp_output=False))
    assert np.abs(flat.images - x).max() < 1e-10
    m = Classifier(ArchSpec(image_size=16, widths=(2, 2), hidden=6, num_classes=3), seed=1)
    res = advwavaug_attack(m, x, y, AttackConfig(levels=2, keep_fraction=0.1,
                                                 clamp_output=False))
    zero = res.coeffs.flatten() == 0
    adv = dwt2d(res.images.transpose(0, 3, 1, 2), 2).flatten()
    assert np.all(np.abs(adv[zero]) < 1e-12)
    adv_pgd = pgd_attack(m, x, y, AttackConfig(kind="pgd", epsilon=2 / 255, alpha=1 / 255,
                                               steps=3))
    assert np.abs(adv_pgd - x).max() <= 2 / 255 + 1e-15
    noise = gaussian_augment(np.full((1000, 32, 32, 1), 0.5), 0.0, 0.001, seed=0) - 0.5
    assert abs(noise.std() - 0.001) < 1e-5
    return "zero-gradient identity, sparsity, PGD ball, Gaussian moments"


CHECKS: List[Callable[[], str]] = [
    check_filter_banks, check_round_trip, check_parseval_linearity,
    check_threshold_and_quantile, check_sparsity, check_attention_gradient,
    check_bound_formula, check_schedules,
    check_layer_gradients, check_loss_and_softmax, check_path_isolation,
    check_sgd_and_checkpoint,
    check_attacks,
]


def run_selftest(echo: Callable[[str], None] = print) -> List[CheckResult]:
    results = []
    for check in CHECKS:
        name = check.__name__[len("check_"):]
        t = time.perf_counter()
        try:
            detail, ok = check(), True
        except Exception as exc:  # report every failure, keep going
            detail, ok = f"{type(exc).__name__}: {exc}", False
        r = CheckResult(name, ok, detail, time.perf_counter() - t)
        echo(f"{'PASS' if ok else 'FAIL'}  {name:<26} {detail}")
        results.append(r)
    return results
