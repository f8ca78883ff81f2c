"""Reduced-size invariant battery used by ``macro-opt selftest``."""

from __future__ import annotations

import math
import time
from typing import Callable

import numpy as np

from . import diag
from .linalg import msign_ns, msign_svd, norm, svd
from .manifold import Kind, ManifoldSpec, feasibility_gap, normal, normal_inner, retract, tangent_project
from .model import ACTIVATIONS, PRE_NORMS, LayerSpec, backward, forward
from .optim import OptimizerState, bisect_lambda, fso_step, h_value, macro_step, muonh_step

KINDS = tuple(Kind)


def _rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


def check_svd() -> str:
    rng = _rng(1)
    worst = 0.0
    for _ in range(10):
        a = rng.standard_normal(tuple(rng.integers(1, 12, size=2)))
        for method in ("jacobi", "lapack"):
            u, s, vt = svd(a, method)
            worst = max(worst, np.linalg.norm((u * s) @ vt - a) / max(1.0, np.linalg.norm(a)))
    assert worst <= 1e-10, worst
    return f"max reconstruction {worst:.1e}"


def check_msign() -> str:
    rng = _rng(2)
    worst = 0.0
    for _ in range(20):
        a = rng.standard_normal((int(rng.integers(2, 33)), int(rng.integers(1, 25))))
        worst = max(worst, np.linalg.norm(msign_ns(a, 30) - msign_svd(a)))
    assert worst <= 1e-6, worst
    return f"max |ns - svd|_F {worst:.1e}"


def check_tangent() -> str:
    rng = _rng(3)
    worst = 0.0
    for kind in KINDS:
        spec = ManifoldSpec(kind, 1.5)
        for _ in range(20):
            w = retract(spec, rng.standard_normal((6, 4)))
            m = rng.standard_normal((6, 4))
            phi = tangent_project(spec, w, m)
            nrm = normal(spec, w)
            orth = normal_inner(spec, nrm, phi) / (np.linalg.norm(m) * np.linalg.norm(nrm.theta))
            idem = np.linalg.norm(tangent_project(spec, w, phi) - phi)
            assert np.linalg.norm(phi) <= np.linalg.norm(m) + 1e-12
            worst = max(worst, orth, idem)
    assert worst <= 1e-10, worst
    return f"max orthogonality/idempotence residual {worst:.1e}"


def check_feasibility() -> str:
    rng = _rng(4)
    worst = 0.0
    for kind in KINDS:
        spec = ManifoldSpec(kind, 2.0)
        steps = [macro_step, muonh_step] + ([fso_step] if kind in (Kind.FROBENIUS, Kind.SPECTRAL) else [])
        for step in steps:
            w = retract(spec, rng.standard_normal((8, 5)))
            st = OptimizerState.zeros(w.shape)
            for _ in range(30):
                w = step(w, rng.standard_normal(w.shape), st, spec, 0.05).w
                worst = max(worst, feasibility_gap(spec, w))
    assert worst <= 1e-12, worst
    return f"max feasibility gap {worst:.1e}"


def check_relative_lr() -> str:
    rng = _rng(5)
    worst = 0.0
    for kind in KINDS:
        spec = ManifoldSpec(kind, 1.0)
        w = retract(spec, rng.standard_normal((7, 5)))
        st = OptimizerState.zeros(w.shape, c=0.7, epsilon=0.0)
        for _ in range(20):
            res = macro_step(w, rng.standard_normal(w.shape), st, spec, 0.03)
            rel = diag.relative_lr(spec, w, res.scaled_update)
            worst = max(worst, abs(rel - 0.7 * 0.03))
            w = res.w
    assert worst <= 1e-12, worst
    return f"max |rel_lr - c eta| {worst:.1e}"


def check_rotation() -> str:
    rng = _rng(6)
    spec = ManifoldSpec(Kind.FROBENIUS, 3.0)
    w = retract(spec, rng.standard_normal((6, 6)))
    st = OptimizerState.zeros(w.shape, c=1.0, epsilon=0.0)
    worst = 0.0
    for t in range(50):
        res = macro_step(w, rng.standard_normal(w.shape), st, spec, 0.02)
        d = diag.measure_step(t, res, 1.0)
        worst = max(worst, abs(d.theta_fro - d.theta_fro_exact))
        w = res.w
    assert worst <= 1e-9, worst
    return f"max |theta - closed form| {worst:.1e}"


def check_wedin() -> str:
    rng = _rng(7)
    spec = ManifoldSpec(Kind.SPECTRAL, 1.0)
    target = rng.standard_normal((8, 6))
    w = retract(spec, rng.standard_normal((8, 6)))
    st = OptimizerState.zeros(w.shape, epsilon=0.0)
    worst = 0.0
    for t in range(50):
        res = macro_step(w, 2 * (w - target), st, spec, 0.02)
        d = diag.measure_step(t, res, 1.0)
        if not d.degenerate:
            worst = max(worst, max(math.sin(d.theta_u), math.sin(d.theta_v)) - d.wedin_bound)
        w = res.w
    assert worst <= 1e-9, worst
    return f"max (sin theta - bound) {worst:.1e}"


def check_bisection() -> str:
    rng = _rng(8)
    for _ in range(10):
        spec = ManifoldSpec(Kind.FROBENIUS, 1.0)
        w = retract(spec, rng.standard_normal((6, 4)))
        m = rng.standard_normal((6, 4))
        res = bisect_lambda(w, m, spec.kind, tol=1e-6, max_iters=80, check_monotone=True)
        assert abs(res.lambda_star) <= res.bound + 1e-9
        assert abs(h_value(w, m, res.lambda_star)[0]) <= 1e-6
    return "10 brackets monotone, roots in bound"


def check_gradients() -> str:
    rng = _rng(9)
    worst = 0.0
    for act in ACTIVATIONS:
        for pre in PRE_NORMS:
            layer = LayerSpec(4, 3, act, pre)
            p = {k: rng.standard_normal((3, 4)) for k in layer.weight_names}
            if pre == "learnable_rms":
                p["gamma"] = rng.uniform(0.5, 1.5, 4)
            x = rng.standard_normal((5, 4))
            probe = rng.standard_normal((5, 3))
            _, cache = forward(layer, p, x)
            _, grads = backward(layer, p, cache, probe)
            for key, arr in p.items():
                for idx in np.ndindex(arr.shape):
                    old = arr[idx]
                    arr[idx] = old + 1e-5
                    fp = np.sum(forward(layer, p, x)[0] * probe)
                    arr[idx] = old - 1e-5
                    fm = np.sum(forward(layer, p, x)[0] * probe)
                    arr[idx] = old
                    fd = (fp - fm) / 2e-5
                    worst = max(worst, abs(fd - grads[key][idx]) / max(abs(fd), abs(grads[key][idx]), 1e-2))
    assert worst <= 1e-5, worst
    return f"max relative FD error {worst:.1e}"


def check_norms() -> str:
    a = np.diag([3.0, 2.0])
    expect = {"spectral": 3.0, "nuclear": 5.0, "one_to_two": 3.0, "two_to_inf": 3.0, "frobenius": math.sqrt(13)}
    for kind, value in expect.items():
        assert abs(norm(a, kind) - value) <= 1e-14, kind
    return "diag(3,2) norms"


CHECKS: dict[str, Callable[[], str]] = {
    "svd": check_svd,
    "norms": check_norms,
    "msign": check_msign,
    "tangent_projection": check_tangent,
    "feasibility": check_feasibility,
    "relative_lr": check_relative_lr,
    "rotation_identity": check_rotation,
    "wedin_bound": check_wedin,
    "bisection": check_bisection,
    "gradients": check_gradients,
}


def run_all(echo=print) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        try:
            detail = fn()
            status = "PASS"
        except AssertionError as exc:
            ok = False
            detail = f"assertion failed: {exc}"
            status = "FAIL"
        echo(f"{status} {name:20s} {detail} ({time.perf_counter() - t0:.2f}s)")
    return ok
