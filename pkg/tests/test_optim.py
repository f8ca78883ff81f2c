import math

import numpy as np
import pytest

from macro_opt.linalg import MsignMode
from macro_opt.manifold import Kind, ManifoldSpec, feasibility_gap, retract
from macro_opt.optim import (
    BisectionError, LrSchedule, OptimizerState, adamw_step, bisect_lambda, bisection_anchor, fso_step, h_value,
    lambda_bound, lr_at, macro_step, muon_step, muonh_step,
)


def _polar(a):
    u, _, vt = np.linalg.svd(a, full_matrices=False)
    return u @ vt


def test_state_validation():
    with pytest.raises(ValueError):
        OptimizerState.zeros((2, 2), beta=1.0)
    with pytest.raises(ValueError):
        OptimizerState.zeros((2, 2), c=0.0)
    with pytest.raises(ValueError):
        OptimizerState.zeros((2, 2), epsilon=-1.0)
    st = OptimizerState.zeros((2, 2), beta=0.5)
    st.accumulate(np.ones((2, 2)))
    np.testing.assert_allclose(st.momentum, 0.5)
    assert st.step == 1
    with pytest.raises(ValueError):
        st.accumulate(np.ones((3, 2)))


def test_lr_schedule():
    s = LrSchedule("linear_warmup_cosine", 0.01, warmup_steps=100, total_steps=1000, final_lr_ratio=1e-3)
    assert lr_at(s, 50) == pytest.approx(0.005)
    assert lr_at(s, 0) > 0
    assert lr_at(s, 100) == pytest.approx(0.01)
    assert lr_at(s, 999) == pytest.approx(1e-5, rel=1e-2)
    assert all(lr_at(s, t) >= lr_at(s, t + 1) for t in range(100, 999))
    assert lr_at(LrSchedule(base_lr=0.3, total_steps=10), 7) == 0.3
    with pytest.raises(ValueError):
        lr_at(s, 1000)
    with pytest.raises(ValueError):
        LrSchedule("step")


@pytest.mark.parametrize("kind", ["frobenius_sphere", "spectral_sphere"])
def test_macro_step_matches_oracle(rng, kind):
    spec = ManifoldSpec(kind, 1.5)
    w = retract(spec, rng.standard_normal((6, 4)))
    g = rng.standard_normal((6, 4))
    st = OptimizerState.zeros(w.shape, beta=0.9, c=0.7, epsilon=1e-8)
    res = macro_step(w, g, st, spec, 0.05)

    m = 0.1 * g
    if kind == "frobenius_sphere":
        theta = w
    else:
        u, _, vt = np.linalg.svd(w)
        theta = np.outer(u[:, 0], vt[0])
    phi = m - np.sum(m * theta) / np.sum(theta * theta) * theta
    o = _polar(phi)
    o_norm = np.linalg.norm(o) if kind == "frobenius_sphere" else np.linalg.norm(o, 2)
    pre = w - 0.05 * 0.7 * 1.5 / (o_norm + 1e-8) * o
    expected = 1.5 * pre / (np.linalg.norm(pre) if kind == "frobenius_sphere" else np.linalg.norm(pre, 2))
    np.testing.assert_allclose(res.w, expected, atol=1e-12)
    np.testing.assert_allclose(res.phi, phi, atol=1e-14)


def test_muonh_skips_projection(rng):
    spec = ManifoldSpec("fro", 1.0)
    w = retract(spec, rng.standard_normal((5, 5)))
    g = rng.standard_normal((5, 5))
    res = muonh_step(w, g, OptimizerState.zeros(w.shape, epsilon=0.0), spec, 0.1)
    np.testing.assert_allclose(res.o, _polar(0.1 * g), atol=1e-12)
    assert res.phi is None


@pytest.mark.parametrize("step", [macro_step, muonh_step])
@pytest.mark.parametrize("kind", list(Kind))
def test_steps_stay_feasible(rng, step, kind):
    spec = ManifoldSpec(kind, 0.9)
    w = retract(spec, rng.standard_normal((7, 3)))
    st = OptimizerState.zeros(w.shape)
    for _ in range(50):
        w = step(w, rng.standard_normal(w.shape), st, spec, 0.1).w
        assert feasibility_gap(spec, w) <= 1e-12


def test_macro_stationary_when_gradient_is_normal(rng):
    spec = ManifoldSpec("fro", 2.0)
    w = retract(spec, rng.standard_normal((4, 4)))
    res = macro_step(w, 3.0 * w, OptimizerState.zeros(w.shape), spec, 0.1)
    assert res.stationary and "stationary_tangent" in res.flags
    np.testing.assert_array_equal(res.w, w)
    assert not np.any(res.scaled_update)


def test_macro_degenerate_flag():
    spec = ManifoldSpec("spec", 1.0)
    w = np.eye(3)
    res = macro_step(w, np.arange(9.0).reshape(3, 3), OptimizerState.zeros((3, 3)), spec, 0.01)
    assert res.degenerate and "degenerate" in res.flags


def test_eta_must_be_positive(rng):
    spec = ManifoldSpec("fro", 1.0)
    w = retract(spec, rng.standard_normal((2, 2)))
    with pytest.raises(ValueError):
        macro_step(w, w, OptimizerState.zeros((2, 2)), spec, 0.0)


def test_newton_schulz_mode_close_to_exact(rng):
    spec = ManifoldSpec("fro", 1.0)
    w = retract(spec, rng.standard_normal((6, 4)))
    g = rng.standard_normal((6, 4))
    a = macro_step(w, g, OptimizerState.zeros(w.shape), spec, 0.05)
    b = macro_step(w, g, OptimizerState.zeros(w.shape), spec, 0.05, MsignMode.parse("ns:30"))
    np.testing.assert_allclose(a.w, b.w, atol=1e-10)


# ---------------------------------------------------------------- bisection


def test_anchor():
    w = np.diag([2.0, 1.0])
    np.testing.assert_array_equal(bisection_anchor("fro", w), w)
    np.testing.assert_allclose(bisection_anchor("spec", w), np.diag([1.0, 0.0]))
    with pytest.raises(ValueError):
        bisection_anchor("oblique_in", w)


@pytest.mark.parametrize("kind", ["fro", "spec"])
def test_bisection_root(rng, kind):
    for _ in range(10):
        w = rng.standard_normal((5, 4))
        m = rng.standard_normal((5, 4))
        res = bisect_lambda(w, m, kind, tol=1e-8, max_iters=100, check_monotone=True)
        anchor = bisection_anchor(kind, w)
        assert res.bound == pytest.approx(lambda_bound(anchor, m))
        assert abs(res.lambda_star) <= res.bound
        assert abs(res.h_residual) <= 1e-8
        assert not res.capped
        np.testing.assert_allclose(res.direction, _polar(m + res.lambda_star * anchor), atol=1e-12)


def test_h_is_monotone_dense(rng):
    w = rng.standard_normal((4, 4))
    m = rng.standard_normal((4, 4))
    b = lambda_bound(w, m)
    hs = [h_value(w, m, x)[0] for x in np.linspace(-b, b, 400)]
    assert np.all(np.diff(hs) >= -1e-9)


def test_bisection_cap_reports_best(rng):
    w = rng.standard_normal((6, 6))
    m = rng.standard_normal((6, 6))
    res = bisect_lambda(w, m, "fro", tol=1e-14, max_iters=3)
    assert res.capped and res.iters_used == 3


def test_bisection_errors(rng, monkeypatch):
    w = rng.standard_normal((3, 3))
    with pytest.raises(ValueError):
        bisect_lambda(w, np.zeros((3, 3)), "fro")
    with pytest.raises(ValueError):
        bisect_lambda(np.zeros((3, 3)), w, "fro")
    # a kernel that ignores lambda makes h constant and nonzero: no sign change on the bracket
    import macro_opt.optim as optim

    monkeypatch.setattr(optim, "msign", lambda a, mode=None: np.eye(3))
    with pytest.raises(BisectionError):
        bisect_lambda(np.eye(3), np.eye(3), "fro")


def test_fso_direction_is_tangent(rng):
    for kind in ("fro", "spec"):
        spec = ManifoldSpec(kind, 1.0)
        w = retract(spec, rng.standard_normal((6, 4)))
        st = OptimizerState.zeros(w.shape)
        for _ in range(20):
            res = fso_step(w, rng.standard_normal(w.shape), st, spec, 0.05, inner_tol=1e-10, inner_cap=80)
            anchor = bisection_anchor(kind, w)
            assert abs(np.vdot(anchor, res.o)) <= 1e-10
            assert feasibility_gap(spec, res.w) <= 1e-12
            w = res.w


def test_fso_flags_capped(rng):
    spec = ManifoldSpec("fro", 1.0)
    w = retract(spec, rng.standard_normal((6, 4)))
    res = fso_step(w, rng.standard_normal(w.shape), OptimizerState.zeros(w.shape), spec, 0.05, 1e-15, 2)
    assert "bisection_capped" in res.flags


# ---------------------------------------------------------------- baselines


def test_muon_step(rng):
    w = rng.standard_normal((8, 2))
    g = rng.standard_normal((8, 2))
    res = muon_step(w, g, OptimizerState.zeros(w.shape, beta=0.0), 0.1, weight_decay=0.5, shape_scale=True)
    np.testing.assert_allclose(res.w, 0.95 * w - 0.1 * 2.0 * _polar(g), atol=1e-12)
    res = muon_step(w, np.zeros_like(w), OptimizerState.zeros(w.shape), 0.1)
    assert res.stationary
    np.testing.assert_array_equal(res.w, w)


def test_adamw_first_step_is_sign_like():
    p = np.array([1.0, -2.0, 3.0])
    g = np.array([0.5, -0.1, 0.0])
    out, m, v = adamw_step(p, g, np.zeros(3), np.zeros(3), 1, 0.1, eps=0.0 + 1e-30, wd=0.0)
    np.testing.assert_allclose(out, p - 0.1 * np.array([1.0, -1.0, 0.0]), atol=1e-12)
    with pytest.raises(ValueError):
        adamw_step(p, g, m, v, 0, 0.1)


def test_adamw_matches_reference():
    rng = np.random.default_rng(0)
    p = rng.standard_normal(5)
    m = v = np.zeros(5)
    ref_p, ref_m, ref_v = p.copy(), np.zeros(5), np.zeros(5)
    for t in range(1, 6):
        g = rng.standard_normal(5)
        p, m, v = adamw_step(p, g, m, v, t, 0.01, (0.9, 0.95), 1e-8, 0.1)
        ref_m = 0.9 * ref_m + 0.1 * g
        ref_v = 0.95 * ref_v + 0.05 * g * g
        ref_p = ref_p * (1 - 0.001) - 0.01 * (ref_m / (1 - 0.9**t)) / (np.sqrt(ref_v / (1 - 0.95**t)) + 1e-8)
    np.testing.assert_allclose(p, ref_p, atol=1e-14)


def test_macro_hand_trace():
    spec = ManifoldSpec("fro", 1.0)
    w = np.array([[1.0, 0.0], [0.0, 0.0]])
    g = np.array([[0.0, 0.0], [0.0, 1.0]])
    res = macro_step(w, g, OptimizerState.zeros((2, 2), beta=0.0, c=1.0, epsilon=1e-8), spec, 0.1)
    np.testing.assert_allclose(res.phi, g)
    np.testing.assert_allclose(res.o, g)
    np.testing.assert_allclose(res.direction, g / (1 + 1e-8), rtol=1e-15)
    step = 0.1 / (1 + 1e-8)
    np.testing.assert_allclose(res.w, np.diag([1.0, -step]) / math.hypot(1.0, step), atol=1e-15)


def test_muonh_scalar_trace():
    spec = ManifoldSpec("fro", 1.0)
    for eta in (0.3, 1.5):
        res = muonh_step(np.array([[1.0]]), np.array([[2.0]]), OptimizerState.zeros((1, 1), beta=0.0, epsilon=0.0),
                         spec, eta)
        assert res.w[0, 0] == math.copysign(1.0, 1.0 - eta)


def test_muonh_equals_macro_for_tangent_gradients(rng):
    for kind in ("fro", "spec"):
        spec = ManifoldSpec(kind, 1.0)
        w_a = w_b = retract(spec, rng.standard_normal((5, 4)))
        sa = OptimizerState.zeros(w_a.shape, beta=0.0)
        sb = OptimizerState.zeros(w_a.shape, beta=0.0)
        for _ in range(10):
            g = tangent_project_at(spec, w_a, rng.standard_normal(w_a.shape))
            w_a = macro_step(w_a, g, sa, spec, 0.05).w
            w_b = muonh_step(w_b, g, sb, spec, 0.05).w
            np.testing.assert_allclose(w_a, w_b, atol=1e-10)


def tangent_project_at(spec, w, m):
    from macro_opt.manifold import tangent_project

    return tangent_project(spec, w, m)


def test_fso_matches_macro_when_msign_is_tangent(rng):
    # W = U diag(d) V^T and M = U diag(s) V^T with <d, s> = 0 and <d, sign(s)> = 0:
    # M is tangent and so is msign(M), hence lambda* = 0 and both optimizers take the same step
    spec = ManifoldSpec("fro", 1.0)
    for _ in range(20):
        u = np.linalg.qr(rng.standard_normal((5, 4)))[0]
        v = np.linalg.qr(rng.standard_normal((4, 4)))[0]
        w = u @ np.diag([0.5, 0.5, 0.5, 0.5]) @ v.T
        mag = rng.uniform(0.5, 2.0, 2)
        m = u @ np.diag([mag[0], -mag[0], mag[1], -mag[1]]) @ v.T
        a = macro_step(w, m, OptimizerState.zeros(w.shape, beta=0.0), spec, 0.05)
        b = fso_step(w, m, OptimizerState.zeros(w.shape, beta=0.0), spec, 0.05)
        assert b.bisection.lambda_star == 0.0
        np.testing.assert_allclose(a.w, b.w, atol=1e-12)


def test_bisection_root_at_origin_for_tangent_momentum(rng):
    spec = ManifoldSpec("fro", 1.0)
    w = retract(spec, np.diag([1.0, 1.0, 0.0]))
    m = np.diag([1.0, -1.0, 0.5])  # <w, msign(m)> = 0
    res = bisect_lambda(w, m, "fro")
    assert res.lambda_star == 0.0 and abs(res.h_residual) <= 1e-4 and res.iters_used == 1


def test_fso_zero_momentum_is_noop(rng):
    spec = ManifoldSpec("fro", 1.0)
    w = retract(spec, rng.standard_normal((3, 3)))
    res = fso_step(w, np.zeros((3, 3)), OptimizerState.zeros((3, 3)), spec, 0.1)
    assert res.stationary
    np.testing.assert_array_equal(res.w, w)


def test_muon_decay_only_and_reference_trace(rng):
    w = rng.standard_normal((4, 4))
    st = OptimizerState.zeros(w.shape)
    out = w
    for _ in range(3):
        out = muon_step(out, np.zeros_like(w), st, 0.1, weight_decay=0.5).w
    np.testing.assert_allclose(out, w * 0.95**3, atol=1e-15)

    # independent 3-step reference
    grads = [rng.standard_normal((4, 4)) for _ in range(3)]
    st = OptimizerState.zeros(w.shape, beta=0.9)
    ref_w, ref_m, cur = w.copy(), np.zeros((4, 4)), w
    for g in grads:
        cur = muon_step(cur, g, st, 0.02, weight_decay=0.1).w
        ref_m = 0.9 * ref_m + 0.1 * g
        u, _, vt = np.linalg.svd(ref_m)
        ref_w = (1 - 0.002) * ref_w - 0.02 * (u @ vt)
    np.testing.assert_allclose(cur, ref_w, atol=1e-13)


def test_adamw_zero_grad_and_steady_state():
    p = np.array([1.0, -1.0])
    out, _, _ = adamw_step(p, np.zeros(2), np.zeros(2), np.zeros(2), 1, 0.1, wd=0.5)
    np.testing.assert_allclose(out, p * 0.95)
    g = np.array([0.3, -2.0])
    m, v = np.zeros(2), np.zeros(2)
    cur = p.copy()
    for t in range(1, 200):
        prev = cur
        cur, m, v = adamw_step(cur, g, m, v, t, 0.01)
    np.testing.assert_allclose(prev - cur, 0.01 * np.sign(g), rtol=1e-6)


def test_lr_worked_examples():
    assert lr_at(LrSchedule(base_lr=0.01, total_steps=5), 4) == 0.01
    s = LrSchedule("linear_warmup_cosine", 1.0, warmup_steps=100, total_steps=1100, final_lr_ratio=1e-3)
    assert lr_at(s, 50) == pytest.approx(0.5)
    assert lr_at(s, 600) == pytest.approx((1 + 1e-3) / 2)
