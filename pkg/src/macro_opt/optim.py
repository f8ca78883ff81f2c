"""Step rules for manifold-constrained matrix optimizers.

``macro_step`` projects momentum onto the tangent space, takes its polar
factor, rescales it to a fixed fraction of the radius and retracts.
``muonh_step`` is the same without the tangent projection, ``fso_step``
replaces the projection by a bisection on the Lagrange multiplier, and
``muon_step`` is the unconstrained baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .linalg import EXACT, MsignMode, as_matrix, msign, singular_values
from .manifold import Kind, ManifoldSpec, Normal, manifold_norm, normal, project_normal, retract

STATIONARY_RTOL = 1e-12
BRACKET_SLACK = 1e-9


class BisectionError(ArithmeticError):
    """The multiplier bracket does not change sign, so the msign kernel is inconsistent."""


@dataclass
class OptimizerState:
    momentum: np.ndarray
    beta: float = 0.9
    c: float = 1.0
    epsilon: float = 1e-8
    step: int = 0

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        if self.c <= 0:
            raise ValueError(f"c must be positive, got {self.c}")
        # epsilon = 0 is accepted so the exact ratio lock can be checked
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")

    @classmethod
    def zeros(cls, shape, **hyper) -> "OptimizerState":
        return cls(np.zeros(shape), **hyper)

    def accumulate(self, grad) -> np.ndarray:
        grad = as_matrix(grad)
        if grad.shape != self.momentum.shape:
            raise ValueError(f"gradient shape {grad.shape} != momentum shape {self.momentum.shape}")
        self.momentum = self.beta * self.momentum + (1.0 - self.beta) * grad
        self.step += 1
        return self.momentum


@dataclass(frozen=True)
class LrSchedule:
    kind: str = "constant"
    base_lr: float = 0.01
    warmup_steps: int = 0
    total_steps: int = 1
    final_lr_ratio: float = 1e-3

    def __post_init__(self):
        if self.kind not in ("constant", "linear_warmup_cosine"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")
        if not 0 < self.final_lr_ratio <= 1:
            raise ValueError("final_lr_ratio must lie in (0, 1]")


def lr_at(schedule: LrSchedule, t: int) -> float:
    if not 0 <= t < schedule.total_steps:
        raise ValueError(f"step {t} outside schedule of {schedule.total_steps} steps")
    base = schedule.base_lr
    if schedule.kind == "constant":
        return base
    if t < schedule.warmup_steps:
        # step 0 takes the step-1 value so the rate stays positive
        return base * max(t, 1) / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    progress = (t - schedule.warmup_steps) / span
    ratio = schedule.final_lr_ratio
    return base * (ratio + (1.0 - ratio) * 0.5 * (1.0 + math.cos(math.pi * progress)))


@dataclass(frozen=True)
class BisectionResult:
    lambda_star: float
    h_residual: float
    iters_used: int
    direction: np.ndarray
    bound: float
    capped: bool = False


@dataclass
class StepResult:
    """Outcome of one optimizer step plus the intermediates diagnostics need."""

    w: np.ndarray
    w_prev: np.ndarray
    eta: float
    spec: Optional[ManifoldSpec] = None
    momentum: Optional[np.ndarray] = None
    phi: Optional[np.ndarray] = None
    o: Optional[np.ndarray] = None
    direction: Optional[np.ndarray] = None
    pre_retraction: Optional[np.ndarray] = None
    normal: Optional[Normal] = None
    stationary: bool = False
    degenerate: bool = False
    bisection: Optional[BisectionResult] = None
    flags: list = field(default_factory=list)

    @property
    def scaled_update(self) -> np.ndarray:
        if self.direction is None:
            return np.zeros_like(self.w)
        return self.eta * self.direction


def _is_negligible(x: np.ndarray, ref: np.ndarray) -> bool:
    scale = float(np.linalg.norm(ref))
    return scale == 0.0 or float(np.linalg.norm(x)) <= STATIONARY_RTOL * scale


def _stationary(w, eta, spec, m, nrm=None, **extra) -> StepResult:
    return StepResult(
        w=w.copy(), w_prev=w, eta=eta, spec=spec, momentum=m.copy(), normal=nrm,
        stationary=True, flags=["stationary_tangent"], **extra,
    )


def _descend(w, o, state, spec, eta, res: StepResult) -> StepResult:
    o_norm = manifold_norm(spec, o)
    direction = (state.c * spec.radius / (o_norm + state.epsilon)) * o
    pre = w - eta * direction
    res.o = o
    res.direction = direction
    res.pre_retraction = pre
    res.w = retract(spec, pre)
    return res


def _check_eta(eta: float) -> None:
    if not eta > 0:
        raise ValueError(f"learning rate must be positive, got {eta}")


def macro_step(w, grad, state: OptimizerState, spec: ManifoldSpec, eta: float,
               msign_mode: MsignMode = EXACT) -> StepResult:
    """One MACRO step: tangent-project momentum, msign, rescale to ``c R``, descend, retract."""
    _check_eta(eta)
    w = as_matrix(w)
    m = state.accumulate(grad)
    nrm = normal(spec, w)
    phi = project_normal(spec, nrm, m)
    if _is_negligible(phi, m):
        return _stationary(w, eta, spec, m, nrm, phi=phi)
    res = StepResult(w=w, w_prev=w, eta=eta, spec=spec, momentum=m.copy(), phi=phi,
                     normal=nrm, degenerate=nrm.degenerate)
    if nrm.degenerate:
        res.flags.append("degenerate")
    return _descend(w, msign(phi, msign_mode), state, spec, eta, res)


def muonh_step(w, grad, state: OptimizerState, spec: ManifoldSpec, eta: float,
               msign_mode: MsignMode = EXACT) -> StepResult:
    """MACRO without the tangent projection: ``O = msign(M)``."""
    _check_eta(eta)
    w = as_matrix(w)
    m = state.accumulate(grad)
    if not np.any(m):
        return _stationary(w, eta, spec, m)
    res = StepResult(w=w, w_prev=w, eta=eta, spec=spec, momentum=m.copy())
    return _descend(w, msign(m, msign_mode), state, spec, eta, res)


def bisection_anchor(spec_kind, w) -> np.ndarray:
    """Matrix whose inner product with the update must vanish: ``w`` on the Frobenius sphere, ``u1 v1^T`` on the spectral sphere."""
    kind = Kind.parse(spec_kind)
    if kind not in (Kind.FROBENIUS, Kind.SPECTRAL):
        raise ValueError(f"bisection is defined for the two spheres, not {kind.value}")
    return normal(ManifoldSpec(kind, 1.0), w).theta


def h_value(anchor: np.ndarray, m: np.ndarray, lam: float, msign_mode: MsignMode = EXACT) -> tuple[float, np.ndarray]:
    o = msign(m + lam * anchor, msign_mode)
    return float(np.vdot(anchor, o)), o


def lambda_bound(anchor: np.ndarray, m: np.ndarray) -> float:
    # exact nuclear norms regardless of the msign mode used for h
    return 2.0 * float(singular_values(m).sum()) / float(singular_values(anchor).sum())


def bisect_lambda(w, m, spec_kind, tol: float = 1e-4, max_iters: int = 10,
                  msign_mode: MsignMode = EXACT, check_monotone: bool = False) -> BisectionResult:
    """Find ``lam`` with ``<A, msign(m + lam A)> = 0`` by bisection on ``[-B, B]``.

    ``A`` is the constraint normal at ``w`` and ``B = 2 ||m||_* / ||A||_*``;
    ``h`` is non-decreasing in ``lam`` so a sign change is guaranteed on the
    bracket. When ``max_iters`` midpoints are exhausted the point with the
    smallest ``|h|`` is returned with ``capped=True``.
    """
    w = as_matrix(w)
    m = as_matrix(m)
    if not np.any(w):
        raise ValueError("bisection needs a nonzero weight matrix")
    anchor = bisection_anchor(spec_kind, w)
    bound = lambda_bound(anchor, m)
    if bound == 0.0:
        raise ValueError("bisection needs nonzero momentum")

    lo, hi = -bound, bound
    h_lo, _ = h_value(anchor, m, lo, msign_mode)
    h_hi, _ = h_value(anchor, m, hi, msign_mode)
    if h_lo > BRACKET_SLACK or h_hi < -BRACKET_SLACK:
        raise BisectionError(f"bracket [{lo:.6g}, {hi:.6g}] has h = ({h_lo:.3e}, {h_hi:.3e}); no sign change")
    if check_monotone:
        grid = np.linspace(lo, hi, 20)
        hs = np.array([h_value(anchor, m, x, msign_mode)[0] for x in grid])
        if np.any(np.diff(hs) < -BRACKET_SLACK):
            raise BisectionError("h is not non-decreasing on the bracket grid")

    best = None
    for it in range(1, max_iters + 1):
        mid = 0.5 * (lo + hi)
        h, o = h_value(anchor, m, mid, msign_mode)
        if best is None or abs(h) < abs(best[1]):
            best = (mid, h, o)
        if abs(h) <= tol:
            return BisectionResult(mid, h, it, o, bound)
        if h < 0:
            lo = mid
        else:
            hi = mid
    lam, h, o = best
    return BisectionResult(lam, h, max_iters, o, bound, capped=True)


def fso_step(w, grad, state: OptimizerState, spec: ManifoldSpec, eta: float,
             inner_tol: float = 1e-4, inner_cap: int = 10,
             msign_mode: MsignMode = EXACT, check_monotone: bool = False) -> StepResult:
    """Double-loop step: bisect for the multiplier, then normalize, scale, descend and retract."""
    _check_eta(eta)
    w = as_matrix(w)
    m = state.accumulate(grad)
    if not np.any(m):
        return _stationary(w, eta, spec, m)
    bis = bisect_lambda(w, m, spec.kind, inner_tol, inner_cap, msign_mode, check_monotone)
    res = StepResult(w=w, w_prev=w, eta=eta, spec=spec, momentum=m.copy(), bisection=bis)
    if bis.capped:
        res.flags.append("bisection_capped")
    return _descend(w, bis.direction, state, spec, eta, res)


def muon_step(w, grad, state: OptimizerState, eta: float, weight_decay: float = 0.0,
              msign_mode: MsignMode = EXACT, shape_scale: bool = False) -> StepResult:
    """Unconstrained baseline: ``w <- (1 - eta wd) w - eta s msign(M)``.

    ``s`` is 1 unless ``shape_scale`` is set, in which case it is
    ``max(1, sqrt(d_out / d_in))``.
    """
    w = as_matrix(w)
    m = state.accumulate(grad)
    scale = max(1.0, math.sqrt(w.shape[0] / w.shape[1])) if shape_scale else 1.0
    if np.any(m):
        o = msign(m, msign_mode)
        direction = scale * o
    else:
        o = None
        direction = np.zeros_like(w)
    pre = (1.0 - eta * weight_decay) * w - eta * direction
    return StepResult(w=pre, w_prev=w, eta=eta, momentum=m.copy(), o=o,
                      direction=direction, pre_retraction=pre, stationary=o is None)


def adamw_step(p, grad, m, v, t: int, eta: float, betas=(0.9, 0.95), eps: float = 1e-8, wd: float = 0.0):
    """Decoupled AdamW with bias correction; ``t`` counts from 1. Returns ``(p, m, v)``."""
    if t < 1:
        raise ValueError("AdamW step count starts at 1")
    b1, b2 = betas
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(grad, dtype=np.float64)
    m = b1 * np.asarray(m, dtype=np.float64) + (1.0 - b1) * g
    v = b2 * np.asarray(v, dtype=np.float64) + (1.0 - b2) * g * g
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    p = p - eta * wd * p - eta * m_hat / (np.sqrt(v_hat) + eps)
    return p, m, v
