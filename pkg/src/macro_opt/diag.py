"""Training-dynamics measurements: rotation angles, relative LR, tangent violation, stable rank."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .linalg import as_matrix, leading_triplet, singular_values
from .manifold import Kind, ManifoldSpec, feasibility_gap, manifold_norm, normal, normal_inner


def _angle(a: np.ndarray, b: np.ndarray) -> float:
    # atan2 keeps full relative precision for tiny angles, where acos loses half the digits
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    cos = float(np.vdot(a, b))
    return math.atan2(float(np.linalg.norm(b - cos * a)), cos)


def rotation_angle_fro(w_t, w_next) -> float:
    """Angle between consecutive iterates under the Frobenius inner product."""
    a = as_matrix(w_t)
    b = as_matrix(w_next)
    if not np.any(a) or not np.any(b):
        raise ValueError("rotation angle undefined for a zero matrix")
    return _angle(a, b)


def tangency_cosine(w, o, radius: float) -> float:
    """alpha = <W, O>_F / (R ||O||_F)."""
    return float(np.vdot(w, o)) / (radius * float(np.linalg.norm(o)))


def exact_cos_theta_fro(eta: float, c: float, alpha: float) -> float:
    """Closed-form cosine of the Frobenius-sphere rotation for one normalized step."""
    return (1.0 - eta * c * alpha) / math.sqrt(1.0 - 2.0 * eta * c * alpha + (eta * c) ** 2)


def exact_theta_fro(eta: float, c: float, alpha: float) -> float:
    # tan(theta) = eta c sqrt(1 - alpha^2) / (1 - eta c alpha)
    alpha = min(1.0, max(-1.0, alpha))
    return math.atan2(eta * c * math.sqrt(1.0 - alpha * alpha), 1.0 - eta * c * alpha)


@dataclass(frozen=True)
class SpectralAngles:
    theta_u: float
    theta_v: float
    degenerate: bool


def rotation_angles_spec(w_t, w_next, gap_rtol: float = 1e-10) -> SpectralAngles:
    """Angles between the leading left and right singular vectors of two iterates."""
    a = leading_triplet(w_t, method="svd")
    b = leading_triplet(w_next, method="svd")
    theta_u = _angle(a.u, b.u if a.u @ b.u >= 0 else -b.u)
    theta_v = _angle(a.v, b.v if a.v @ b.v >= 0 else -b.v)
    degenerate = a.gap < gap_rtol * a.sigma or b.gap < gap_rtol * b.sigma
    return SpectralAngles(theta_u, theta_v, degenerate)


def spectral_gap(radius: float, w_next) -> float:
    """R - sigma_2 of the new iterate (R itself for a single-row/column matrix)."""
    s = singular_values(w_next)
    return radius - (float(s[1]) if s.size > 1 else 0.0)


def wedin_bound(eta: float, c: float, radius: float, w_next) -> float:
    """eta c R / (R - sigma_2(w_next)); infinite when the gap is not positive.

    Pass the pre-retraction point as ``w_next`` when the spectral retraction is
    the scaling approximation: scaling keeps the singular vectors but not
    sigma_2, and the perturbation bound is only guaranteed for the unscaled point.
    """
    gap = spectral_gap(radius, w_next)
    return math.inf if gap <= 0 else eta * c * radius / gap


def subspace_sin_max(x, z) -> float:
    """Largest principal-angle sine between the column spans of two orthonormal bases.

    Computed as the spectral norm of the projector difference ``XX^T - ZZ^T``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if x.shape[0] == 1:
        x, z = x.T, z.T
    return float(np.linalg.norm(x @ x.T - z @ z.T, 2))


def principal_angles(x, z) -> np.ndarray:
    """All principal angles (ascending) between the column spans of orthonormal ``x`` and ``z``.

    Cosines come from ``x^T z`` and sines from the part of ``z`` outside span(x);
    pairing them through atan2 keeps small and large angles accurate.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    xtz = x.T @ z
    cos = np.linalg.svd(xtz, compute_uv=False)
    sin = np.linalg.svd(z - x @ xtz, compute_uv=False)[::-1]
    return np.arctan2(sin, cos)


def tangent_violation(spec: ManifoldSpec, w, update_dir) -> float:
    """|<normal(W), update>|; for oblique manifolds the max over rows/columns."""
    return normal_inner(spec, normal(spec, w), as_matrix(update_dir))


def stable_rank(w) -> float:
    s = singular_values(w)
    if s[0] == 0:
        raise ValueError("stable rank undefined for the zero matrix")
    return float(np.sum(s**2) / s[0] ** 2)


def relative_lr(spec: ManifoldSpec, w, scaled_update) -> float:
    """||eta * direction||_M / ||W||_M, measured before retraction."""
    return manifold_norm(spec, scaled_update) / manifold_norm(spec, w)


def activation_rms(y) -> float:
    y = np.asarray(y, dtype=np.float64)
    return float(np.linalg.norm(y) / math.sqrt(y.size))


@dataclass(frozen=True)
class StepDiagnostics:
    step: int
    eta: float
    rel_lr: float
    vio: float
    stable_rank: float
    feasibility: float
    alpha: Optional[float] = None
    theta_fro: Optional[float] = None
    theta_fro_exact: Optional[float] = None
    theta_u: Optional[float] = None
    theta_v: Optional[float] = None
    spectral_gap: Optional[float] = None
    wedin_bound: Optional[float] = None
    c: Optional[float] = None
    degenerate: bool = False
    stationary: bool = False

    def as_dict(self) -> dict:
        return asdict(self)


def measure_step(step: int, result, c: float) -> StepDiagnostics:
    """Build a diagnostics record from an optimizer ``StepResult``."""
    spec = result.spec
    w_t, w_next = result.w_prev, result.w
    srk = stable_rank(w_next)
    feas = feasibility_gap(spec, w_next)
    if result.stationary or result.direction is None:
        return StepDiagnostics(step, result.eta, 0.0, 0.0, srk, feas, c=c, stationary=True)

    rel = relative_lr(spec, w_t, result.scaled_update)
    vio = tangent_violation(spec, w_t, result.direction)
    # effective c absorbs the epsilon in the normalization: rel_lr = eta * c_eff
    c_eff = rel / result.eta
    fields = {}
    if spec.kind is Kind.FROBENIUS:
        alpha = tangency_cosine(w_t, result.o, spec.radius)
        fields.update(
            alpha=alpha,
            theta_fro=rotation_angle_fro(w_t, w_next),
            theta_fro_exact=exact_theta_fro(result.eta, c_eff, alpha),
        )
    elif spec.kind is Kind.SPECTRAL:
        ang = rotation_angles_spec(w_t, w_next)
        fields.update(
            theta_u=ang.theta_u,
            theta_v=ang.theta_v,
            spectral_gap=spectral_gap(spec.radius, w_next),
            wedin_bound=wedin_bound(result.eta, c_eff, spec.radius, result.pre_retraction),
            degenerate=ang.degenerate or result.degenerate,
        )
    return StepDiagnostics(step, result.eta, rel, vio, srk, feas, c=c, **fields)
