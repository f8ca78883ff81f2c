"""Dense linear-algebra kernels: thin SVD, polar factor (msign), leading singular triplet, norms."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

RANK_TOL = 1e-12

NORM_KINDS = ("frobenius", "spectral", "nuclear", "one_to_two", "two_to_inf")


class LinalgError(ArithmeticError):
    """Numerical failure in a linear-algebra kernel."""


class ConvergenceError(LinalgError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


def as_matrix(a, copy: bool = False) -> np.ndarray:
    """Coerce ``a`` to a finite 2-D float64 array, rejecting NaN/Inf and empty shapes."""
    m = np.array(a, dtype=np.float64, copy=copy)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"matrix must have at least one row and column, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    return m


class SvdResult(NamedTuple):
    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray


def _svd_jacobi(a: np.ndarray, tol: float, max_sweeps: int) -> SvdResult:
    # One-sided (Hestenes) Jacobi on the tall orientation. Disjoint column pairs
    # from a round-robin tournament are rotated together in one vectorized pass.
    transpose = a.shape[0] < a.shape[1]
    x = (a.T if transpose else a).copy()
    m, n = x.shape
    v = np.eye(n)
    n_even = n + (n % 2)
    players = list(range(n_even))
    scale = max(np.linalg.norm(x), np.finfo(float).tiny)
    off = np.inf
    for _ in range(max_sweeps):
        off = 0.0
        for _round in range(n_even - 1):
            pairs = [
                (players[i], players[n_even - 1 - i])
                for i in range(n_even // 2)
                if players[i] < n and players[n_even - 1 - i] < n
            ]
            players = [players[0]] + [players[-1]] + players[1:-1]
            if not pairs:
                continue
            p = np.array([min(ij) for ij in pairs])
            q = np.array([max(ij) for ij in pairs])
            xp, xq = x[:, p], x[:, q]
            alpha = np.einsum("ij,ij->j", xp, xp)
            beta = np.einsum("ij,ij->j", xq, xq)
            gamma = np.einsum("ij,ij->j", xp, xq)
            denom = np.sqrt(alpha * beta)
            rel = np.abs(gamma) / np.where(denom > 0, denom, 1.0)
            rel = np.where(denom > (1e-300 * scale**2), rel, 0.0)
            off = max(off, float(rel.max(initial=0.0)))
            active = rel > tol
            if not np.any(active):
                continue
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta**2))
            t = np.where(zeta == 0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t**2)
            s = c * t
            xp, xq = x[:, p], x[:, q]
            x[:, p] = c * xp - s * xq
            x[:, q] = s * xp + c * xq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if off <= tol:
            break
    else:
        raise ConvergenceError("one-sided Jacobi SVD did not converge", off)

    sing = np.linalg.norm(x, axis=0)
    order = np.argsort(-sing, kind="stable")
    sing = sing[order]
    x = x[:, order]
    v = v[:, order]
    u = np.zeros_like(x)
    nz = sing > 0
    u[:, nz] = x[:, nz] / sing[nz]
    if not np.all(nz):
        u = _complete_orthonormal(u, nz)
    if transpose:
        return SvdResult(v, sing, u.T)
    return SvdResult(u, sing, v.T)


def _complete_orthonormal(u: np.ndarray, filled: np.ndarray) -> np.ndarray:
    # Replace columns for zero singular values with an orthonormal completion.
    q, _ = np.linalg.qr(np.hstack([u[:, filled], np.eye(u.shape[0])]))
    out = u.copy()
    out[:, ~filled] = q[:, filled.sum() : filled.sum() + (~filled).sum()]
    return out


def svd(a, method: str = "lapack", tol: float = 1e-15, max_sweeps: int = 60) -> SvdResult:
    """Thin SVD ``a = U diag(s) Vt`` with ``s`` non-increasing.

    ``method="jacobi"`` runs the in-repo one-sided Jacobi kernel; ``"lapack"``
    calls the divide-and-conquer LAPACK driver, which is much faster for the
    many small decompositions an optimizer run performs.
    """
    a = as_matrix(a)
    if method == "jacobi":
        return _svd_jacobi(a, tol, max_sweeps)
    if method != "lapack":
        raise ValueError(f"unknown svd method {method!r}")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(f"LAPACK SVD failed: {exc}", float("nan")) from exc
    return SvdResult(u, s, vt)


def singular_values(a) -> np.ndarray:
    return np.linalg.svd(as_matrix(a), compute_uv=False)


def msign_svd(a, rank_tol: float = RANK_TOL) -> np.ndarray:
    """Polar factor ``U V^T`` over singular values above ``rank_tol * s_max``."""
    u, s, vt = svd(a)
    if s[0] == 0.0:
        raise LinalgError("msign is undefined for the zero matrix")
    keep = s > rank_tol * s[0]
    return u[:, keep] @ vt[keep, :]


def msign_ns(a, iters: int) -> np.ndarray:
    """Cubic Newton-Schulz polar iteration ``X <- 1.5 X - 0.5 X X^T X`` after Frobenius scaling."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    x = as_matrix(a, copy=True)
    fro = np.linalg.norm(x)
    if fro == 0.0:
        raise LinalgError("msign is undefined for the zero matrix")
    x /= fro
    transpose = x.shape[0] > x.shape[1]
    if transpose:
        x = x.T
    for _ in range(iters):
        x = 1.5 * x - 0.5 * (x @ x.T) @ x
    return x.T if transpose else x


@dataclass(frozen=True)
class MsignMode:
    """Which polar-factor routine to use: exact SVD or ``iters`` Newton-Schulz steps."""

    kind: str = "exact"
    iters: int = 30

    def __post_init__(self):
        if self.kind not in ("exact", "newton_schulz"):
            raise ValueError(f"unknown msign mode {self.kind!r}")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")

    @classmethod
    def parse(cls, value) -> "MsignMode":
        if isinstance(value, MsignMode):
            return value
        if value in (None, "exact", "svd"):
            return cls("exact")
        if value in ("ns", "newton_schulz"):
            return cls("newton_schulz")
        if isinstance(value, str) and value.startswith(("ns:", "newton_schulz:")):
            return cls("newton_schulz", int(value.split(":", 1)[1]))
        raise ValueError(f"cannot parse msign mode {value!r}")


EXACT = MsignMode("exact")


def msign(a, mode: MsignMode = EXACT) -> np.ndarray:
    if mode.kind == "exact":
        return msign_svd(a)
    return msign_ns(a, mode.iters)


@dataclass(frozen=True)
class Triplet:
    sigma: float
    u: np.ndarray
    v: np.ndarray
    fallback: bool = False
    iters: int = 0
    gap: float = field(default=float("nan"))


def _fix_sign(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    nz = np.flatnonzero(np.abs(u) > 0)
    if nz.size and u[nz[0]] < 0:
        return -u, -v
    return u, v


def leading_triplet(a, tol: float = 1e-12, max_iters: int = 1000, method: str = "power") -> Triplet:
    """Largest singular value and its unit singular vectors.

    The power route iterates on ``A^T A``; when it has not converged within
    ``max_iters`` (typically because sigma1 and sigma2 are nearly tied) the
    SVD triplet is returned with ``fallback=True``. The first nonzero entry of
    ``u`` is made positive. ``gap`` (sigma1 - sigma2) is only known on the SVD
    route and is NaN after a converged power iteration.
    """
    a = as_matrix(a)
    s_all = None
    if method == "svd":
        u, s_all, vt = svd(a)
        if s_all[0] == 0.0:
            raise LinalgError("leading triplet undefined for the zero matrix")
        uu, vv = _fix_sign(u[:, 0], vt[0])
        gap = s_all[0] - (s_all[1] if s_all.size > 1 else 0.0)
        return Triplet(float(s_all[0]), uu, vv, False, 0, float(gap))
    if method != "power":
        raise ValueError(f"unknown method {method!r}")
    if not np.any(a):
        raise LinalgError("leading triplet undefined for the zero matrix")

    # Deterministic start: the row of A^T A with the largest norm.
    gram = a.T @ a
    v = gram[np.argmax(np.linalg.norm(gram, axis=1))].copy()
    v /= np.linalg.norm(v)
    for it in range(1, max_iters + 1):
        w = gram @ v
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            break
        # eigen-residual of the current iterate, so the vector (not just lam) has converged
        resid = float(np.linalg.norm(w - (v @ w) * v))
        v = w / lam
        if resid <= math.sqrt(tol) * lam:
            sigma = float(np.sqrt(lam))
            u = a @ v
            u /= np.linalg.norm(u)
            u, v = _fix_sign(u, v)
            return Triplet(sigma, u, v, False, it)

    res = leading_triplet(a, method="svd")
    return Triplet(res.sigma, res.u, res.v, True, max_iters, res.gap)


def norm(a, kind: str = "frobenius") -> float:
    a = as_matrix(a)
    if kind == "frobenius":
        # rescale first so squares of tiny or huge entries neither underflow nor overflow
        peak = float(np.max(np.abs(a)))
        return 0.0 if peak == 0.0 else peak * float(np.linalg.norm(a / peak))
    if kind == "spectral":
        return float(singular_values(a)[0])
    if kind == "nuclear":
        return float(singular_values(a).sum())
    if kind == "one_to_two":
        return float(np.linalg.norm(a, axis=0).max())
    if kind == "two_to_inf":
        return float(np.linalg.norm(a, axis=1).max())
    raise ValueError(f"unknown norm kind {kind!r}; expected one of {NORM_KINDS}")


def inner(a, b) -> float:
    """Frobenius inner product."""
    return float(np.vdot(a, b))
