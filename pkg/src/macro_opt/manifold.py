"""Constraint sets: Frobenius sphere, spectral sphere, input/output oblique manifolds."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .linalg import as_matrix, leading_triplet, norm

ON_MANIFOLD_RTOL = 1e-8
SPECTRAL_GAP_RTOL = 1e-10


class Kind(str, Enum):
    FROBENIUS = "frobenius_sphere"
    SPECTRAL = "spectral_sphere"
    OBLIQUE_IN = "oblique_in"
    OBLIQUE_OUT = "oblique_out"

    @classmethod
    def parse(cls, value) -> "Kind":
        if isinstance(value, cls):
            return value
        aliases = {"fro": cls.FROBENIUS, "frobenius": cls.FROBENIUS, "spec": cls.SPECTRAL, "spectral": cls.SPECTRAL}
        if value in aliases:
            return aliases[value]
        return cls(value)


class ManifoldError(ValueError):
    """A point or direction for which the constraint geometry is undefined."""


@dataclass(frozen=True)
class ManifoldSpec:
    kind: Kind
    radius: float = 1.0
    exact_spectral: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind.parse(self.kind))
        if not (self.radius > 0 and math.isfinite(self.radius)):
            raise ValueError(f"radius must be positive and finite, got {self.radius}")


@dataclass(frozen=True)
class RadiusRule:
    """Table-style radius: multiplier ``r`` applied to the shape-dependent base radius."""

    r: float
    d_in: int
    d_out: int

    def __post_init__(self):
        if self.r <= 0 or self.d_in < 1 or self.d_out < 1:
            raise ValueError(f"invalid radius rule {self}")


def radius_for(rule: RadiusRule, kind) -> float:
    kind = Kind.parse(kind)
    if kind is Kind.FROBENIUS:
        return rule.r * math.sqrt(rule.d_out)
    if kind is Kind.OBLIQUE_OUT:
        return rule.r
    # spectral sphere and input oblique share r * sqrt(d_out / d_in)
    return rule.r * math.sqrt(rule.d_out / rule.d_in)


def manifold_norm(spec: ManifoldSpec, a) -> float:
    kind = {
        Kind.FROBENIUS: "frobenius",
        Kind.SPECTRAL: "spectral",
        Kind.OBLIQUE_IN: "one_to_two",
        Kind.OBLIQUE_OUT: "two_to_inf",
    }[spec.kind]
    return norm(a, kind)


def _axis(kind: Kind) -> int:
    # oblique_out normalizes rows (reduce over axis 1), oblique_in columns (axis 0)
    return 1 if kind is Kind.OBLIQUE_OUT else 0


def feasibility_gap(spec: ManifoldSpec, w) -> float:
    """Relative distance of ``w``'s constrained norm(s) from the radius."""
    w = as_matrix(w)
    if spec.kind in (Kind.FROBENIUS, Kind.SPECTRAL):
        return abs(manifold_norm(spec, w) - spec.radius) / spec.radius
    norms = np.linalg.norm(w, axis=_axis(spec.kind))
    return float(np.max(np.abs(norms - spec.radius)) / spec.radius)


def check_on_manifold(spec: ManifoldSpec, w, rtol: float = ON_MANIFOLD_RTOL) -> None:
    gap = feasibility_gap(spec, w)
    if not gap <= rtol:
        raise ManifoldError(f"point is off the {spec.kind.value} (relative gap {gap:.3e} > {rtol:.0e})")


@dataclass(frozen=True)
class Normal:
    """Constraint normal at a point.

    For the spheres ``theta`` is a single matrix; for oblique manifolds it is
    the point itself, and the normal acts row- or column-wise.
    """

    theta: np.ndarray
    degenerate: bool = False


def normal(spec: ManifoldSpec, w) -> Normal:
    w = as_matrix(w)
    if spec.kind is Kind.FROBENIUS:
        if not np.any(w):
            raise ManifoldError("normal undefined at the zero matrix")
        return Normal(w)
    if spec.kind is Kind.SPECTRAL:
        if not np.any(w):
            raise ManifoldError("normal undefined at the zero matrix")
        trip = leading_triplet(w, method="svd")
        degenerate = trip.gap < SPECTRAL_GAP_RTOL * trip.sigma
        return Normal(np.outer(trip.u, trip.v), degenerate)
    norms = np.linalg.norm(w, axis=_axis(spec.kind))
    if np.any(norms == 0):
        what = "row" if spec.kind is Kind.OBLIQUE_OUT else "column"
        raise ManifoldError(f"zero {what}: oblique normal undefined")
    return Normal(w)


def project_normal(spec: ManifoldSpec, nrm: Normal, m: np.ndarray) -> np.ndarray:
    """Orthogonal projection of ``m`` onto the tangent space described by ``nrm``."""
    theta = nrm.theta
    if spec.kind in (Kind.FROBENIUS, Kind.SPECTRAL):
        return m - (np.vdot(m, theta) / np.vdot(theta, theta)) * theta
    ax = _axis(spec.kind)
    coef = np.sum(m * theta, axis=ax, keepdims=True) / np.sum(theta * theta, axis=ax, keepdims=True)
    return m - coef * theta


def tangent_project(spec: ManifoldSpec, w, m, check: bool = True) -> np.ndarray:
    """Remove from ``m`` its component along the constraint normal at ``w``."""
    w = as_matrix(w)
    m = as_matrix(m)
    if w.shape != m.shape:
        raise ValueError(f"shape mismatch {w.shape} vs {m.shape}")
    if check:
        check_on_manifold(spec, w)
    return project_normal(spec, normal(spec, w), m)


def normal_inner(spec: ManifoldSpec, nrm: Normal, d: np.ndarray) -> float:
    """|<normal, d>|, reduced by max over rows/columns for oblique manifolds."""
    if spec.kind in (Kind.FROBENIUS, Kind.SPECTRAL):
        return abs(float(np.vdot(nrm.theta, d)))
    return float(np.max(np.abs(np.sum(nrm.theta * d, axis=_axis(spec.kind)))))


def retract(spec: ManifoldSpec, a, exact_spectral: bool | None = None) -> np.ndarray:
    """Map ``a`` back onto the constraint set.

    The spectral sphere uses ``R a / ||a||_2`` unless ``exact_spectral`` is
    set (here or on ``spec``), in which case singular values above ``R`` are
    clipped to ``R`` (or the largest is raised to ``R`` when all are below it).
    """
    a = as_matrix(a)
    if exact_spectral is None:
        exact_spectral = spec.exact_spectral
    R = spec.radius
    if spec.kind is Kind.FROBENIUS:
        n = norm(a, "frobenius")
        if n == 0:
            raise ManifoldError("cannot retract the zero matrix")
        return a * (R / n)
    if spec.kind is Kind.SPECTRAL:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
        if s[0] == 0:
            raise ManifoldError("cannot retract the zero matrix")
        if not exact_spectral:
            return a * (R / s[0])
        s = np.minimum(s, R)
        s[0] = R
        return (u * s) @ vt
    ax = _axis(spec.kind)
    norms = np.linalg.norm(a, axis=ax, keepdims=True)
    if np.any(norms == 0):
        what = "row" if spec.kind is Kind.OBLIQUE_OUT else "column"
        raise ManifoldError(f"cannot retract a matrix with a zero {what}")
    return a * (R / norms)
