"""Quadratic B-spline transfer weights and the fixed-corotated constitutive model.

Every stress routine accepts either a single 2x2 matrix or a stack of shape
``(n, 2, 2)``; material parameters broadcast against the leading axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "InvertedElementError",
    "StencilWeights",
    "Material",
    "lame_parameters",
    "bspline_weights",
    "bspline_stencil",
    "polar_2d",
    "pk1_stress",
    "pk1_stress_jacobian",
    "pk1_stress_param_partials",
]


class InvertedElementError(ValueError):
    """Raised when det(F) <= 0 for some particle."""

    def __init__(self, particles, step=None):
        self.particles = np.atleast_1d(np.asarray(particles)).tolist()
        self.step = step
        where = f" at step {step}" if step is not None else ""
        head = ", ".join(str(p) for p in self.particles[:8])
        more = "..." if len(self.particles) > 8 else ""
        super().__init__(f"inverted element (det F <= 0) for particle(s) {head}{more}{where}")


@dataclass(frozen=True)
class StencilWeights:
    base: tuple[int, int]
    wx: np.ndarray
    wy: np.ndarray

    @property
    def w(self) -> np.ndarray:
        return np.outer(self.wx, self.wy)


@dataclass(frozen=True)
class Material:
    mu: float
    lam: float

    @classmethod
    def from_youngs(cls, E: float, nu: float) -> "Material":
        mu, lam = lame_parameters(E, nu)
        return cls(float(mu), float(lam))


def lame_parameters(E, nu):
    """Plane-strain Lame parameters ``(mu, lam)`` from Young's modulus and Poisson ratio."""
    E = np.asarray(E, dtype=float)
    nu = np.asarray(nu, dtype=float)
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return mu, lam


def lame_dE(nu):
    """Derivatives ``(dmu/dE, dlam/dE)``; both are independent of E."""
    nu = np.asarray(nu, dtype=float)
    return 1.0 / (2.0 * (1.0 + nu)), nu / ((1.0 + nu) * (1.0 - 2.0 * nu))


def bspline_weights(fx):
    """Weights, and their derivatives in cell units, for fractional offsets ``fx`` in [0.5, 1.5).

    ``fx`` is the particle position relative to the lowest stencil node, in cells.
    Returns arrays of shape ``fx.shape + (3,)``.
    """
    fx = np.asarray(fx)
    a = 1.5 - fx
    b = fx - 1.0
    c = fx - 0.5
    w = np.stack([0.5 * a * a, 0.75 - b * b, 0.5 * c * c], axis=-1)
    dw = np.stack([-a, -2.0 * b, c], axis=-1)
    return w, dw


def bspline_stencil(x_p, dx: float, grid_res=None) -> StencilWeights:
    """3x3 quadratic B-spline stencil for one particle."""
    x_p = np.asarray(x_p, dtype=float)
    u = x_p / dx
    base = np.floor(u - 0.5).astype(int)
    if np.any(base < 0) or (grid_res is not None and np.any(base + 2 > np.asarray(grid_res) - 1)):
        raise ValueError(f"position {x_p.tolist()} is outside the grid stencil range")
    w, _ = bspline_weights(u - base)
    return StencilWeights((int(base[0]), int(base[1])), w[0], w[1])


def _as_stack(F):
    F = np.asarray(F)
    return F.reshape(-1, 2, 2), F.ndim == 2


def _check_det(J, particle_ids=None):
    bad = np.flatnonzero(~(J > 0))
    if bad.size:
        ids = bad if particle_ids is None else np.asarray(particle_ids)[bad]
        raise InvertedElementError(ids)


def polar_2d(F):
    """Rotation factor of the polar decomposition of 2x2 ``F`` (single or stacked)."""
    Fs, single = _as_stack(F)
    _check_det(Fs[:, 0, 0] * Fs[:, 1, 1] - Fs[:, 0, 1] * Fs[:, 1, 0])
    R = _rotation(Fs)
    return R[0] if single else R


def _rotation(Fs):
    s = Fs[:, 0, 0] + Fs[:, 1, 1]
    t = Fs[:, 1, 0] - Fs[:, 0, 1]
    r = np.hypot(s, t)
    cs, sn = s / r, t / r
    R = np.empty_like(Fs)
    R[:, 0, 0] = cs
    R[:, 0, 1] = -sn
    R[:, 1, 0] = sn
    R[:, 1, 1] = cs
    return R


def _cofactor(Fs):
    # J F^{-T} for 2x2
    cof = np.empty_like(Fs)
    cof[:, 0, 0] = Fs[:, 1, 1]
    cof[:, 0, 1] = -Fs[:, 1, 0]
    cof[:, 1, 0] = -Fs[:, 0, 1]
    cof[:, 1, 1] = Fs[:, 0, 0]
    return cof


def pk1_stress(F, mu, lam, check: bool = True):
    """First Piola-Kirchhoff stress ``2 mu (F - R) + lam (J - 1) J F^{-T}``."""
    Fs, single = _as_stack(F)
    J = Fs[:, 0, 0] * Fs[:, 1, 1] - Fs[:, 0, 1] * Fs[:, 1, 0]
    if check:
        _check_det(J)
    mu = np.asarray(mu, dtype=Fs.dtype).reshape(-1, 1, 1)
    lam = np.asarray(lam, dtype=Fs.dtype).reshape(-1, 1, 1)
    P = 2.0 * mu * (Fs - _rotation(Fs)) + lam * (J - 1.0)[:, None, None] * _cofactor(Fs)
    return P[0] if single else P


def pk1_stress_param_partials(F):
    """``(dP/dmu, dP/dlam)`` at ``F``: ``2 (F - R)`` and ``(J - 1) J F^{-T}``."""
    Fs, single = _as_stack(F)
    J = Fs[:, 0, 0] * Fs[:, 1, 1] - Fs[:, 0, 1] * Fs[:, 1, 0]
    dmu = 2.0 * (Fs - _rotation(Fs))
    dlam = (J - 1.0)[:, None, None] * _cofactor(Fs)
    if single:
        return dmu[0], dlam[0]
    return dmu, dlam


def pk1_stress_jacobian(F, mu, lam, check: bool = True):
    """dP/dF as ``(4, 4)`` (or ``(n, 4, 4)``) with row ``2*a+b`` for P_ab, column ``2*c+d`` for F_cd."""
    Fs, single = _as_stack(F)
    J = Fs[:, 0, 0] * Fs[:, 1, 1] - Fs[:, 0, 1] * Fs[:, 1, 0]
    if check:
        _check_det(J)
    n = Fs.shape[0]
    mu = np.broadcast_to(np.asarray(mu, dtype=Fs.dtype), (n,))
    lam = np.broadcast_to(np.asarray(lam, dtype=Fs.dtype), (n,))

    s = Fs[:, 0, 0] + Fs[:, 1, 1]
    t = Fs[:, 1, 0] - Fs[:, 0, 1]
    r2 = s * s + t * t
    cs, sn = s / np.sqrt(r2), t / np.sqrt(r2)
    # dtheta/dF in (00, 01, 10, 11) order
    dtheta = np.stack([-t, -s, s, -t], axis=-1) / r2[:, None]
    # dR/dtheta flattened
    dR = np.stack([-sn, -cs, cs, -sn], axis=-1)
    T = -2.0 * mu[:, None, None] * dR[:, :, None] * dtheta[:, None, :]
    T += 2.0 * mu[:, None, None] * np.eye(4)

    cof = _cofactor(Fs).reshape(n, 4)
    T += lam[:, None, None] * cof[:, :, None] * cof[:, None, :]
    dcof = np.zeros((4, 4))
    dcof[0, 3] = dcof[3, 0] = 1.0
    dcof[1, 2] = dcof[2, 1] = -1.0
    T += (lam * (J - 1.0))[:, None, None] * dcof
    return T[0] if single else T
