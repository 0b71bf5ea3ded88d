"""Pure-numpy particle/grid transfer kernels (fallback for the compiled core).

All kernels share one stencil convention: ``base = floor(x/dx - 0.5)``, stencil
nodes ``base + (i, j)`` for ``i, j`` in 0..2, offsets ``d = x_node - x_p``.
Scatter-adds go through ``np.bincount``, which sums in particle order, so the
result is deterministic.
"""
from __future__ import annotations

import numpy as np

from .kernel_math import bspline_weights

_OFF = np.arange(3)


def _stencil(x, dx):
    u = x / dx
    base = np.floor(u - 0.5).astype(np.int64)
    f = u - base
    w, dw = bspline_weights(f)
    # d[p, i, j] = ((i - fx) dx, (j - fy) dx)
    dxi = (_OFF[None, :] - f[:, 0:1]) * dx
    dyj = (_OFF[None, :] - f[:, 1:2]) * dx
    return base, w.astype(x.dtype, copy=False), dw.astype(x.dtype, copy=False), dxi, dyj


def _flat_index(base, res):
    ix = base[:, 0:1] + _OFF[None, :]
    iy = base[:, 1:2] + _OFF[None, :]
    return (ix[:, :, None] * res[1] + iy[:, None, :]).ravel()


def scatter(x, dx, res, a, B, mass=None, nthreads=1):
    """Accumulate ``sum_p w (a_p + B_p d)`` (and ``sum_p w m_p``) onto the grid."""
    res = tuple(int(r) for r in res)
    n_nodes = res[0] * res[1]
    base, w, _, dxi, dyj = _stencil(x, dx)
    W = w[:, 0, :, None] * w[:, 1, None, :]
    idx = _flat_index(base, res)
    out_p = np.empty(res + (2,), dtype=x.dtype)
    for k in range(2):
        val = a[:, k, None, None] + B[:, k, 0, None, None] * dxi[:, :, None] + B[:, k, 1, None, None] * dyj[:, None, :]
        out_p[..., k] = np.bincount(idx, weights=(W * val).ravel(), minlength=n_nodes).reshape(res)
    out_m = None
    if mass is not None:
        out_m = np.bincount(idx, weights=(W * mass[:, None, None]).ravel(), minlength=n_nodes)
        out_m = out_m.reshape(res).astype(x.dtype, copy=False)
    return out_m, out_p


def _gather_nodes(grid, base):
    ix = base[:, 0:1] + _OFF[None, :]
    iy = base[:, 1:2] + _OFF[None, :]
    return grid[ix[:, :, None], iy[:, None, :]]


def gather(x, dx, grid_v, nthreads=1):
    """Return ``v_p = sum w v_i`` and ``B_p = sum w v_i d^T``."""
    base, w, _, dxi, dyj = _stencil(x, dx)
    W = w[:, 0, :, None] * w[:, 1, None, :]
    vn = _gather_nodes(grid_v, base)  # (N, 3, 3, 2)
    Wv = W[..., None] * vn
    v = Wv.sum(axis=(1, 2))
    B = np.empty((x.shape[0], 2, 2), dtype=x.dtype)
    B[:, :, 0] = (Wv * dxi[:, :, None, None]).sum(axis=(1, 2))
    B[:, :, 1] = (Wv * dyj[:, None, :, None]).sum(axis=(1, 2))
    return v, B


def gather_adjoint(x, dx, grid_v, grid_gp, grid_gm, gv, kgC, mass, mv, G, nthreads=1):
    """Per-particle reductions needed by the backward transfer.

    Returns ``(sum w gp_i, sum w gp_i d^T, sum w gm_i, sum s_i grad(w))`` with
    ``s_i = gv.v_i + v_i^T kgC d + gp_i.(mv + G d) + gm_i m_p``.
    """
    base, w, dw, dxi, dyj = _stencil(x, dx)
    W = w[:, 0, :, None] * w[:, 1, None, :]
    Wx = dw[:, 0, :, None] * w[:, 1, None, :] / dx
    Wy = w[:, 0, :, None] * dw[:, 1, None, :] / dx
    vn = _gather_nodes(grid_v, base)
    gpn = _gather_nodes(grid_gp, base)
    gmn = _gather_nodes(grid_gm, base)
    DX = np.broadcast_to(dxi[:, :, None], W.shape)
    DY = np.broadcast_to(dyj[:, None, :], W.shape)

    Wg = W[..., None] * gpn
    gp_w = Wg.sum(axis=(1, 2))
    gp_wd = np.empty((x.shape[0], 2, 2), dtype=x.dtype)
    gp_wd[:, :, 0] = (Wg * DX[..., None]).sum(axis=(1, 2))
    gp_wd[:, :, 1] = (Wg * DY[..., None]).sum(axis=(1, 2))
    gm_w = (W * gmn).sum(axis=(1, 2))

    s = vn[..., 0] * gv[:, 0, None, None] + vn[..., 1] * gv[:, 1, None, None]
    for r in range(2):
        s += vn[..., r] * (kgC[:, r, 0, None, None] * DX + kgC[:, r, 1, None, None] * DY)
        s += gpn[..., r] * (mv[:, r, None, None] + G[:, r, 0, None, None] * DX + G[:, r, 1, None, None] * DY)
    s += gmn * mass[:, None, None]
    gradw = np.stack([(s * Wx).sum(axis=(1, 2)), (s * Wy).sum(axis=(1, 2))], axis=-1)
    return gp_w, gp_wd, gm_w, gradw
