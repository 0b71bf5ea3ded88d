# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled particle/grid transfer kernels.

Same contracts as ``chainwork._transfer``. Scatter uses one private grid per
worker over contiguous particle chunks, merged in worker order afterwards, so
results are deterministic for a fixed thread count.
"""
import numpy as np
from cython.parallel cimport prange
from libc.math cimport floor

ctypedef fused real:
    float
    double


cdef inline long _axis(real u, real dx, real* w, real* dw, real* d) noexcept nogil:
    cdef long b = <long>floor(u - 0.5)
    cdef real f = u - b
    cdef real a0 = 1.5 - f
    cdef real a1 = f - 1.0
    cdef real a2 = f - 0.5
    w[0] = 0.5 * a0 * a0
    w[1] = 0.75 - a1 * a1
    w[2] = 0.5 * a2 * a2
    dw[0] = -a0
    dw[1] = -2.0 * a1
    dw[2] = a2
    d[0] = (0.0 - f) * dx
    d[1] = (1.0 - f) * dx
    d[2] = (2.0 - f) * dx
    return b


cdef void _scatter_chunk(real[:, ::1] x, real dx, real[:, ::1] a, real[:, :, ::1] B,
                         real[::1] mass, bint has_mass, real[:, :, ::1] out,
                         Py_ssize_t lo, Py_ssize_t hi) noexcept nogil:
    cdef real wx[3]
    cdef real wy[3]
    cdef real dwx[3]
    cdef real dwy[3]
    cdef real ddx[3]
    cdef real ddy[3]
    cdef Py_ssize_t p
    cdef int i, j
    cdef long bx, by
    cdef real ww
    for p in range(lo, hi):
        bx = _axis(x[p, 0] / dx, dx, wx, dwx, ddx)
        by = _axis(x[p, 1] / dx, dx, wy, dwy, ddy)
        for i in range(3):
            for j in range(3):
                ww = wx[i] * wy[j]
                out[bx + i, by + j, 1] += ww * (a[p, 0] + B[p, 0, 0] * ddx[i] + B[p, 0, 1] * ddy[j])
                out[bx + i, by + j, 2] += ww * (a[p, 1] + B[p, 1, 0] * ddx[i] + B[p, 1, 1] * ddy[j])
                if has_mass:
                    out[bx + i, by + j, 0] += ww * mass[p]


def scatter(real[:, ::1] x, double dx, res, real[:, ::1] a, real[:, :, ::1] B,
            real[::1] mass=None, int nthreads=1):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t nx = res[0], ny = res[1]
    cdef int nt = max(1, nthreads)
    dtype = np.float32 if real is float else np.float64
    buf_np = np.zeros((nt, nx, ny, 3), dtype=dtype)
    cdef real[:, :, :, ::1] buf = buf_np
    cdef bint has_mass = mass is not None
    cdef real[::1] mview
    if has_mass:
        mview = mass
    else:
        mview = np.zeros(1, dtype=dtype)
    cdef Py_ssize_t chunk = (n + nt - 1) // nt
    cdef Py_ssize_t t
    cdef real rdx = dx
    if nt == 1:
        _scatter_chunk(x, rdx, a, B, mview, has_mass, buf[0], 0, n)
    else:
        for t in prange(nt, nogil=True, num_threads=nt, schedule="static", chunksize=1):
            _scatter_chunk(x, rdx, a, B, mview, has_mass, buf[t],
                           min(n, t * chunk), min(n, (t + 1) * chunk))
    out = buf_np[0]
    for t in range(1, nt):
        out += buf_np[t]
    return (np.ascontiguousarray(out[..., 0]) if has_mass else None), np.ascontiguousarray(out[..., 1:])


cdef void _gather_one(real[:, ::1] x, real dx, real[:, :, ::1] grid_v,
                      real[:, ::1] v, real[:, :, ::1] Bm, Py_ssize_t p) noexcept nogil:
    cdef real wx[3]
    cdef real wy[3]
    cdef real dwx[3]
    cdef real dwy[3]
    cdef real ddx[3]
    cdef real ddy[3]
    cdef int i, j
    cdef long bx, by
    cdef real ww, gx, gy
    cdef real s0 = 0, s1 = 0, b00 = 0, b01 = 0, b10 = 0, b11 = 0
    bx = _axis(x[p, 0] / dx, dx, wx, dwx, ddx)
    by = _axis(x[p, 1] / dx, dx, wy, dwy, ddy)
    for i in range(3):
        for j in range(3):
            ww = wx[i] * wy[j]
            gx = ww * grid_v[bx + i, by + j, 0]
            gy = ww * grid_v[bx + i, by + j, 1]
            s0 += gx
            s1 += gy
            b00 += gx * ddx[i]
            b01 += gx * ddy[j]
            b10 += gy * ddx[i]
            b11 += gy * ddy[j]
    v[p, 0] = s0
    v[p, 1] = s1
    Bm[p, 0, 0] = b00
    Bm[p, 0, 1] = b01
    Bm[p, 1, 0] = b10
    Bm[p, 1, 1] = b11


def gather(real[:, ::1] x, double dx, real[:, :, ::1] grid_v, int nthreads=1):
    cdef Py_ssize_t n = x.shape[0]
    dtype = np.float32 if real is float else np.float64
    v_np = np.zeros((n, 2), dtype=dtype)
    B_np = np.zeros((n, 2, 2), dtype=dtype)
    cdef real[:, ::1] v = v_np
    cdef real[:, :, ::1] Bm = B_np
    cdef int nt = max(1, nthreads)
    cdef Py_ssize_t p
    cdef real rdx = dx
    if nt == 1:
        for p in range(n):
            _gather_one(x, rdx, grid_v, v, Bm, p)
    else:
        for p in prange(n, nogil=True, num_threads=nt, schedule="static"):
            _gather_one(x, rdx, grid_v, v, Bm, p)
    return v_np, B_np


cdef void _gather_adjoint_one(real[:, ::1] x, real dx, real[:, :, ::1] grid_v,
                              real[:, :, ::1] grid_gp, real[:, ::1] grid_gm,
                              real[:, ::1] gv, real[:, :, ::1] kgC, real[::1] mass,
                              real[:, ::1] mv, real[:, :, ::1] G,
                              real[:, ::1] gpw, real[:, :, ::1] gpwd, real[::1] gmw,
                              real[:, ::1] gw, Py_ssize_t p) noexcept nogil:
    cdef real wx[3]
    cdef real wy[3]
    cdef real dwx[3]
    cdef real dwy[3]
    cdef real ddx[3]
    cdef real ddy[3]
    cdef int i, j
    cdef long bx, by, ix, iy
    cdef real ww, s, di, dj, v0, v1, g0, g1, gm
    cdef real a0 = 0, a1 = 0, c00 = 0, c01 = 0, c10 = 0, c11 = 0, am = 0, gx = 0, gy = 0
    bx = _axis(x[p, 0] / dx, dx, wx, dwx, ddx)
    by = _axis(x[p, 1] / dx, dx, wy, dwy, ddy)
    for i in range(3):
        for j in range(3):
            ix = bx + i
            iy = by + j
            ww = wx[i] * wy[j]
            di = ddx[i]
            dj = ddy[j]
            v0 = grid_v[ix, iy, 0]
            v1 = grid_v[ix, iy, 1]
            g0 = grid_gp[ix, iy, 0]
            g1 = grid_gp[ix, iy, 1]
            gm = grid_gm[ix, iy]
            a0 += ww * g0
            a1 += ww * g1
            c00 += ww * g0 * di
            c01 += ww * g0 * dj
            c10 += ww * g1 * di
            c11 += ww * g1 * dj
            am += ww * gm
            s = (v0 * (gv[p, 0] + kgC[p, 0, 0] * di + kgC[p, 0, 1] * dj)
                 + v1 * (gv[p, 1] + kgC[p, 1, 0] * di + kgC[p, 1, 1] * dj)
                 + g0 * (mv[p, 0] + G[p, 0, 0] * di + G[p, 0, 1] * dj)
                 + g1 * (mv[p, 1] + G[p, 1, 0] * di + G[p, 1, 1] * dj)
                 + gm * mass[p])
            gx += s * dwx[i] * wy[j]
            gy += s * wx[i] * dwy[j]
    gpw[p, 0] = a0
    gpw[p, 1] = a1
    gpwd[p, 0, 0] = c00
    gpwd[p, 0, 1] = c01
    gpwd[p, 1, 0] = c10
    gpwd[p, 1, 1] = c11
    gmw[p] = am
    gw[p, 0] = gx / dx
    gw[p, 1] = gy / dx


def gather_adjoint(real[:, ::1] x, double dx, real[:, :, ::1] grid_v, real[:, :, ::1] grid_gp,
                   real[:, ::1] grid_gm, real[:, ::1] gv, real[:, :, ::1] kgC, real[::1] mass,
                   real[:, ::1] mv, real[:, :, ::1] G, int nthreads=1):
    cdef Py_ssize_t n = x.shape[0]
    dtype = np.float32 if real is float else np.float64
    gpw_np = np.zeros((n, 2), dtype=dtype)
    gpwd_np = np.zeros((n, 2, 2), dtype=dtype)
    gmw_np = np.zeros(n, dtype=dtype)
    gw_np = np.zeros((n, 2), dtype=dtype)
    cdef real[:, ::1] gpw = gpw_np
    cdef real[:, :, ::1] gpwd = gpwd_np
    cdef real[::1] gmw = gmw_np
    cdef real[:, ::1] gw = gw_np
    cdef int nt = max(1, nthreads)
    cdef Py_ssize_t p
    cdef real rdx = dx
    if nt == 1:
        for p in range(n):
            _gather_adjoint_one(x, rdx, grid_v, grid_gp, grid_gm, gv, kgC, mass, mv, G,
                                gpw, gpwd, gmw, gw, p)
    else:
        for p in prange(n, nogil=True, num_threads=nt, schedule="static"):
            _gather_adjoint_one(x, rdx, grid_v, grid_gp, grid_gm, gv, kgC, mass, mv, G,
                                gpw, gpwd, gmw, gw, p)
    return gpw_np, gpwd_np, gmw_np, gw_np
