"""Reverse-mode pass over a recorded tape.

Per step, newest to oldest: particle outputs (x, F) -> G2P adjoint scatter to
grid velocities -> boundary projection adjoint -> normalisation adjoint ->
P2G adjoint gather to particles -> parameter gradients -> controller adjoint.
Only tape contents are read; the forward pass is never re-run.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backend
from .boundary import eps_for
from .control import LossSpec, Seeds, eval_loss
from .forward import Tape, affine_momentum, stress
from .kernel_math import lame_dE, pk1_stress_jacobian, pk1_stress_param_partials

__all__ = [
    "AdjointState",
    "StepAdjoint",
    "seed_loss",
    "bwd_particle_outputs",
    "bwd_g2p_scatter",
    "bwd_boundary",
    "bwd_grid",
    "bwd_p2g_gather",
    "bwd_param_grads",
    "backprop",
]


@dataclass
class AdjointState:
    """Loss gradients w.r.t. the particle state at one time plus accumulators."""

    gx: np.ndarray
    gv: np.ndarray
    gF: np.ndarray
    gC: np.ndarray
    g_mass: np.ndarray
    g_E: np.ndarray
    params: dict = field(default_factory=dict)
    g_sigma: np.ndarray | None = None
    loss: float | None = None
    t: int = 0

    @classmethod
    def zeros(cls, particles, params=None):
        return cls(
            gx=np.zeros_like(particles.x), gv=np.zeros_like(particles.v),
            gF=np.zeros_like(particles.F), gC=np.zeros_like(particles.C),
            g_mass=np.zeros_like(particles.mass), g_E=np.zeros_like(particles.E),
            params={} if params is None else params,
        )

    def add_state(self, gx, gv, gm):
        self.gx = self.gx + gx
        self.gv = self.gv + gv
        self.g_mass = self.g_mass + gm


@dataclass
class StepAdjoint:
    """Scratch values of one backward step, exposed for testing."""

    gv1: np.ndarray = None
    gC1: np.ndarray = None
    g_vi: np.ndarray = None
    g_vi_pre: np.ndarray = None
    g_pi: np.ndarray = None
    g_mi: np.ndarray = None
    gP: np.ndarray = None
    g_sigma: np.ndarray = None


def seed_loss(tape: Tape, loss: LossSpec, target=None):
    """Terminal adjoint state and the full seed set for ``loss``."""
    value, seeds = eval_loss(tape, loss, tape.target if target is None else target)
    final = tape.final
    adj = AdjointState.zeros(final, tape.controller.zero_grads() if tape.controller is not None else {})
    adj.loss = value
    adj.t = tape.n_steps
    if tape.n_steps in seeds.state:
        adj.add_state(*seeds.state[tape.n_steps])
    return adj, seeds


def bwd_particle_outputs(adj: AdjointState, rec, out, cfg, work: StepAdjoint):
    """Fold dL/dx^{n+1} into dL/dv^{n+1} and dL/dF^{n+1} into dL/dC^{n+1}.

    Returns the direct contributions to dL/dx^n and dL/dF^n.
    """
    dt = cfg.dt
    F = rec.particles.F
    work.gv1 = adj.gv + dt * adj.gx
    work.gC1 = adj.gC + dt * (adj.gF @ np.swapaxes(F, 1, 2))
    eye = np.eye(2, dtype=F.dtype)
    gF0 = np.swapaxes(eye + dt * out.C, 1, 2) @ adj.gF
    return adj.gx.copy(), gF0


def bwd_g2p_scatter(rec, cfg, work: StepAdjoint, threads=1, backend_name=None):
    """dL/dv_i = sum_p N [dL/dv_p^{n+1} + (4/dx^2) dL/dC_p^{n+1} (x_i - x_p)]."""
    x = rec.particles.x
    _, g = backend.scatter(x, cfg.dx, cfg.grid_res, work.gv1, cfg.inv_dx2 * work.gC1, None,
                           nthreads=threads, backend=backend_name)
    work.g_vi = g.reshape(-1, 2)[rec.nodes]
    return work.g_vi


def bwd_boundary(rec, boundary, work: StepAdjoint):
    """Map node gradients from post- to pre-projection velocities."""
    g = work.g_vi
    if boundary:
        n_nodes = boundary.res[0] * boundary.res[1]
        active = np.zeros(n_nodes, dtype=bool)
        active[rec.nodes] = True
        v_pre = np.zeros((n_nodes, 2), dtype=rec.v_pre.dtype)
        v_pre[rec.nodes] = rec.v_pre
        gf = np.zeros((n_nodes, 2), dtype=g.dtype)
        gf[rec.nodes] = g
        g = boundary.vjp(v_pre, active, gf, eps_for(g.dtype))[rec.nodes]
    work.g_vi_pre = g
    return g


def bwd_grid(rec, work: StepAdjoint):
    """dL/dp_i = dL/dv_i / m_i and dL/dm_i = -(p_i/m_i) . dL/dv_i / m_i (gravity passes through)."""
    g = work.g_vi_pre
    inv_m = 1.0 / rec.m
    work.g_pi = g * inv_m[:, None]
    work.g_mi = -(rec.p * work.g_pi).sum(axis=1) * inv_m
    return work.g_pi, work.g_mi


def bwd_p2g_gather(adj: AdjointState, rec, out, cfg, work: StepAdjoint, gx0, gF0, threads=1, backend_name=None):
    """Gather grid adjoints back to the step-start particle state.

    Returns ``(gx, gv, gF, gC, g_mass, gP)`` w.r.t. the particle state at step start.
    """
    ps = rec.particles
    res = cfg.grid_res
    k = cfg.inv_dx2
    P = stress(ps, rec.sigma)
    G = affine_momentum(ps, P, cfg)
    grid_v = rec.full(rec.v, res)
    grid_gp = rec.full(work.g_pi.astype(ps.dtype), res)
    grid_gm = rec.full(work.g_mi.astype(ps.dtype), res)
    mv = ps.mass[:, None] * ps.v
    gp_w, gp_wd, gm_w, gradw = backend.gather_adjoint(
        ps.x, cfg.dx, grid_v, grid_gp, grid_gm, work.gv1, k * work.gC1, ps.mass, mv, G,
        nthreads=threads, backend=backend_name,
    )
    gv = ps.mass[:, None] * gp_w
    gG = gp_wd
    gC = ps.mass[:, None, None] * gG
    c = (-k * cfg.dt) * ps.vol
    FT = np.swapaxes(ps.F, 1, 2)
    gP = c[:, None, None] * (gG @ ps.F)
    T = pk1_stress_jacobian(ps.F, ps.mu, ps.lam, check=False)
    gF_el = np.einsum("ni,nij->nj", gP.reshape(-1, 4), T).reshape(-1, 2, 2)
    gF = gF0 + c[:, None, None] * (np.swapaxes(gG, 1, 2) @ P) + gF_el
    if rec.sigma is not None:
        gF = gF + gP @ np.swapaxes(rec.sigma, 1, 2)
        work.g_sigma = FT @ gP
    else:
        work.g_sigma = None
    gx = gx0 + gradw - np.einsum("nji,nj->ni", G, gp_w) - np.einsum("nji,nj->ni", k * work.gC1, out.v)
    g_mass = gm_w + (gp_w * ps.v).sum(axis=1) + (gG * ps.C).sum(axis=(1, 2))
    work.gP = gP
    return gx, gv, gF, gC, g_mass, gP


def bwd_param_grads(rec, gP):
    """dL/dE_p through the Lame parameters of the elastic stress."""
    ps = rec.particles
    dP_dmu, dP_dlam = pk1_stress_param_partials(ps.F)
    dmu, dlam = lame_dE(ps.nu)
    return (gP * (dP_dmu * dmu[:, None, None] + dP_dlam * dlam[:, None, None])).sum(axis=(1, 2))


def backprop(tape: Tape, loss: LossSpec | None = None, seeds: Seeds | None = None, target=None,
             threads: int = 1, backend_name: str | None = None) -> AdjointState:
    """Gradients of ``loss`` (or of explicit ``seeds``) w.r.t. the initial state and parameters."""
    cfg = tape.config
    if loss is not None:
        adj, seeds = seed_loss(tape, loss, target)
    else:
        seeds = Seeds() if seeds is None else seeds
        adj = AdjointState.zeros(tape.final, tape.controller.zero_grads() if tape.controller is not None else {})
        if tape.n_steps in seeds.state:
            adj.add_state(*[np.asarray(s, dtype=tape.final.dtype) for s in seeds.state[tape.n_steps]])
    dtype = tape.final.dtype
    for n in range(tape.n_steps - 1, -1, -1):
        rec = tape.records[n]
        if rec.t != n:
            raise ValueError(f"tape record {n} is labelled step {rec.t}")
        out = tape.state(n + 1)
        work = StepAdjoint()
        gx0, gF0 = bwd_particle_outputs(adj, rec, out, cfg, work)
        bwd_g2p_scatter(rec, cfg, work, threads, backend_name)
        bwd_boundary(rec, tape.boundary, work)
        bwd_grid(rec, work)
        gx, gv, gF, gC, g_mass, gP = bwd_p2g_gather(adj, rec, out, cfg, work, gx0, gF0, threads, backend_name)
        adj.g_E = adj.g_E + bwd_param_grads(rec, gP)
        adj.g_mass = adj.g_mass + g_mass
        adj.gx, adj.gv, adj.gF, adj.gC = gx, gv, gF, gC
        adj.g_sigma = work.g_sigma
        if tape.controller is not None and rec.a is not None:
            g_sigma = work.g_sigma if work.g_sigma is not None else np.zeros((rec.particles.n, 2, 2), dtype=dtype)
            extra = seeds.action.get(n)
            st = tape.controller.adjoint(g_sigma, rec.z, rec.a, n, rec.particles, adj.params, extra)
            if st is not None:
                adj.add_state(*st)
        if n in seeds.state:
            adj.add_state(*seeds.state[n])
        adj.t = n
    return adj
