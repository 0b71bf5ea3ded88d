"""One MLS-MPM step (P2G, grid update, G2P) and full rollouts recorded on a tape."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backend
from .boundary import BoundaryField, eps_for, resolve
from .control import Controller
from .kernel_math import InvertedElementError, pk1_stress
from .scene import SceneSpec, SimConfig, sample_particles
from .state import GridState, ParticleState

__all__ = [
    "SimulationError",
    "StepRecord",
    "Tape",
    "World",
    "build_world",
    "p2g",
    "grid_ops",
    "g2p",
    "step",
    "run",
    "simulate",
    "EMPTY_NODE_FRACTION",
]

# nodes lighter than this fraction of the mean particle mass count as empty
EMPTY_NODE_FRACTION = 1e-10


class SimulationError(RuntimeError):
    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message if step is None else f"step {step}: {message}")


@dataclass
class StepRecord:
    """Everything the adjoint pass needs from one forward step.

    Grid quantities are stored only on the active nodes ``nodes`` (flat indices).
    """

    t: int
    particles: ParticleState
    sigma: np.ndarray | None
    nodes: np.ndarray
    m: np.ndarray
    p: np.ndarray
    v_pre: np.ndarray
    v: np.ndarray
    z: np.ndarray | None = None
    a: np.ndarray | None = None

    def full(self, values, res):
        """Scatter node values back onto a dense ``res`` grid (zeros elsewhere)."""
        out = np.zeros((res[0] * res[1],) + values.shape[1:], dtype=values.dtype)
        out[self.nodes] = values
        return out.reshape(tuple(res) + values.shape[1:])


@dataclass
class Tape:
    config: SimConfig
    records: list
    final: ParticleState
    boundary: BoundaryField | None = None
    controller: Controller | None = None
    target: tuple | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return len(self.records)

    def __len__(self):
        return len(self.records)

    @property
    def dt(self) -> float:
        return self.config.dt

    @property
    def initial(self) -> ParticleState:
        return self.records[0].particles if self.records else self.final

    def state(self, t: int) -> ParticleState:
        return self.final if t == len(self.records) else self.records[t].particles

    def action(self, t: int):
        return self.records[t].a

    def validate(self, world: "World" = None) -> None:
        """Check that records are contiguous (debug aid; re-runs each step)."""
        for t, rec in enumerate(self.records):
            if rec.t != t:
                raise SimulationError(f"record index {rec.t} out of order", t)
            if world is not None:
                nxt, _ = step(rec.particles, world, t, controller=self.controller)
                ref = self.state(t + 1)
                if not (np.array_equal(nxt.x, ref.x) and np.array_equal(nxt.F, ref.F)):
                    raise SimulationError("tape record does not match re-simulated state", t)


@dataclass
class World:
    """Fixed simulation context: configuration, resolved boundaries, threads, backend."""

    config: SimConfig
    boundary: BoundaryField | None = None
    threads: int = 1
    backend: str | None = None

    @property
    def res(self):
        return self.config.grid_res


def build_world(spec: SceneSpec, threads: int | None = None, backend_name: str | None = None):
    """Resolve a scene into ``(world, particles, controller)``."""
    cfg = spec.config
    particles = sample_particles(spec)
    boundary = resolve(spec.boundaries, cfg.grid_res, cfg.dx, cfg.dtype) if spec.boundaries else None
    controller = None
    if spec.controller is not None:
        controller = Controller(spec.controller, particles, spec.target, cfg.steps, cfg.dt)
    threads = backend.default_threads() if threads is None else threads
    return World(cfg, boundary, threads, backend_name), particles, controller


def _dtype_arr(v, dtype):
    return np.asarray(v, dtype=dtype)


def check_range(x, cfg: SimConfig, t=None):
    u = x / cfg.dx
    base = np.floor(u - 0.5)
    res = np.asarray(cfg.grid_res)
    bad = ~np.all((base >= 0) & (base <= res - 3), axis=1)
    if bad.any():
        ids = np.flatnonzero(bad)
        raise SimulationError(f"particle(s) {ids[:8].tolist()} left the grid stencil range", t)


def stress(particles: ParticleState, sigma=None):
    P = pk1_stress(particles.F, particles.mu, particles.lam)
    if sigma is not None:
        P = P + particles.F @ sigma
    return P


def affine_momentum(particles: ParticleState, P, cfg: SimConfig):
    """``G_p = -(4/dx^2) dt V_p P_p F_p^T + m_p C_p``."""
    c = (-cfg.inv_dx2 * cfg.dt) * particles.vol
    return c[:, None, None] * (P @ np.swapaxes(particles.F, 1, 2)) + particles.mass[:, None, None] * particles.C


def p2g(particles: ParticleState, sigma, cfg: SimConfig, boundary=None, threads=1, backend_name=None, t=None) -> GridState:
    """Scatter mass and APIC/MLS momentum to the grid."""
    check_range(particles.x, cfg, t)
    try:
        P = stress(particles, sigma)
    except InvertedElementError as e:
        raise SimulationError(str(e), t) from e
    G = affine_momentum(particles, P, cfg)
    m, p = backend.scatter(
        particles.x, cfg.dx, cfg.grid_res, particles.mass[:, None] * particles.v, G, particles.mass,
        nthreads=threads, backend=backend_name,
    )
    return GridState(m=m, p=p, boundary=boundary)


def grid_ops(grid: GridState, cfg: SimConfig, mean_mass: float | None = None) -> GridState:
    """Normalise momentum, add gravity, apply boundary projections."""
    m = grid.m
    dtype = m.dtype
    if mean_mass is None:
        mean_mass = float(m.sum()) / max(1, int((m > 0).sum()))
    active = (m > EMPTY_NODE_FRACTION * mean_mass).ravel()
    n_nodes = m.size
    v = np.zeros((n_nodes, 2), dtype=dtype)
    mf = m.ravel()
    pf = grid.p.reshape(n_nodes, 2)
    v[active] = pf[active] / mf[active, None] + _dtype_arr(cfg.gravity, dtype) * dtype.type(cfg.dt)
    v_pre = v.copy()
    if grid.boundary:
        grid.boundary.apply(v, active, eps_for(dtype))
    res = grid.m.shape
    return GridState(m=grid.m, p=grid.p, v=v.reshape(res + (2,)), v_pre=v_pre.reshape(res + (2,)),
                     active=active.reshape(res), boundary=grid.boundary)


def g2p(grid: GridState, particles: ParticleState, cfg: SimConfig, threads=1, backend_name=None, t=None) -> ParticleState:
    """Gather velocity and affine field, update F and positions."""
    v, B = backend.gather(particles.x, cfg.dx, grid.v, nthreads=threads, backend=backend_name)
    dtype = particles.dtype
    C = B * dtype.type(cfg.inv_dx2)
    dt = dtype.type(cfg.dt)
    F = particles.F + dt * (C @ particles.F)
    J = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    if not np.all(J > 0):
        raise SimulationError(str(InvertedElementError(np.flatnonzero(~(J > 0)))), t)
    x = particles.x + dt * v
    return particles.evolve(x, v, C, F)


def step(particles: ParticleState, world: World, t: int = 0, controller: Controller | None = None):
    """Advance one step; returns ``(particles', StepRecord)``."""
    cfg = world.config
    z = a = sigma = None
    if controller is not None:
        z, a = controller.action(particles, t)
        sigma = controller.stress(a, particles)
    grid = p2g(particles, sigma, cfg, world.boundary, world.threads, world.backend, t)
    grid = grid_ops(grid, cfg, float(particles.mass.mean()))
    new = g2p(grid, particles, cfg, world.threads, world.backend, t)
    nodes = np.flatnonzero(grid.active)
    n_nodes = grid.m.size
    rec = StepRecord(
        t=t, particles=particles, sigma=sigma, nodes=nodes,
        m=grid.m.ravel()[nodes], p=grid.p.reshape(n_nodes, 2)[nodes],
        v_pre=grid.v_pre.reshape(n_nodes, 2)[nodes], v=grid.v.reshape(n_nodes, 2)[nodes],
        z=z, a=a,
    )
    return new, rec


def run(world: World, particles: ParticleState, controller: Controller | None = None,
        steps: int | None = None, target=None, callback=None) -> Tape:
    """Roll out ``steps`` steps from ``particles`` and record a tape."""
    steps = world.config.steps if steps is None else steps
    particles = particles.astype(world.config.dtype)
    records = []
    state = particles
    for t in range(steps):
        state, rec = step(state, world, t, controller)
        records.append(rec)
        if callback is not None:
            callback(t, state, rec)
    return Tape(world.config, records, state, world.boundary, controller, target)


def simulate(scene: SceneSpec, threads: int | None = None, backend_name: str | None = None, steps=None) -> Tape:
    """Sample the scene and run it for ``config.steps`` steps."""
    world, particles, controller = build_world(scene, threads, backend_name)
    return run(world, particles, controller, steps, scene.target)
