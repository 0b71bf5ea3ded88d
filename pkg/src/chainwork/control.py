"""Observations, the affine+tanh controller, actuation stress and loss terms.

Observation layout (fixed): ``[target(2), CoM of each observed group (2 each),
mean velocity of each observed group (2 each), sin/cos of each clock frequency]``.
Groups appear in ascending id order unless ``observe_groups`` is given.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ControlError",
    "ControllerSpec",
    "LossSpec",
    "Controller",
    "Seeds",
    "act",
    "act_vjp",
    "group_com",
    "group_com_vjp",
    "observe",
    "eval_loss",
    "MAX_ACTUATORS",
]

MAX_ACTUATORS = 16
LOSS_KINDS = (
    "final_com_distance",
    "final_com_position",
    "running_goal_velocity",
    "actuation_cost",
    "final_velocity_sq",
    "weighted_sum",
)


class ControlError(ValueError):
    pass


def _tuple(v, typ=float):
    return None if v is None else tuple(typ(a) for a in v)


def _matrix(v):
    return None if v is None else tuple(tuple(float(a) for a in row) for row in v)


@dataclass(frozen=True)
class ControllerSpec:
    mode: str = "closed_loop"
    actuators: tuple[int, ...] = ()
    stress_scale: tuple[float, ...] = ()
    channels: str = "isotropic"
    observe_groups: tuple[int, ...] | None = None
    clock: tuple[float, ...] = ()
    target: tuple[float, float] | None = None
    W: tuple[tuple[float, ...], ...] | None = None
    b: tuple[float, ...] | None = None
    u: tuple[tuple[float, ...], ...] | None = None
    init_scale: float = 0.0
    seed: int = 0
    max_actuators: int = MAX_ACTUATORS

    FIELDS = (
        "mode", "actuators", "stress_scale", "channels", "observe_groups", "clock",
        "target", "W", "b", "u", "init_scale", "seed", "max_actuators",
    )

    def __post_init__(self):
        if self.mode not in ("closed_loop", "open_loop"):
            raise ControlError(f"controller.mode must be 'closed_loop' or 'open_loop', got {self.mode!r}")
        if self.channels not in ("isotropic", "per_axis"):
            raise ControlError(f"controller.channels must be 'isotropic' or 'per_axis', got {self.channels!r}")
        if not self.actuators:
            raise ControlError("controller.actuators must list at least one actuator id")
        if len(set(self.actuators)) != len(self.actuators):
            raise ControlError("controller.actuators contains duplicates")
        if len(self.actuators) > self.max_actuators:
            raise ControlError(f"controller has {len(self.actuators)} actuators, limit is {self.max_actuators}")
        if len(self.stress_scale) not in (1, len(self.actuators)):
            raise ControlError("controller.stress_scale needs one value or one per actuator")

    @property
    def n_act(self) -> int:
        return len(self.actuators)

    @property
    def n_out(self) -> int:
        return self.n_act * (2 if self.channels == "per_axis" else 1)

    @classmethod
    def from_dict(cls, d: dict, strict: bool = True) -> "ControllerSpec":
        extra = set(d) - set(cls.FIELDS)
        if strict and extra:
            raise ControlError(f"unknown controller field(s): {sorted(extra)}")
        scale = d.get("stress_scale")
        if scale is None:
            raise ControlError("controller.stress_scale is required")
        if np.isscalar(scale):
            scale = [scale]
        og = d.get("observe_groups")
        return cls(
            mode=d.get("mode", "closed_loop"),
            actuators=_tuple(d.get("actuators", ()), int),
            stress_scale=_tuple(scale),
            channels=d.get("channels", "isotropic"),
            observe_groups=None if og is None else _tuple(og, int),
            clock=_tuple(d.get("clock", ())),
            target=_tuple(d.get("target")),
            W=_matrix(d.get("W")),
            b=_tuple(d.get("b")),
            u=_matrix(d.get("u")),
            init_scale=float(d.get("init_scale", 0.0)),
            seed=int(d.get("seed", 0)),
            max_actuators=int(d.get("max_actuators", MAX_ACTUATORS)),
        )

    def to_dict(self) -> dict:
        out = {}
        for k in self.FIELDS:
            v = getattr(self, k)
            if isinstance(v, tuple):
                v = [list(r) if isinstance(r, tuple) else r for r in v]
            out[k] = v
        return out


@dataclass(frozen=True)
class LossSpec:
    kind: str
    groups: tuple[int, ...] | None = None
    target: tuple[float, float] | None = None
    direction: tuple[float, float] | None = None
    terms: tuple["LossSpec", ...] = ()
    weights: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ControlError(f"objective.kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if self.kind == "weighted_sum":
            if not self.terms or len(self.terms) != len(self.weights):
                raise ControlError("weighted_sum needs matching 'terms' and 'weights'")
            if not all(np.isfinite(self.weights)):
                raise ControlError("weighted_sum weights must be finite")
        if self.kind == "final_com_position" and self.direction is None:
            raise ControlError("final_com_position needs a 'direction'")

    @classmethod
    def from_dict(cls, d: dict, strict: bool = True) -> "LossSpec":
        allowed = {"kind", "groups", "target", "direction", "terms", "weights"}
        extra = set(d) - allowed
        if strict and extra:
            raise ControlError(f"unknown objective field(s): {sorted(extra)}")
        if "kind" not in d:
            raise ControlError("objective.kind is required")
        g = d.get("groups")
        return cls(
            kind=d["kind"],
            groups=None if g is None else _tuple(g, int),
            target=_tuple(d.get("target")),
            direction=_tuple(d.get("direction")),
            terms=tuple(cls.from_dict(t, strict) for t in d.get("terms", ())),
            weights=_tuple(d.get("weights", ())),
        )

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        for k in ("groups", "target", "direction"):
            if getattr(self, k) is not None:
                out[k] = list(getattr(self, k))
        if self.kind == "weighted_sum":
            out["terms"] = [t.to_dict() for t in self.terms]
            out["weights"] = list(self.weights)
        return out

    def walk(self):
        yield self
        for t in self.terms:
            yield from t.walk()


# -- group reductions --------------------------------------------------------

def group_com(x, mass, mask):
    m = mass[mask]
    return (m[:, None] * x[mask]).sum(axis=0) / m.sum()


def group_com_vjp(x, mass, mask, g):
    """Gradients of ``g . group_com(x, mass, mask)`` w.r.t. ``x`` and ``mass``."""
    M = mass[mask].sum()
    com = group_com(x, mass, mask)
    gx = np.zeros_like(x)
    gm = np.zeros_like(mass)
    gx[mask] = mass[mask, None] / M * g
    gm[mask] = ((x[mask] - com) @ g) / M
    return gx, gm


def observe(particles, groups, target, clock=(), time=0.0):
    """Observation vector in the documented layout."""
    parts = [np.asarray(target, dtype=float)]
    masks = [particles.group_mask([g]) for g in groups]
    for g, mk in zip(groups, masks):
        if not mk.any():
            raise ControlError(f"observed group {g} has no particles")
    parts += [group_com(particles.x, particles.mass, mk) for mk in masks]
    parts += [group_com(particles.v, particles.mass, mk) for mk in masks]
    for w in clock:
        parts.append(np.array([np.sin(w * time), np.cos(w * time)]))
    return np.concatenate(parts).astype(particles.dtype)


def act(W, b, z):
    W = np.asarray(W)
    z = np.asarray(z)
    if W.shape[1] != z.shape[0] or W.shape[0] != np.shape(b)[0]:
        raise ControlError(f"controller dimension mismatch: W {W.shape}, b {np.shape(b)}, z {z.shape}")
    return np.tanh(W @ z + b)


def act_vjp(W, z, a, g_a):
    """Returns ``(g_W, g_b, g_z)`` for ``a = tanh(W z + b)``."""
    g_pre = g_a * (1.0 - a * a)
    return np.outer(g_pre, z), g_pre, W.T @ g_pre


# -- runtime controller ------------------------------------------------------

class Controller:
    """A controller bound to a particle set.

    ``params`` holds ``{"W", "b"}`` (closed loop) or ``{"u"}`` (open loop,
    one pre-activation vector per step, ``a_t = tanh(u_t)``).
    """

    def __init__(self, spec: ControllerSpec, particles, target=None, steps=0, dt=1.0, params=None):
        self.spec = spec
        act_ids = np.asarray(spec.actuators)
        present = set(np.unique(particles.actuator).tolist())
        for k in spec.actuators:
            if k not in present:
                raise ControlError(f"actuator id {k} has no particles")
        scale = np.broadcast_to(np.asarray(spec.stress_scale, dtype=float), (spec.n_act,))
        self.scale = scale
        slot = np.full(particles.n, -1, dtype=np.int64)
        for j, k in enumerate(act_ids):
            slot[particles.actuator == k] = j
        self.slot = slot
        self.actuated = np.flatnonzero(slot >= 0)
        self.p_scale = scale[slot[self.actuated]].astype(particles.dtype)
        groups = spec.observe_groups
        if groups is None:
            groups = tuple(int(g) for g in np.unique(particles.group))
        self.groups = tuple(groups)
        self.target = np.asarray(spec.target if spec.target is not None else (target if target is not None else (0.0, 0.0)), dtype=float)
        self.dt = float(dt)
        self.steps = int(steps)
        self.n_obs = 2 + 4 * len(self.groups) + 2 * len(spec.clock)
        self.params = self.initial_params() if params is None else {k: np.array(v, dtype=float) for k, v in params.items()}

    @property
    def closed_loop(self) -> bool:
        return self.spec.mode == "closed_loop"

    @property
    def n_out(self) -> int:
        return self.spec.n_out

    def initial_params(self):
        spec = self.spec
        if self.closed_loop:
            if spec.W is not None:
                W = np.array(spec.W, dtype=float)
            else:
                rng = np.random.default_rng(spec.seed)
                W = rng.normal(scale=spec.init_scale, size=(spec.n_out, self.n_obs)) if spec.init_scale else np.zeros((spec.n_out, self.n_obs))
            b = np.array(spec.b, dtype=float) if spec.b is not None else np.zeros(spec.n_out)
            if W.shape != (spec.n_out, self.n_obs) or b.shape != (spec.n_out,):
                raise ControlError(f"controller W must be {(spec.n_out, self.n_obs)} and b {(spec.n_out,)}")
            return {"W": W, "b": b}
        u = np.array(spec.u, dtype=float) if spec.u is not None else np.zeros((self.steps, spec.n_out))
        if u.shape[1:] != (spec.n_out,) or u.shape[0] < self.steps:
            raise ControlError(f"open-loop schedule must have shape ({self.steps}, {spec.n_out})")
        return {"u": u}

    def with_params(self, params) -> "Controller":
        c = object.__new__(Controller)
        c.__dict__.update(self.__dict__)
        c.params = {k: np.array(v, dtype=float) for k, v in params.items()}
        return c

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # forward pieces
    def observe(self, particles, t):
        return observe(particles, self.groups, self.target, self.spec.clock, t * self.dt)

    def action(self, particles, t):
        """``(z, a)`` at step ``t``; ``z`` is None for open-loop control."""
        if self.closed_loop:
            z = self.observe(particles, t)
            return z, act(self.params["W"], self.params["b"], z.astype(float)).astype(particles.dtype)
        return None, np.tanh(self.params["u"][t]).astype(particles.dtype)

    def stress(self, a, particles):
        """Per-particle material-space actuation stress ``sigma_pa`` (shape ``(N, 2, 2)``)."""
        sigma = np.zeros((particles.n, 2, 2), dtype=particles.dtype)
        j = self.slot[self.actuated]
        if self.spec.channels == "isotropic":
            s = self.p_scale * a[j]
            sigma[self.actuated, 0, 0] = s
            sigma[self.actuated, 1, 1] = s
        else:
            sigma[self.actuated, 0, 0] = self.p_scale * a[2 * j]
            sigma[self.actuated, 1, 1] = self.p_scale * a[2 * j + 1]
        return sigma

    # adjoint pieces
    def stress_vjp(self, g_sigma):
        j = self.slot[self.actuated]
        gs = g_sigma[self.actuated]
        n_act = self.spec.n_act
        if self.spec.channels == "isotropic":
            vals = self.p_scale * (gs[:, 0, 0] + gs[:, 1, 1])
            return np.bincount(j, weights=vals, minlength=n_act)
        g = np.zeros(2 * n_act)
        g[0::2] = np.bincount(j, weights=self.p_scale * gs[:, 0, 0], minlength=n_act)
        g[1::2] = np.bincount(j, weights=self.p_scale * gs[:, 1, 1], minlength=n_act)
        return g

    def observe_vjp(self, particles, g_z):
        """Pull ``dL/dz`` back to ``(g_x, g_v, g_m)``."""
        gx = np.zeros_like(particles.x)
        gv = np.zeros_like(particles.v)
        gm = np.zeros_like(particles.mass)
        k = len(self.groups)
        for i, g in enumerate(self.groups):
            mk = particles.group_mask([g])
            ax, am = group_com_vjp(particles.x, particles.mass, mk, g_z[2 + 2 * i: 4 + 2 * i])
            bv, bm = group_com_vjp(particles.v, particles.mass, mk, g_z[2 + 2 * k + 2 * i: 4 + 2 * k + 2 * i])
            gx += ax
            gv += bv
            gm += am + bm
        return gx, gv, gm

    def adjoint(self, g_sigma, z, a, t, particles, grads, g_a_extra=None):
        """Accumulate parameter gradients into ``grads``; return state gradients or None."""
        g_a = self.stress_vjp(g_sigma)
        if g_a_extra is not None:
            g_a = g_a + g_a_extra
        a = np.asarray(a, dtype=float)
        if not self.closed_loop:
            grads["u"][t] += g_a * (1.0 - a * a)
            return None
        gW, gb, gz = act_vjp(self.params["W"], np.asarray(z, dtype=float), a, g_a)
        grads["W"] += gW
        grads["b"] += gb
        return self.observe_vjp(particles, gz.astype(particles.dtype))


# -- losses --------------------------------------------------------------------

@dataclass
class Seeds:
    """Loss gradients: ``state[t] = (g_x, g_v, g_m)`` for state ``t``, ``action[t] = dL/da_t``."""

    state: dict = field(default_factory=dict)
    action: dict = field(default_factory=dict)

    def add_state(self, t, gx, gv, gm):
        if t in self.state:
            ox, ov, om = self.state[t]
            self.state[t] = (ox + gx, ov + gv, om + gm)
        else:
            self.state[t] = (gx, gv, gm)

    def add_action(self, t, ga):
        self.action[t] = self.action.get(t, 0.0) + ga


def _mask(particles, groups):
    mk = particles.group_mask(groups)
    if not mk.any():
        raise ControlError(f"loss references group(s) {groups} with no particles")
    return mk


def _target(loss, default):
    t = loss.target if loss.target is not None else default
    if t is None:
        raise ControlError(f"loss {loss.kind!r} needs a target")
    return np.asarray(t, dtype=float)


def eval_loss(tape, loss: LossSpec, target=None, scale: float = 1.0, seeds: Seeds | None = None):
    """Scalar loss of a recorded rollout plus its seed gradients.

    ``tape`` must provide ``n_steps``, ``dt``, ``state(t)`` for ``t`` in
    ``0..n_steps`` and ``action(t)``.
    """
    seeds = Seeds() if seeds is None else seeds
    n = tape.n_steps
    dt = tape.dt
    kind = loss.kind
    if kind == "weighted_sum":
        total = 0.0
        for w, term in zip(loss.weights, loss.terms):
            total += w * eval_loss(tape, term, target, scale * w, seeds)[0]
        return total, seeds

    final = tape.state(n)
    zeros = lambda s: (np.zeros_like(s.x), np.zeros_like(s.v), np.zeros_like(s.mass))  # noqa: E731
    if kind == "final_com_distance":
        mk = _mask(final, loss.groups)
        d = group_com(final.x, final.mass, mk) - _target(loss, target)
        gx, gm = group_com_vjp(final.x, final.mass, mk, scale * d)
        seeds.add_state(n, gx, np.zeros_like(final.v), gm)
        return 0.5 * float(d @ d), seeds
    if kind == "final_com_position":
        mk = _mask(final, loss.groups)
        u = np.asarray(loss.direction, dtype=float)
        gx, gm = group_com_vjp(final.x, final.mass, mk, scale * u)
        seeds.add_state(n, gx, np.zeros_like(final.v), gm)
        return float(u @ group_com(final.x, final.mass, mk)), seeds
    if kind == "final_velocity_sq":
        mk = _mask(final, loss.groups)
        cnt = mk.sum()
        gv = np.zeros_like(final.v)
        gv[mk] = scale * 2.0 * final.v[mk] / cnt
        gx, _, gm = zeros(final)
        seeds.add_state(n, gx, gv, gm)
        return float((final.v[mk] ** 2).sum() / cnt), seeds
    if kind == "running_goal_velocity":
        goal = _target(loss, target)
        total = 0.0
        for t in range(1, n + 1):
            s = tape.state(t)
            mk = _mask(s, loss.groups)
            com = group_com(s.x, s.mass, mk)
            vel = group_com(s.v, s.mass, mk)
            r = goal - com
            dist = np.linalg.norm(r)
            if dist == 0:
                continue
            uhat = r / dist
            total -= dt * float(vel @ uhat)
            g_vel = -scale * dt * uhat
            g_com = scale * dt * (vel - uhat * (uhat @ vel)) / dist
            gx, gm1 = group_com_vjp(s.x, s.mass, mk, g_com)
            gv, gm2 = group_com_vjp(s.v, s.mass, mk, g_vel)
            seeds.add_state(t, gx, gv, gm1 + gm2)
        return total, seeds
    if kind == "actuation_cost":
        total = 0.0
        for t in range(n):
            a = tape.action(t)
            if a is None:
                continue
            a = np.asarray(a, dtype=float)
            total += dt * float(a @ a)
            seeds.add_action(t, scale * 2.0 * dt * a)
        return total, seeds
    raise ControlError(f"unsupported loss kind {kind!r}")  # pragma: no cover
