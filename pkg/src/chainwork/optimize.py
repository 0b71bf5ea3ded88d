"""Gradient-based outer loops and the finite-difference gradient oracle.

A :class:`Problem` binds a scene to one parameter set and exposes
``evaluate(params) -> (loss, grads, tape)``.  Parameter sets:

``controller``            closed-loop ``W`` and ``b``
``open_loop_actuation``   per-step pre-activations ``u`` (``a_t = tanh(u_t)``)
``density_scales``        one multiplicative mass scale per group
``stiffness_field``       per-particle Young's modulus as a multiple of its initial value
``initial_velocity``      per-particle initial velocity (gradient checks)
``mass``                  per-particle mass (gradient checks)
``youngs_modulus``        per-particle Young's modulus (gradient checks)
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .adjoint import backprop
from .control import ControlError, LossSpec
from .forward import SimulationError, build_world, run
from .scene import SceneSpec

__all__ = [
    "OptConfig",
    "OptResult",
    "OptimizationError",
    "Problem",
    "GD",
    "Momentum",
    "Adam",
    "make_optimizer",
    "gradcheck",
    "directional_check",
    "relative_errors",
    "optimize",
    "identify_density",
    "codesign_arm",
    "constraint_violation",
    "PARAMETER_SETS",
    "DEFAULT_LR",
    "STIFFNESS_BOUNDS",
]

PARAMETER_SETS = (
    "controller", "open_loop_actuation", "density_scales", "stiffness_field",
    "initial_velocity", "mass", "youngs_modulus",
)
DEFAULT_LR = {
    "controller": 1e-2,
    "open_loop_actuation": 1e-2,
    "density_scales": 1e-1,
    "stiffness_field": 1e-1,
}
STIFFNESS_BOUNDS = (0.3, 4.0)
DENSITY_BOUNDS = (1e-2, 1e2)


class OptimizationError(RuntimeError):
    pass


# -- optimizers ----------------------------------------------------------------

class GD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        return {k: params[k] - lr * grads[k] for k in params}

    def state(self):
        return {}

    def restore(self, state):
        pass


class Momentum(GD):
    def __init__(self, lr, beta=0.9):
        super().__init__(lr)
        self.beta = beta
        self.buf = None

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        if self.buf is None:
            self.buf = {k: np.zeros_like(v) for k, v in params.items()}
        self.buf = {k: self.beta * self.buf[k] + grads[k] for k in params}
        return {k: params[k] - lr * self.buf[k] for k in params}

    def state(self):
        return {"buf": self.buf}

    def restore(self, state):
        self.buf = state["buf"]


class Adam(GD):
    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8):
        super().__init__(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = self.v = None
        self.t = 0

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        if self.m is None:
            self.m = {k: np.zeros_like(v) for k, v in params.items()}
            self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t += 1
        out = {}
        for k in params:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mh = self.m[k] / (1 - self.b1 ** self.t)
            vh = self.v[k] / (1 - self.b2 ** self.t)
            out[k] = params[k] - lr * mh / (np.sqrt(vh) + self.eps)
        return out

    def state(self):
        return {"m": self.m, "v": self.v, "t": self.t}

    def restore(self, state):
        self.m, self.v, self.t = state["m"], state["v"], state["t"]


def make_optimizer(name, lr, betas=(0.9, 0.999), momentum=0.9):
    if name == "gd":
        return GD(lr)
    if name == "gd_momentum":
        return Momentum(lr, momentum)
    if name == "adam":
        return Adam(lr, betas)
    raise ValueError(f"unknown optimizer {name!r}; expected gd, gd_momentum or adam")


# -- problems ------------------------------------------------------------------

class Problem:
    """A scene, a loss and a parameter set, evaluated by forward + adjoint runs."""

    def __init__(self, scene: SceneSpec, parameters: str, loss: LossSpec | None = None,
                 groups=None, threads=None, backend_name=None):
        if parameters not in PARAMETER_SETS:
            raise ValueError(f"unknown parameter set {parameters!r}")
        loss = scene.objective if loss is None else loss
        if loss is None:
            raise ValueError("no loss given and the scene has no objective")
        self.scene = scene
        self.parameters = parameters
        self.loss = loss
        self.world, self.p0, self.controller = build_world(scene, threads, backend_name)
        self.target = scene.target
        if parameters in ("controller", "open_loop_actuation"):
            if self.controller is None:
                raise ControlError(f"parameter set {parameters!r} needs a controller")
            want = "closed_loop" if parameters == "controller" else "open_loop"
            if self.controller.spec.mode != want:
                raise ControlError(f"parameter set {parameters!r} needs a {want} controller")
        if groups is None:
            groups = tuple(int(g) for g in np.unique(self.p0.group))
        self.groups = tuple(groups)
        self._masks = [self.p0.group == g for g in self.groups]

    def initial(self) -> dict:
        p0 = self.p0
        k = self.parameters
        if k in ("controller", "open_loop_actuation"):
            return {n: v.copy() for n, v in self.controller.params.items()}
        if k == "density_scales":
            return {"scale": np.ones(len(self.groups))}
        if k == "stiffness_field":
            return {"E_scale": np.ones(p0.n)}
        if k == "initial_velocity":
            return {"v": np.array(p0.v, dtype=float)}
        if k == "mass":
            return {"mass": np.array(p0.mass, dtype=float)}
        return {"E": np.array(p0.E, dtype=float)}

    def bind(self, params):
        """``(particles, controller)`` for a parameter dict."""
        p0, ctrl = self.p0, self.controller
        k = self.parameters
        if k in ("controller", "open_loop_actuation"):
            return p0, ctrl.with_params(params)
        if k == "density_scales":
            mass = np.array(p0.mass, dtype=float)
            for s, mk in zip(params["scale"], self._masks):
                mass[mk] *= s
            return p0.with_material(mass=mass), ctrl
        if k == "stiffness_field":
            return p0.with_material(E=np.asarray(p0.E, dtype=float) * params["E_scale"]), ctrl
        if k == "initial_velocity":
            return replace(p0, v=np.asarray(params["v"], dtype=p0.dtype)), ctrl
        if k == "mass":
            return p0.with_material(mass=params["mass"]), ctrl
        return p0.with_material(E=params["E"]), ctrl

    def simulate(self, params):
        particles, ctrl = self.bind(params)
        return run(self.world, particles, ctrl, target=self.target)

    def loss_value(self, params) -> float:
        from .control import eval_loss

        return float(eval_loss(self.simulate(params), self.loss, self.target)[0])

    def evaluate(self, params):
        """``(loss, grads, tape)``; grads has the same keys and shapes as ``params``."""
        tape = self.simulate(params)
        adj = backprop(tape, self.loss, target=self.target, threads=self.world.threads,
                       backend_name=self.world.backend)
        k = self.parameters
        p0 = self.p0
        if k in ("controller", "open_loop_actuation"):
            grads = {n: np.array(adj.params[n], dtype=float) for n in params}
        elif k == "density_scales":
            gm = np.asarray(adj.g_mass, dtype=float) * np.asarray(p0.mass, dtype=float)
            grads = {"scale": np.array([gm[mk].sum() for mk in self._masks])}
        elif k == "stiffness_field":
            grads = {"E_scale": np.asarray(adj.g_E, dtype=float) * np.asarray(p0.E, dtype=float)}
        elif k == "initial_velocity":
            grads = {"v": np.asarray(adj.gv, dtype=float)}
        elif k == "mass":
            grads = {"mass": np.asarray(adj.g_mass, dtype=float)}
        else:
            grads = {"E": np.asarray(adj.g_E, dtype=float)}
        return float(adj.loss), grads, tape


def _flat(params):
    keys = sorted(params)
    return keys, np.concatenate([np.asarray(params[k], dtype=float).ravel() for k in keys])


def _unflat(keys, vec, like):
    out, i = {}, 0
    for k in keys:
        n = like[k].size
        out[k] = vec[i:i + n].reshape(like[k].shape)
        i += n
    return out


# -- gradient checking ---------------------------------------------------------

def relative_errors(adjoint, fd, floor=1e-3):
    """Per-coordinate ``|a - f| / max(|a|, |f|, floor * max|f|)``.

    The floor keeps coordinates whose true gradient is many orders below the
    largest one from reporting pure finite-difference noise.
    """
    a = np.asarray(adjoint, dtype=float)
    f = np.asarray(fd, dtype=float)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor * max(np.abs(f).max(initial=0.0), 1e-300))
    return np.abs(a - f) / scale


def gradcheck(scene: SceneSpec, loss: LossSpec | None = None, parameters: str = "initial_velocity",
              h: float = 1e-6, seed: int = 0, max_coords: int = 64, params=None, floor: float = 1e-3,
              threads=None, backend_name=None) -> dict:
    """Compare adjoint gradients with central differences on sampled coordinates.

    ``h`` is relative: coordinate ``i`` is perturbed by ``h * max(|theta_i|, rms(theta))``
    (``h`` itself when theta is all zeros), so tiny parameters such as particle
    masses get proportionally tiny steps.
    Returns a JSON-serialisable report.
    """
    if scene.config.precision != "f64":
        raise ValueError("gradcheck needs an f64 scene (config.precision = 'f64')")
    prob = Problem(scene, parameters, loss, threads=threads, backend_name=backend_name)
    theta = prob.initial() if params is None else params
    value, grads, _ = prob.evaluate(theta)
    keys, x0 = _flat(theta)
    _, g = _flat(grads)
    rng = np.random.default_rng(seed)
    n = x0.size
    idx = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, size=max_coords, replace=False))
    fd = np.empty(idx.size)
    steps = np.empty(idx.size)
    rms = float(np.sqrt(np.mean(x0 * x0))) if n else 0.0
    t0 = time.perf_counter()
    for j, i in enumerate(idx):
        hi = h * (max(abs(x0[i]), rms) or 1.0)
        xp = x0.copy()
        xp[i] += hi
        lp = prob.loss_value(_unflat(keys, xp, theta))
        xp[i] = x0[i] - hi
        lm = prob.loss_value(_unflat(keys, xp, theta))
        fd[j] = (lp - lm) / (2 * hi)
        steps[j] = hi
    err = relative_errors(g[idx], fd, floor)
    return {
        "parameters": parameters,
        "loss": value,
        "steps": scene.config.steps,
        "precision": scene.config.precision,
        "h": h,
        "floor": floor,
        "n_params": int(n),
        "n_checked": int(idx.size),
        "max_rel_err": float(err.max(initial=0.0)),
        "mean_rel_err": float(err.mean()) if err.size else 0.0,
        "fd_seconds": time.perf_counter() - t0,
        "coords": [
            {"index": int(i), "adjoint": float(g[i]), "fd": float(f), "h": float(s), "rel_err": float(e)}
            for i, f, s, e in zip(idx, fd, steps, err)
        ],
    }


def directional_check(problem: Problem, direction=None, h: float = 1e-6, seed: int = 0, params=None) -> dict:
    """Dot-product test: ``grad . d`` against ``(L(theta + h d) - L(theta - h d)) / 2h``."""
    theta = problem.initial() if params is None else params
    value, grads, _ = problem.evaluate(theta)
    keys, x0 = _flat(theta)
    _, g = _flat(grads)
    if direction is None:
        d = np.random.default_rng(seed).normal(size=x0.size)
    else:
        d = _flat(direction)[1]
    d = d / np.linalg.norm(d)
    lp = problem.loss_value(_unflat(keys, x0 + h * d, theta))
    lm = problem.loss_value(_unflat(keys, x0 - h * d, theta))
    fd = (lp - lm) / (2 * h)
    ad = float(g @ d)
    return {"loss": value, "adjoint": ad, "fd": fd, "rel_err": abs(ad - fd) / max(abs(ad), abs(fd), 1e-300)}


# -- optimisation loop ---------------------------------------------------------

@dataclass
class OptConfig:
    algorithm: str = "adam"
    learning_rate: float | None = None
    iterations: int = 100
    parameters: str = "controller"
    bounds: tuple[float, float] | None = None
    penalty_weights: tuple[float, float, float] = (1.0, 0.1, 0.01)
    groups: tuple[int, ...] | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    momentum: float = 0.9
    tol: float = 1e-6
    patience: int = 10
    divergence_window: int | None = None
    lr_decay: float | None = None  # on a loss rise: back to the best point, fresh optimizer, step *= lr_decay
    threads: int | None = None
    backend: str | None = None

    def __post_init__(self):
        if self.parameters not in PARAMETER_SETS:
            raise ValueError(f"unknown parameter set {self.parameters!r}")
        if self.algorithm not in ("gd", "gd_momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.algorithm!r}")
        if self.learning_rate is not None and not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.bounds is not None:
            lo, hi = self.bounds
            if not lo <= hi:
                raise ValueError("bounds need lo <= hi")
            if self.parameters == "stiffness_field" and (lo < STIFFNESS_BOUNDS[0] or hi > STIFFNESS_BOUNDS[1]):
                raise ValueError(f"stiffness bounds must lie within {STIFFNESS_BOUNDS} x initial E")

    @property
    def lr(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return DEFAULT_LR.get(self.parameters, 1e-2)

    def resolved_bounds(self):
        if self.bounds is not None:
            return tuple(self.bounds)
        if self.parameters == "stiffness_field":
            return STIFFNESS_BOUNDS
        if self.parameters == "density_scales":
            return DENSITY_BOUNDS
        return None

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["learning_rate"] = self.lr
        d["bounds"] = self.resolved_bounds()
        return d


@dataclass
class OptResult:
    history: list
    best_params: dict
    best_loss: float
    params: dict
    status: str = "ok"
    message: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def losses(self):
        return [h["loss"] for h in self.history if h["status"] == "ok"]

    @property
    def initial_loss(self):
        return self.losses[0] if self.losses else math.nan


def _project(params, bounds, keys=None):
    if bounds is None:
        return params
    lo, hi = bounds
    return {k: (np.clip(v, lo, hi) if keys is None or k in keys else v) for k, v in params.items()}


def _norm(grads):
    return float(math.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def _snapshot(solver):
    return {n: ({a: b.copy() for a, b in v.items()} if isinstance(v, dict) else v) for n, v in solver.state().items()}


def optimize(scene: SceneSpec, opt: OptConfig, loss: LossSpec | None = None, problem: Problem | None = None,
             params=None, callback=None, bounded_keys=None) -> OptResult:
    """Simulate, backpropagate and update parameters for ``opt.iterations`` steps.

    Iteration ``k`` evaluates the current parameters, records the loss and then
    updates them, so the history has ``iterations + 1`` evaluations when no
    early stop occurs.  A failed simulation reverts to the last good point and
    retries the update once with half the step; a second failure aborts.
    """
    prob = problem or Problem(scene, opt.parameters, loss, opt.groups, opt.threads, opt.backend)
    bounds = opt.resolved_bounds()
    theta = _project(prob.initial() if params is None else params, bounds, bounded_keys)
    solver = make_optimizer(opt.algorithm, opt.lr, opt.betas, opt.momentum)
    history = []
    best_loss, best, best_grads = math.inf, theta, None
    good = None  # (params, grads, solver state) of the last successful evaluation
    retried = False
    status, message = "ok", ""
    rises = 0
    for k in range(opt.iterations + 1):
        t0 = time.perf_counter()
        try:
            value, grads, _ = prob.evaluate(theta)
            if not math.isfinite(value):
                raise SimulationError("loss is not finite")
        except (SimulationError, FloatingPointError) as e:
            history.append({"iteration": k, "loss": math.nan, "grad_norm": math.nan,
                            "wall_time": time.perf_counter() - t0, "status": "failed", "error": str(e)})
            if good is None or retried:
                status, message = "aborted", str(e)
                break
            retried = True
            p_prev, g_prev, st = good
            solver.restore(st)
            theta = _project(solver.step(p_prev, g_prev, lr=0.5 * solver.lr), bounds, bounded_keys)
            continue
        retried = False
        history.append({"iteration": k, "loss": value, "grad_norm": _norm(grads),
                        "wall_time": time.perf_counter() - t0, "status": "ok"})
        if callback is not None:
            callback(k, value, theta, grads)
        rose = value >= best_loss
        if value < best_loss:
            best_loss, best, best_grads = value, theta, grads
        ok = [h["loss"] for h in history if h["status"] == "ok"]
        if len(ok) >= 2 and ok[-1] > ok[-2]:
            rises += 1
        else:
            rises = 0
        if opt.divergence_window and rises >= opt.divergence_window:
            status = "diverged"
            message = f"loss increased {rises} iterations in a row (last {ok[-1]:.6g}, best {best_loss:.6g})"
            break
        if len(ok) > opt.patience:
            ref = ok[-1 - opt.patience]
            if abs(ok[-1] - ref) <= opt.tol * max(abs(ref), 1e-300):
                status, message = "converged", f"relative loss change below {opt.tol:g} over {opt.patience} iterations"
                break
        if k == opt.iterations:
            break
        if opt.lr_decay is not None and rose:
            solver = make_optimizer(opt.algorithm, solver.lr * opt.lr_decay, opt.betas, opt.momentum)
            good = (best, best_grads, _snapshot(solver))
            theta = _project(solver.step(best, best_grads), bounds, bounded_keys)
            continue
        good = (theta, grads, _snapshot(solver))
        theta = _project(solver.step(theta, grads), bounds, bounded_keys)
    return OptResult(history, best, best_loss, theta, status, message)


# -- system identification -------------------------------------------------------

def _final_coms(tape, groups):
    from .control import group_com

    s = tape.final
    return [group_com(s.x, s.mass, s.group == g) for g in groups]


def identify_density(scene: SceneSpec, true_scales=None, observed=None, groups=None, init=None,
                     opt: OptConfig | None = None, observe_groups=None) -> OptResult:
    """Recover density scales of ``groups`` from final centres of mass.

    Either ``observed`` (one final CoM per observed group) or ``true_scales``
    (used to synthesise the observation with a forward run) must be given.
    The loss is ``sum_g 0.5 |CoM_g - observed_g|^2`` over ``observe_groups``
    (all groups by default).
    """
    opt = opt or OptConfig(parameters="density_scales", iterations=300, lr_decay=0.5)
    opt = replace(opt, parameters="density_scales",
                  divergence_window=opt.divergence_window if opt.divergence_window is not None else 10)
    probe = Problem(scene, "density_scales", LossSpec("final_com_position", direction=(0.0, 0.0)),
                    groups, opt.threads, opt.backend)
    groups = probe.groups
    for name, v in (("true_scales", true_scales), ("init", init)):
        if v is not None and np.size(v) != len(groups):
            raise ValueError(f"{name} needs one value per identified group {list(groups)}, got {np.size(v)}")
    if observe_groups is None:
        observe_groups = tuple(int(g) for g in np.unique(probe.p0.group))
    if observed is None:
        if true_scales is None:
            raise ValueError("identify_density needs observed CoMs or true_scales")
        tape = probe.simulate({"scale": np.asarray(true_scales, dtype=float)})
        observed = _final_coms(tape, observe_groups)
    observed = [np.asarray(o, dtype=float) for o in observed]
    if len(observed) != len(observe_groups):
        raise ValueError(f"expected {len(observe_groups)} observed CoMs, got {len(observed)}")
    terms = tuple(LossSpec("final_com_distance", groups=(g,), target=tuple(o))
                  for g, o in zip(observe_groups, observed))
    loss = LossSpec("weighted_sum", terms=terms, weights=(1.0,) * len(terms))
    prob = Problem(scene, "density_scales", loss, groups, opt.threads, opt.backend)
    start = {"scale": np.ones(len(groups)) if init is None else np.asarray(init, dtype=float)}
    res = optimize(scene, opt, problem=prob, params=start)
    res.extra.update(groups=list(groups), observe_groups=list(observe_groups),
                     observed=[o.tolist() for o in observed],
                     true_scales=None if true_scales is None else np.asarray(true_scales, dtype=float).tolist())
    if res.status == "diverged":
        raise OptimizationError(f"density identification diverged: {res.message}; "
                                f"last scales {res.params['scale'].tolist()}")
    return res


# -- co-design -------------------------------------------------------------------

class _CodesignProblem(Problem):
    """Joint per-particle stiffness scale and open-loop actuation schedule."""

    def __init__(self, scene, loss, fixed_E=False, threads=None, backend_name=None):
        super().__init__(scene, "open_loop_actuation", loss, threads=threads, backend_name=backend_name)
        self.fixed_E = fixed_E

    def initial(self):
        out = {"u": self.controller.params["u"].copy()}
        if not self.fixed_E:
            out["E_scale"] = np.ones(self.p0.n)
        return out

    def bind(self, params):
        p = self.p0
        if "E_scale" in params:
            p = p.with_material(E=np.asarray(p.E, dtype=float) * params["E_scale"])
        return p, self.controller.with_params({"u": params["u"]})

    def evaluate(self, params):
        tape = self.simulate(params)
        adj = backprop(tape, self.loss, target=self.target, threads=self.world.threads,
                       backend_name=self.world.backend)
        grads = {"u": np.array(adj.params["u"], dtype=float)}
        if "E_scale" in params:
            grads["E_scale"] = np.asarray(adj.g_E, dtype=float) * np.asarray(self.p0.E, dtype=float)
        return float(adj.loss), grads, tape


def codesign_loss(groups, target, weights=(1.0, 0.1, 0.01)) -> LossSpec:
    """``w1 * final distance + w2 * final mean squared velocity + w3 * sum a^T a dt``."""
    w1, w2, w3 = weights
    return LossSpec("weighted_sum", terms=(
        LossSpec("final_com_distance", groups=tuple(groups), target=tuple(target)),
        LossSpec("final_velocity_sq"),
        LossSpec("actuation_cost"),
    ), weights=(w1, w2, w3))


def constraint_violation(tape, groups, target) -> dict:
    """Distance to the target, RMS final speed and their Euclidean norm."""
    from .control import eval_loss

    dist = math.sqrt(2.0 * eval_loss(tape, LossSpec("final_com_distance", groups=tuple(groups), target=tuple(target)))[0])
    rms = math.sqrt(eval_loss(tape, LossSpec("final_velocity_sq"))[0])
    cost = eval_loss(tape, LossSpec("actuation_cost"))[0]
    return {"distance": dist, "rms_velocity": rms, "violation": math.hypot(dist, rms), "actuation_cost": cost}


def codesign_arm(scene: SceneSpec, opt: OptConfig | None = None, groups=None, target=None,
                 compare_fixed: bool = True) -> dict:
    """Co-design stiffness and actuation, optionally paired with a fixed-stiffness run.

    Returns ``{"codesign": OptResult, "fixed": OptResult | None, "metrics": {...}}``
    where ``codesign.best_params['E_scale']`` is the stiffness field in units of
    the initial Young's modulus.
    """
    opt = opt or OptConfig(parameters="stiffness_field", iterations=100)
    target = target if target is not None else scene.target
    if target is None:
        raise ValueError("co-design needs a target")
    if groups is None:
        obj = scene.objective
        groups = obj.groups if obj is not None and obj.groups else None
    if groups is None:
        raise ValueError("co-design needs the end-effector group(s)")
    loss = codesign_loss(groups, target, opt.penalty_weights)
    lo, hi = opt.resolved_bounds() if opt.parameters == "stiffness_field" else STIFFNESS_BOUNDS
    lr_u = opt.learning_rate if opt.learning_rate is not None else DEFAULT_LR["open_loop_actuation"]
    runs = {}
    for name, fixed in (("codesign", False), ("fixed", True)):
        if fixed and not compare_fixed:
            runs[name] = None
            continue
        prob = _CodesignProblem(scene, loss, fixed, opt.threads, opt.backend)
        cfg = replace(opt, parameters="stiffness_field", learning_rate=lr_u, bounds=(lo, hi))
        res = optimize(scene, cfg, problem=prob, bounded_keys=("E_scale",))
        tape = prob.simulate(res.best_params)
        res.extra.update(constraint_violation(tape, groups, target))
        runs[name] = res
    metrics = {name: {k: r.extra[k] for k in ("distance", "rms_velocity", "violation", "actuation_cost")}
               for name, r in runs.items() if r is not None}
    return {"codesign": runs["codesign"], "fixed": runs["fixed"], "metrics": metrics}
