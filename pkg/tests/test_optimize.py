import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chainwork.control import LossSpec
from chainwork.forward import SimulationError
from chainwork.optimize import (
    GD, Adam, Momentum, OptConfig, OptimizationError, Problem, gradcheck, identify_density, make_optimizer,
    optimize, relative_errors,
)

from conftest import make_scene, packaged


class Quadratic:
    """Stand-in problem: L = 0.5 |A (x - c)|^2, optionally failing or misbehaving."""

    def __init__(self, A, c, fail_at=(), values=None):
        self.A, self.c = np.asarray(A, float), np.asarray(c, float)
        self.fail_at = set(fail_at)
        self.values = values
        self.calls = 0

    def initial(self):
        return {"x": np.zeros_like(self.c)}

    def evaluate(self, params):
        k = self.calls
        self.calls += 1
        if k in self.fail_at:
            raise SimulationError("boom", k)
        r = self.A @ (params["x"] - self.c)
        if self.values is not None:
            return self.values[min(k, len(self.values) - 1)], {"x": self.A.T @ r}, None
        return 0.5 * float(r @ r), {"x": self.A.T @ r}, None


def run_q(prob, **kw):
    cfg = OptConfig(parameters="controller", **kw)
    return optimize(None, cfg, problem=prob)


# -- optimizers ----------------------------------------------------------------

def test_gd_and_momentum_steps():
    p, g = {"x": np.array([1.0, 2.0])}, {"x": np.array([0.5, -1.0])}
    assert np.allclose(GD(0.1).step(p, g)["x"], [0.95, 2.1])
    m = Momentum(0.1, beta=0.5)
    p1 = m.step(p, g)
    p2 = m.step(p1, g)
    assert np.allclose(p2["x"], p1["x"] - 0.1 * 1.5 * g["x"])


def test_adam_first_step_is_lr_sign():
    a = Adam(0.01)
    out = a.step({"x": np.array([0.0, 0.0, 0.0])}, {"x": np.array([3.0, -1e-3, 0.0])})
    assert np.allclose(out["x"], [-0.01, 0.01, 0.0], atol=1e-7)
    st_ = a.state()
    b = Adam(0.01)
    b.restore(st_)
    assert b.t == 1


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=4), st.sampled_from(["gd", "gd_momentum", "adam"]))
def test_optimizers_converge_on_quadratic(c, algo):
    c = np.asarray(c)
    lr = {"gd": 0.5, "gd_momentum": 0.1, "adam": 0.2}[algo]
    res = run_q(Quadratic(np.eye(len(c)), c), algorithm=algo, learning_rate=lr, iterations=400, tol=0)
    assert np.allclose(res.best_params["x"], c, atol=2e-2)
    assert res.best_loss <= res.initial_loss


def test_make_optimizer_unknown():
    with pytest.raises(ValueError):
        make_optimizer("lbfgs", 0.1)


# -- configuration -------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(parameters="everything"), dict(algorithm="sgd"), dict(learning_rate=-1.0),
                                dict(iterations=-1), dict(bounds=(2.0, 1.0)),
                                dict(parameters="stiffness_field", bounds=(0.1, 2.0))])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        OptConfig(**kw)


def test_config_defaults():
    assert OptConfig(parameters="density_scales").lr == 0.1
    assert OptConfig(parameters="stiffness_field").resolved_bounds() == (0.3, 4.0)
    assert OptConfig(learning_rate=0.0).lr == 0.0


# -- loop behaviour --------------------------------------------------------------

def test_history_layout():
    res = run_q(Quadratic(np.eye(2), [1.0, -1.0]), learning_rate=0.1, iterations=5, tol=0)
    assert [h["iteration"] for h in res.history] == list(range(6))
    assert all(h["status"] == "ok" and h["wall_time"] >= 0 for h in res.history)
    assert res.status == "ok" and len(res.losses) == 6


def test_zero_lr_keeps_params_and_converges():
    res = run_q(Quadratic(np.eye(2), [1.0, -1.0]), learning_rate=0.0, iterations=50, patience=3)
    assert res.status == "converged"
    assert np.allclose(res.best_params["x"], 0)


def test_failure_retries_with_half_step():
    prob = Quadratic(np.eye(1), [1.0], fail_at={2})
    res = run_q(prob, algorithm="gd", learning_rate=0.5, iterations=4, tol=0)
    assert [h["status"] for h in res.history].count("failed") == 1
    assert res.status == "ok"
    # steps: 0 -> 0.5 -> (fail at 0.75) -> retry from 0.5 with lr 0.25 -> 0.625
    assert np.isclose(res.history[3]["loss"], 0.5 * 0.375 ** 2)


def test_repeated_failure_aborts():
    res = run_q(Quadratic(np.eye(1), [1.0], fail_at={1, 2}), learning_rate=0.1, iterations=5)
    assert res.status == "aborted" and "boom" in res.message


def test_nonfinite_first_loss_aborts():
    res = run_q(Quadratic(np.eye(1), [1.0], values=[math.nan]), iterations=3)
    assert res.status == "aborted"


def test_divergence_detected():
    vals = [1.0, 0.5] + [0.5 + 0.1 * k for k in range(1, 20)]
    res = run_q(Quadratic(np.eye(1), [1.0], values=vals), iterations=30, divergence_window=5, tol=0)
    assert res.status == "diverged" and res.best_loss == 0.5


def test_lr_decay_backtracks_to_best():
    seen = []
    prob = Quadratic(np.eye(1), [1.0], values=[1.0, 0.5, 0.9, 0.4, 0.3])
    cfg = OptConfig(parameters="controller", algorithm="gd", learning_rate=1.0, iterations=3, lr_decay=0.5, tol=0)
    optimize(None, cfg, problem=prob, callback=lambda k, v, th, g: seen.append(th["x"].copy()))
    # iteration 2 rose, so iteration 3 restarts from iteration 1's point with half the step
    assert np.allclose(seen[3], seen[1] - 0.5 * (seen[1] - 1.0))


def test_bounds_project():
    res = run_q(Quadratic(np.eye(1), [10.0]), algorithm="gd", learning_rate=1.0, iterations=3, bounds=(-1.0, 2.0))
    assert res.best_params["x"].max() <= 2.0


# -- real scenes -----------------------------------------------------------------

def test_relative_error_floor():
    e = relative_errors([1.0, 1e-9], [1.0, 0.0], floor=1e-3)
    assert e[0] == 0 and np.isclose(e[1], 1e-6)


def test_gradcheck_report_and_f32_rejected():
    scene = packaged("freefall").with_config(steps=10)
    rep = gradcheck(scene, LossSpec("final_com_position", direction=(1.0, 0.5)), max_coords=4, h=1e-4)
    assert rep["n_checked"] == 4 and rep["n_params"] == 512 and rep["max_rel_err"] <= 1e-6
    assert {"index", "adjoint", "fd", "h", "rel_err"} <= set(rep["coords"][0])
    with pytest.raises(ValueError, match="f64"):
        gradcheck(scene.with_config(precision="f32"))


def test_problem_parameter_mismatch():
    from chainwork.control import ControlError

    with pytest.raises(ControlError):
        Problem(packaged("freefall"), "controller")
    with pytest.raises(ControlError):
        Problem(packaged("finger"), "open_loop_actuation")
    with pytest.raises(ValueError):
        Problem(packaged("freefall"), "nope")


def test_finger_short_optimization_reduces_loss():
    scene = packaged("finger").with_config(steps=100)
    res = optimize(scene, OptConfig(parameters="controller", iterations=15, learning_rate=0.05))
    assert res.best_loss < 0.8 * res.initial_loss


def _two_blocks(steps=120):
    box = {"kind": "box", "size": [0.1, 0.1], "youngs_modulus": 30.0}
    return make_scene([dict(box, center=[0.4, 0.5], initial_velocity=[0.6, 0.0], group_id=0),
                       dict(box, center=[0.55, 0.5], group_id=1)], {"steps": steps, "dt": 5e-4})


def test_identify_density_small():
    res = identify_density(_two_blocks(), true_scales=[1.7], groups=(1,),
                           opt=OptConfig(parameters="density_scales", iterations=150, lr_decay=0.5))
    # groups=(1,) fixes block 0 at its true density
    assert abs(res.best_params["scale"][0] - 1.7) <= 0.02 * 1.7
    assert res.extra["true_scales"] == [1.7]
    with pytest.raises(ValueError, match="one value per"):
        identify_density(_two_blocks(), true_scales=[1.0, 1.7], groups=(1,))


def test_identify_needs_data():
    with pytest.raises(ValueError):
        identify_density(_two_blocks())
    with pytest.raises(ValueError):
        identify_density(_two_blocks(), observed=[[0.5, 0.5]])


def test_identify_divergence_raises(monkeypatch):
    import chainwork.optimize as optmod

    def fake(scene, opt, problem=None, params=None, **kw):
        return optmod.OptResult([], params, 1.0, params, "diverged", "up")

    monkeypatch.setattr(optmod, "optimize", fake)
    with pytest.raises(OptimizationError, match="diverged"):
        identify_density(_two_blocks(10), true_scales=[1.0, 1.0])


# -- invariants --------------------------------------------------------------------

def _collision_scene():
    box = {"kind": "box", "size": [0.15, 0.15], "youngs_modulus": 20.0}
    return make_scene([dict(box, center=[0.42, 0.5], initial_velocity=[0.5, 0.0]),
                       dict(box, center=[0.6, 0.52], group_id=1)], {"steps": 120, "dt": 5e-4})


def test_gradcheck_error_shrinks_quadratically_in_h():
    loss = LossSpec("final_com_position", groups=(1,), direction=(1.0, 0.3))
    errs = [gradcheck(_collision_scene(), loss, "density_scales", h=0.04 / 2 ** k, max_coords=2)["max_rel_err"]
            for k in range(7)]
    for a, b in zip(errs, errs[1:]):
        assert b <= a / 3
    assert errs[-1] <= 1e-6


def test_adam_history_bit_reproducible():
    scene = packaged("finger").with_config(steps=40)
    cfg = OptConfig(parameters="controller", iterations=4, learning_rate=0.05)
    a, b = optimize(scene, cfg), optimize(scene, cfg)
    assert a.losses == b.losses
    assert np.array_equal(a.best_params["W"], b.best_params["W"])


def test_codesign_projects_stiffness_every_iteration(monkeypatch):
    import chainwork.optimize as optmod

    seen = []
    real = optmod.optimize

    def spy(scene, opt, **kw):
        kw["callback"] = lambda k, v, th, g: seen.append(th.get("E_scale"))
        return real(scene, opt, **kw)

    monkeypatch.setattr(optmod, "optimize", spy)
    scene = packaged("arm").with_config(steps=30)
    res = optmod.codesign_arm(scene, OptConfig(parameters="stiffness_field", iterations=6, learning_rate=0.5,
                                               bounds=(0.8, 1.2)))
    fields = [e for e in seen if e is not None]
    assert len(fields) == 7
    assert all(e.min() >= 0.8 and e.max() <= 1.2 for e in fields)
    assert res["fixed"].best_params.keys() == {"u"}


def test_codesign_huge_actuation_weight_keeps_arm_still():
    from chainwork.optimize import codesign_arm

    scene = packaged("arm").with_config(steps=30)
    res = codesign_arm(scene, OptConfig(parameters="stiffness_field", iterations=5, learning_rate=0.05,
                                        penalty_weights=(1.0, 0.1, 1e6)), compare_fixed=False)
    assert res["fixed"] is None
    assert res["metrics"]["codesign"]["actuation_cost"] <= 1e-8
    assert np.abs(res["codesign"].best_params["u"]).max() <= 1e-6
