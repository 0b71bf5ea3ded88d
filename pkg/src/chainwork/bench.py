"""CPU benchmark on the falling-cube scene: forward and forward+backward cost."""
from __future__ import annotations

import time
from importlib import resources

import numpy as np

from . import __version__, backend
from .adjoint import backprop
from .control import LossSpec
from .forward import build_world, run
from .scene import load_scene, scene_to_dict

__all__ = ["bench_scene", "time_rollout", "run_bench", "thread_agreement", "BACKWARD_RATIO_LIMIT", "AGREEMENT_LIMIT"]

BACKWARD_RATIO_LIMIT = 3.0
AGREEMENT_LIMIT = 1e-10
_LOSS = LossSpec("final_com_position", direction=(0.0, 1.0))


def bench_scene(precision="f32", wide=False):
    """The 6,400-particle cube (``wide`` doubles it along x to 12,800 particles)."""
    with resources.as_file(resources.files("chainwork") / "scenes" / "cube_bench.json") as p:
        scene = load_scene(p)
    scene = scene.with_config(precision=precision)
    if wide:
        s = scene.shapes[0]
        from dataclasses import replace

        scene = scene.replace(shapes=(replace(s, size=(2 * s.size[0], s.size[1])),))
    return scene


def time_rollout(scene, steps, threads=1, backend_name=None, backward=False, warmup=2, repeats=1):
    """Best-of-``repeats`` wall time per step (seconds) for forward and optionally backward."""
    world, particles, ctrl = build_world(scene, threads, backend_name)
    run(world, particles, ctrl, steps=warmup)
    best_f = best_b = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        tape = run(world, particles, ctrl, steps=steps)
        t1 = time.perf_counter()
        best_f = min(best_f, (t1 - t0) / steps)
        if backward:
            backprop(tape, _LOSS, threads=threads, backend_name=backend_name)
            best_b = min(best_b, (time.perf_counter() - t1) / steps)
    return particles.n, best_f, (best_b if backward else None)


def thread_agreement(steps=100, threads=4, backend_name=None):
    """Max relative difference of f64 state between 1 and ``threads`` workers.

    ``x``, ``v`` and ``F`` are compared relative to their own magnitude; ``C``
    enters the state only through the increment ``dt C`` of ``F`` and is
    compared on that scale.
    """
    scene = bench_scene("f64")
    out = []
    for n in (1, threads):
        world, particles, ctrl = build_world(scene, n, backend_name)
        out.append(run(world, particles, ctrl, steps=steps).final)
    a, b = out

    def rel(da, db, scale):
        return float(np.abs(da - db).max() / max(scale, 1e-300))

    dt = scene.config.dt
    return max(
        rel(a.x, b.x, np.abs(a.x).max()),
        rel(a.v, b.v, np.abs(a.v).max()),
        rel(a.F, b.F, np.abs(a.F).max()),
        rel(dt * a.C, dt * b.C, np.abs(a.F).max()),
    )


def run_bench(steps=20, threads=None, precision="f32", compare_python=True, thread_counts=(1, 4),
              scaling=True, agreement_steps=100, repeats=1) -> dict:
    """Full benchmark report (JSON-serialisable)."""
    threads = backend.default_threads() if threads is None else threads
    scene = bench_scene(precision)
    n, fwd, bwd = time_rollout(scene, steps, threads, backward=True, repeats=repeats)
    rep = {
        "version": __version__,
        "scene": scene_to_dict(scene),
        "backend": backend.NAME,
        "precision": precision,
        "particles": n,
        "steps": steps,
        "threads": threads,
        "forward_ms_per_step": 1e3 * fwd,
        "forward_steps_per_s": 1.0 / fwd,
        "forward_particle_steps_per_s": n / fwd,
        "backward_ms_per_step": 1e3 * bwd,
        "forward_backward_ms_per_step": 1e3 * (fwd + bwd),
        "backward_forward_ratio": bwd / fwd,
    }
    checks = {"backward_ratio": {"value": bwd / fwd, "limit": BACKWARD_RATIO_LIMIT,
                                 "pass": bwd / fwd <= BACKWARD_RATIO_LIMIT, "hard": True}}
    rep["forward_under_5ms"] = {"value": 1e3 * fwd, "limit": 5.0, "pass": 1e3 * fwd <= 5.0, "hard": False}
    if compare_python and backend.NAME != "python":
        _, pf, pb = time_rollout(scene, max(2, steps // 4), 1, "python", backward=True)
        rep["python_forward_ms_per_step"] = 1e3 * pf
        rep["python_backward_ms_per_step"] = 1e3 * pb
        rep["compiled_speedup_forward"] = pf / time_rollout(scene, steps, 1, backward=False)[1]
    if thread_counts:
        per = {}
        for t in thread_counts:
            per[str(t)] = 1e3 * time_rollout(scene, steps, t, repeats=repeats)[1]
        rep["forward_ms_by_threads"] = per
        t_hi = str(max(thread_counts))
        speed = per[str(min(thread_counts))] / per[t_hi]
        rep["thread_speedup"] = {"threads": int(t_hi), "value": speed, "limit": 2.0, "pass": speed >= 2.0,
                                 "hard": False, "cpus": _cpu_count()}
    if scaling:
        n2, f2, _ = time_rollout(bench_scene(precision, wide=True), steps, threads, repeats=repeats)
        rep["scaling"] = {"particles": n2, "forward_ms_per_step": 1e3 * f2, "ratio": f2 / fwd,
                          "limit": 2.5, "pass": f2 / fwd <= 2.5, "hard": False}
    if agreement_steps:
        rel = thread_agreement(agreement_steps, max(4, max(thread_counts or (4,))))
        checks["thread_agreement"] = {"value": rel, "limit": AGREEMENT_LIMIT, "pass": rel <= AGREEMENT_LIMIT,
                                      "hard": True}
    rep["checks"] = checks
    rep["pass"] = all(c["pass"] for c in checks.values())
    return rep


def _cpu_count():
    import os

    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover
        return os.cpu_count()
