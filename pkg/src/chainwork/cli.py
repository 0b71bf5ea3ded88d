"""Command-line entry point: ``chainwork <subcommand> --scene scene.json --out dir``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, backend
from .control import ControlError, LossSpec
from .forward import SimulationError, build_world, run
from .scene import SceneError, load_scene, packaged_scene, packaged_scenes, scene_from_dict, scene_to_dict

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class ConfigError(Exception):
    pass


def _common(p, scene_required=True):
    p.add_argument("--scene", required=scene_required, help="scene JSON file or packaged scene name")
    p.add_argument("--out", default="out", help="output directory (created if missing)")
    p.add_argument("--steps", type=int, help="override config.steps")
    p.add_argument("--dt", type=float, help="override config.dt")
    p.add_argument("--precision", choices=("f32", "f64"), help="override config.precision")
    p.add_argument("--seed", type=int, help="override config.seed")
    p.add_argument("--threads", type=int, help="worker threads (default: CHAINWORK_THREADS or 1)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="chainwork", description="Differentiable 2D MLS-MPM simulator")
    ap.add_argument("--version", action="version", version=f"chainwork {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a scene forward and dump its trajectory")
    _common(p)
    p.add_argument("--format", choices=("csv", "bin"), default="csv")
    p.add_argument("--every", type=int, default=1, help="write every k-th frame")

    p = sub.add_parser("gradcheck", help="adjoint vs central finite differences")
    _common(p)
    p.add_argument("--params", default="initial_velocity", help="parameter set to check")
    p.add_argument("--h", type=float, default=1e-6, help="relative finite-difference step")
    p.add_argument("--coords", type=int, default=64, help="max sampled coordinates")

    p = sub.add_parser("optimize", help="gradient-based optimisation of a parameter set")
    _common(p)
    p.add_argument("--params", default="controller")
    p.add_argument("--algorithm", choices=("gd", "gd_momentum", "adam"), default="adam")
    p.add_argument("--lr", type=float)
    p.add_argument("--iterations", type=int, default=100)

    p = sub.add_parser("identify", help="recover density scales from final centres of mass")
    _common(p)
    p.add_argument("--groups", type=int, nargs="+", help="groups whose density is unknown")
    p.add_argument("--true-scales", type=float, nargs="+", required=True,
                   help="hidden scales used to synthesise the observation")
    p.add_argument("--lr", type=float)
    p.add_argument("--iterations", type=int, default=300)

    p = sub.add_parser("codesign", help="joint stiffness field and open-loop actuation")
    _common(p)
    p.add_argument("--lr", type=float)
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--weights", type=float, nargs=3, default=(1.0, 0.1, 0.01))
    p.add_argument("--no-compare", action="store_true", help="skip the fixed-stiffness run")

    p = sub.add_parser("render", help="write PPM frames from a trajectory or a scene")
    _common(p, scene_required=False)
    p.add_argument("--traj", help="trajectory file (CSV or binary)")
    p.add_argument("--size", type=int, nargs=2, default=(256, 256))
    p.add_argument("--radius", type=float, default=1.5)
    p.add_argument("--every", type=int, default=1)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--stop", type=int)

    p = sub.add_parser("bench", help="falling-cube throughput benchmark")
    p.add_argument("--out", default="out")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    p.add_argument("--threads", type=int)
    p.add_argument("--no-python", action="store_true", help="skip the python-backend comparison")
    return ap


# -- helpers -------------------------------------------------------------------

def _scene(args):
    if not args.scene:
        raise ConfigError("--scene is required")
    path = Path(args.scene)
    if not path.exists() and args.scene not in packaged_scenes():
        raise ConfigError(f"scene file not found: {path} (packaged scenes: {', '.join(packaged_scenes())})")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        spec = load_scene(path) if path.exists() else packaged_scene(args.scene)
        over = {k: getattr(args, k) for k in ("steps", "dt", "precision", "seed") if getattr(args, k, None) is not None}
        if over:
            doc = scene_to_dict(spec)
            doc["config"].update(over)
            spec = scene_from_dict(doc)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    return spec, [str(w.message) for w in caught]


def _threads(args):
    t = getattr(args, "threads", None)
    t = backend.default_threads() if t is None else t
    if t < 1:
        raise ConfigError("--threads must be >= 1")
    return t


def _out(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {out}: {e}") from None
    return out


def _base_summary(command, spec, threads, notes=()):
    return {
        "version": __version__,
        "command": command,
        "backend": backend.NAME,
        "threads": threads,
        "precision": spec.config.precision,
        "config": scene_to_dict(spec),
        "warnings": list(notes),
    }


def _objective(spec):
    if spec.objective is None:
        raise ConfigError("the scene has no objective")
    return spec.objective


# -- subcommands ---------------------------------------------------------------

def cmd_simulate(args):
    from .io import trajectory_from_tape, write_json, write_trajectory

    spec, notes = _scene(args)
    threads = _threads(args)
    out = _out(args)
    world, particles, ctrl = build_world(spec, threads)
    mass = np.asarray(particles.mass, dtype=float)
    momentum = [(mass[:, None] * particles.v).sum(axis=0).tolist()]

    def track(t, s, rec):
        momentum.append((mass[:, None] * np.asarray(s.v, dtype=float)).sum(axis=0).tolist())

    t0 = time.perf_counter()
    tape = run(world, particles, ctrl, target=spec.target, callback=track)
    wall = time.perf_counter() - t0
    traj = trajectory_from_tape(tape, args.every)
    name = "trajectory.csv" if args.format == "csv" else "trajectory.bin"
    write_trajectory(out / name, traj, args.format)
    p = np.asarray(momentum)
    ref = max(np.abs(p[0]).max(), np.abs(p).max(), 1e-300)
    summary = _base_summary("simulate", spec, threads, notes)
    summary.update({
        "particles": particles.n,
        "steps": tape.n_steps,
        "total_mass": float(mass.sum()),
        "momentum_history": p.tolist(),
        "momentum_drift_rel": float(np.abs(p - p[0]).max() / ref),
        "wall_time_s": wall,
        "wall_time_per_step_ms": 1e3 * wall / max(1, tape.n_steps),
        "trajectory": name,
        "format": args.format,
    })
    write_json(out / "summary.json", summary)
    print(f"simulated {tape.n_steps} steps of {particles.n} particles -> {out / name}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .io import write_json
    from .optimize import gradcheck

    spec, notes = _scene(args)
    threads = _threads(args)
    out = _out(args)
    if spec.config.precision != "f64":
        raise ConfigError("gradcheck needs f64 precision (use --precision f64)")
    rep = gradcheck(spec, _objective(spec), args.params, h=args.h, seed=spec.config.seed,
                    max_coords=args.coords, threads=threads)
    summary = _base_summary("gradcheck", spec, threads, notes)
    summary.update(rep)
    write_json(out / "gradcheck.json", summary)
    _dump_gradients(spec, threads, out)
    print(f"gradcheck {args.params}: max rel err {rep['max_rel_err']:.3e} over {rep['n_checked']} coords")
    return EXIT_OK


def _dump_gradients(spec, threads, out):
    from .adjoint import backprop
    from .io import gradient_summary, write_gradients_csv, write_json

    world, particles, ctrl = build_world(spec, threads)
    tape = run(world, particles, ctrl, target=spec.target)
    adj = backprop(tape, spec.objective, target=spec.target, threads=threads)
    write_gradients_csv(out / "gradients.csv", adj)
    write_json(out / "gradient_summary.json", gradient_summary(adj, {"config": scene_to_dict(spec)}))


def cmd_optimize(args):
    from .io import save_params, write_history_csv, write_json
    from .optimize import OptConfig, optimize

    spec, notes = _scene(args)
    threads = _threads(args)
    out = _out(args)
    opt = OptConfig(algorithm=args.algorithm, learning_rate=args.lr, iterations=args.iterations,
                    parameters=args.params, threads=threads)
    res = optimize(spec, opt, _objective(spec))
    write_history_csv(out / "history.csv", res.history)
    save_params(out / "best_params.json", res.best_params, {"parameters": args.params, "loss": res.best_loss})
    summary = _base_summary("optimize", spec, threads, notes)
    summary.update({"optimizer": opt.to_dict(), "status": res.status, "message": res.message,
                    "initial_loss": res.initial_loss, "best_loss": res.best_loss,
                    "iterations_run": len(res.history)})
    write_json(out / "summary.json", summary)
    print(f"optimize {args.params}: loss {res.initial_loss:.6g} -> {res.best_loss:.6g} ({res.status})")
    return EXIT_OK if res.status != "aborted" else EXIT_RUNTIME


def cmd_identify(args):
    from .io import write_history_csv, write_json
    from .optimize import OptConfig, identify_density

    spec, notes = _scene(args)
    threads = _threads(args)
    out = _out(args)
    groups = tuple(args.groups) if args.groups else None
    opt = OptConfig(parameters="density_scales", learning_rate=args.lr, iterations=args.iterations,
                    threads=threads, lr_decay=0.5)
    res = identify_density(spec, true_scales=args.true_scales, groups=groups, opt=opt)
    write_history_csv(out / "history.csv", res.history)
    summary = _base_summary("identify", spec, threads, notes)
    summary.update({"optimizer": opt.to_dict(), "status": res.status, "scales": res.best_params["scale"],
                    "best_loss": res.best_loss, **res.extra})
    write_json(out / "summary.json", summary)
    print(f"identified scales {np.round(res.best_params['scale'], 6).tolist()} ({res.status})")
    return EXIT_OK


def cmd_codesign(args):
    from .io import save_params, write_history_csv, write_json
    from .optimize import OptConfig, codesign_arm

    spec, notes = _scene(args)
    threads = _threads(args)
    out = _out(args)
    opt = OptConfig(parameters="stiffness_field", learning_rate=args.lr, iterations=args.iterations,
                    penalty_weights=tuple(args.weights), threads=threads)
    res = codesign_arm(spec, opt, compare_fixed=not args.no_compare)
    for name in ("codesign", "fixed"):
        r = res[name]
        if r is not None:
            write_history_csv(out / f"history_{name}.csv", r.history)
            save_params(out / f"best_params_{name}.json", r.best_params, {"loss": r.best_loss})
    summary = _base_summary("codesign", spec, threads, notes)
    summary.update({"optimizer": opt.to_dict(), "metrics": res["metrics"]})
    write_json(out / "summary.json", summary)
    for name, m in res["metrics"].items():
        print(f"{name}: violation {m['violation']:.4g}, actuation cost {m['actuation_cost']:.4g}")
    return EXIT_OK


def cmd_render(args):
    from .io import TrajectoryFormatError, read_trajectory, trajectory_from_tape
    from .render import render_trajectory

    out = _out(args)
    domain = (1.0, 1.0)
    if args.traj:
        path = Path(args.traj)
        if not path.exists():
            raise ConfigError(f"trajectory file not found: {path}")
        try:
            traj = read_trajectory(path)
        except (TrajectoryFormatError, ValueError, IndexError) as e:
            print(f"error: malformed trajectory: {e}", file=sys.stderr)
            return EXIT_RUNTIME
        if args.scene:
            spec, _ = _scene(args)
            domain = spec.config.domain
    else:
        spec, _ = _scene(args)
        domain = spec.config.domain
        world, particles, ctrl = build_world(spec, _threads(args))
        traj = trajectory_from_tape(run(world, particles, ctrl, target=spec.target))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        paths = render_trajectory(traj, out, domain, tuple(args.size), args.radius, args.every,
                                  args.start, args.stop)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    print(f"wrote {len(paths)} frame(s) to {out}")
    return EXIT_OK


def cmd_bench(args):
    from .bench import run_bench
    from .io import write_json

    threads = _threads(args)
    out = _out(args)
    rep = run_bench(steps=args.steps, threads=threads, precision=args.precision, compare_python=not args.no_python)
    write_json(out / "bench.json", rep)
    print(f"particles={rep['particles']} threads={rep['threads']} precision={rep['precision']}")
    print(f"forward {rep['forward_ms_per_step']:.3f} ms/step ({rep['forward_particle_steps_per_s']:.3g} particle-steps/s)")
    print(f"backward {rep['backward_ms_per_step']:.3f} ms/step (ratio {rep['backward_forward_ratio']:.2f})")
    for name, c in rep["checks"].items():
        print(f"{name}: {c['value']:.3g} (limit {c['limit']:g}) {'PASS' if c['pass'] else 'FAIL'}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "gradcheck": cmd_gradcheck,
    "optimize": cmd_optimize,
    "identify": cmd_identify,
    "codesign": cmd_codesign,
    "render": cmd_render,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, SceneError, ControlError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationError as e:
        print(f"error: simulation failed at {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
