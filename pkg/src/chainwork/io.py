"""File formats: trajectories (CSV and binary), gradient dumps, histories, parameters.

Binary trajectory layout (all little-endian)::

    magic      8 bytes   b"CWTRAJ\\0\\0"
    version    uint32    1
    n_frames   uint32
    n_particles uint32
    itemsize   uint8     4 (f32) or 8 (f64)
    reserved   3 bytes   zero
    group ids  int32[n_particles]
    frames     n_frames x { step uint32, x float[n_particles*2], v float[n_particles*2] }
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__

__all__ = [
    "Trajectory",
    "TrajectoryFormatError",
    "trajectory_from_tape",
    "write_trajectory",
    "read_trajectory",
    "write_trajectory_csv",
    "read_trajectory_csv",
    "write_trajectory_bin",
    "read_trajectory_bin",
    "write_gradients_csv",
    "gradient_summary",
    "write_history_csv",
    "write_json",
    "to_jsonable",
    "save_params",
    "load_params",
    "MAGIC",
    "VERSION",
]

MAGIC = b"CWTRAJ\0\0"
VERSION = 1
_HEADER = struct.Struct("<8sIIIB3x")


class TrajectoryFormatError(ValueError):
    pass


@dataclass
class Trajectory:
    steps: np.ndarray  # (T,) step index of each frame
    x: np.ndarray  # (T, N, 2)
    v: np.ndarray  # (T, N, 2)
    group: np.ndarray | None = None  # (N,)

    @property
    def n_frames(self) -> int:
        return len(self.steps)

    @property
    def n_particles(self) -> int:
        return self.x.shape[1] if self.x.ndim == 3 else 0

    @property
    def dtype(self):
        return self.x.dtype


def trajectory_from_tape(tape, every: int = 1) -> Trajectory:
    """Frames ``0, every, 2*every, ...`` plus the final state."""
    ts = list(range(0, tape.n_steps + 1, max(1, every)))
    if ts[-1] != tape.n_steps:
        ts.append(tape.n_steps)
    states = [tape.state(t) for t in ts]
    return Trajectory(
        steps=np.asarray(ts, dtype=np.int64),
        x=np.stack([s.x for s in states]),
        v=np.stack([s.v for s in states]),
        group=np.asarray(tape.final.group),
    )


# -- CSV -----------------------------------------------------------------------

def write_trajectory_csv(path, traj: Trajectory) -> None:
    fmt = "%.17g" if traj.dtype == np.float64 else "%.9g"
    with open(path, "w", newline="") as f:
        f.write("step,particle,x,y,vx,vy\n")
        ids = np.arange(traj.n_particles)
        for k, t in enumerate(traj.steps):
            block = np.column_stack([np.full(traj.n_particles, t), ids, traj.x[k], traj.v[k]])
            np.savetxt(f, block, fmt=["%d", "%d", fmt, fmt, fmt, fmt], delimiter=",")


def read_trajectory_csv(path, dtype=np.float64) -> Trajectory:
    try:
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header != ["step", "particle", "x", "y", "vx", "vy"]:
                raise TrajectoryFormatError(f"{path}: unexpected CSV header {header}")
            rows = [r for r in reader if r]
    except UnicodeDecodeError:
        raise TrajectoryFormatError(f"{path}: not a text trajectory") from None
    bad = next((i for i, r in enumerate(rows) if len(r) != 6), None)
    if bad is not None:
        raise TrajectoryFormatError(f"{path}: malformed row {bad + 2} (expected 6 fields)")
    if not rows:
        return Trajectory(np.zeros(0, dtype=np.int64), np.zeros((0, 0, 2), dtype), np.zeros((0, 0, 2), dtype))
    try:
        step = np.array([int(r[0]) for r in rows])
        pid = np.array([int(r[1]) for r in rows])
        vals = np.array([[float(a) for a in r[2:6]] for r in rows], dtype=dtype)
    except (ValueError, IndexError) as e:
        raise TrajectoryFormatError(f"{path}: malformed row ({e})") from None
    steps, first = np.unique(step, return_index=True)
    steps = step[np.sort(first)]
    n = int(pid.max()) + 1
    if len(rows) != n * len(steps):
        raise TrajectoryFormatError(f"{path}: {len(rows)} rows do not form {len(steps)} frames of {n} particles")
    vals = vals.reshape(len(steps), n, 4)
    if not np.array_equal(pid.reshape(len(steps), n), np.tile(np.arange(n), (len(steps), 1))):
        raise TrajectoryFormatError(f"{path}: particle ids out of order")
    return Trajectory(steps.astype(np.int64), vals[:, :, :2].copy(), vals[:, :, 2:].copy())


# -- binary --------------------------------------------------------------------

def write_trajectory_bin(path, traj: Trajectory) -> None:
    dt = np.dtype(traj.dtype).newbyteorder("<")
    n = traj.n_particles
    group = np.zeros(n, dtype="<i4") if traj.group is None else np.asarray(traj.group, dtype="<i4")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, traj.n_frames, n, dt.itemsize))
        f.write(group.tobytes())
        for k, t in enumerate(traj.steps):
            f.write(struct.pack("<I", int(t)))
            f.write(np.ascontiguousarray(traj.x[k], dtype=dt).tobytes())
            f.write(np.ascontiguousarray(traj.v[k], dtype=dt).tobytes())


def read_trajectory_bin(path) -> Trajectory:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise TrajectoryFormatError(f"{path}: file too short for a trajectory header")
    magic, version, n_frames, n, itemsize = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise TrajectoryFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise TrajectoryFormatError(f"{path}: unsupported version {version}")
    if itemsize not in (4, 8):
        raise TrajectoryFormatError(f"{path}: bad precision byte {itemsize}")
    dt = np.dtype("<f4" if itemsize == 4 else "<f8")
    frame = 4 + 4 * n * itemsize
    want = _HEADER.size + 4 * n + n_frames * frame
    if len(data) != want:
        raise TrajectoryFormatError(f"{path}: expected {want} bytes, found {len(data)}")
    off = _HEADER.size
    group = np.frombuffer(data, dtype="<i4", count=n, offset=off).astype(np.int64)
    off += 4 * n
    steps = np.empty(n_frames, dtype=np.int64)
    x = np.empty((n_frames, n, 2), dtype=dt.newbyteorder("="))
    v = np.empty_like(x)
    for k in range(n_frames):
        steps[k] = struct.unpack_from("<I", data, off)[0]
        off += 4
        x[k] = np.frombuffer(data, dtype=dt, count=2 * n, offset=off).reshape(n, 2)
        off += 2 * n * itemsize
        v[k] = np.frombuffer(data, dtype=dt, count=2 * n, offset=off).reshape(n, 2)
        off += 2 * n * itemsize
    return Trajectory(steps, x, v, group)


def write_trajectory(path, traj: Trajectory, fmt: str = "csv") -> None:
    if fmt == "csv":
        write_trajectory_csv(path, traj)
    elif fmt == "bin":
        write_trajectory_bin(path, traj)
    else:
        raise ValueError(f"unknown trajectory format {fmt!r}")


def read_trajectory(path) -> Trajectory:
    """Read either format: magic bytes or any NUL byte select the binary reader."""
    with open(path, "rb") as f:
        head = f.read(4096)
    if head.startswith(MAGIC) or b"\0" in head:
        return read_trajectory_bin(path)
    return read_trajectory_csv(path)


# -- gradients, histories, parameters --------------------------------------------

def write_gradients_csv(path, adj) -> None:
    """One row per particle: id, dL/dx, dL/dv, dL/dm, dL/dE."""
    n = adj.gx.shape[0]
    block = np.column_stack([np.arange(n), adj.gx, adj.gv, adj.g_mass, adj.g_E])
    with open(path, "w", newline="") as f:
        f.write("particle,gx,gy,gvx,gvy,g_mass,g_E\n")
        np.savetxt(f, block, fmt=["%d"] + ["%.17g"] * 6, delimiter=",")


def gradient_summary(adj, extra=None) -> dict:
    def norm(a):
        return float(np.linalg.norm(np.asarray(a, dtype=float)))

    out = {
        "version": __version__,
        "loss": adj.loss,
        "norms": {
            "x": norm(adj.gx), "v": norm(adj.gv), "F": norm(adj.gF), "C": norm(adj.gC),
            "mass": norm(adj.g_mass), "E": norm(adj.g_E),
            **{f"param_{k}": norm(v) for k, v in adj.params.items()},
        },
    }
    if extra:
        out.update(extra)
    return out


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "loss", "grad_norm", "wall_time", "status"])
        for h in history:
            w.writerow([h["iteration"], repr(float(h["loss"])), repr(float(h["grad_norm"])),
                        f"{h['wall_time']:.6f}", h["status"]])


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(to_jsonable(obj), indent=2) + "\n", encoding="utf-8")


def save_params(path, params: dict, meta=None) -> None:
    """Parameter dict as JSON; arrays stored row-major with their shapes."""
    doc = {"version": __version__, "params": {k: {"shape": list(np.shape(v)), "data": np.ravel(v).tolist()}
                                              for k, v in params.items()}}
    if meta:
        doc["meta"] = meta
    write_json(path, doc)


def load_params(path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return {k: np.asarray(v["data"], dtype=float).reshape(v["shape"]) for k, v in doc["params"].items()}
