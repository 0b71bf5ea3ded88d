"""Scene files: parsing, validation, particle seeding and time-step estimation.

A scene is a strict JSON document with top-level keys ``config``, ``shapes``,
``boundaries``, ``controller``, ``objective`` and ``target``. The schema and
every default are documented in ``docs/scene_format.md``.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .control import ControlError, ControllerSpec, LossSpec
from .kernel_math import lame_parameters
from .state import ParticleState

__all__ = [
    "SceneError",
    "SceneWarning",
    "SimConfig",
    "ShapeSpec",
    "BoundarySpec",
    "SceneSpec",
    "parse_scene",
    "load_scene",
    "packaged_scenes",
    "packaged_scene",
    "scene_to_dict",
    "serialize_scene",
    "sample_particles",
    "stable_dt",
    "CFL_CONSTANT",
    "SHAPE_MARGIN_CELLS",
]

CFL_CONSTANT = 0.5
SHAPE_MARGIN_CELLS = 2
TOP_LEVEL = ("config", "shapes", "boundaries", "controller", "objective", "target")


class SceneError(ValueError):
    """Invalid scene document; ``field`` names the offending entry."""

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class SceneWarning(UserWarning):
    pass


def _pair(v, name, typ=float):
    try:
        a, b = v
        return typ(a), typ(b)
    except (TypeError, ValueError):
        raise SceneError(f"expected a pair of numbers, got {v!r}", name) from None


def _check_keys(d, allowed, where, strict):
    if not isinstance(d, dict):
        raise SceneError(f"expected an object, got {type(d).__name__}", where)
    extra = set(d) - set(allowed)
    if strict and extra:
        raise SceneError(f"unknown field(s) {sorted(extra)}", where)


@dataclass(frozen=True)
class SimConfig:
    dx: float = 1.0 / 64
    dt: float = 1e-3
    grid_res: tuple[int, int] = (64, 64)
    gravity: tuple[float, float] = (0.0, 0.0)
    steps: int = 100
    precision: str = "f64"
    particles_per_cell: int = 4
    seed: int = 0
    jitter: float = 1.0

    FIELDS = ("dx", "dt", "grid_res", "gravity", "steps", "precision", "particles_per_cell", "seed", "jitter")

    def __post_init__(self):
        if not self.dx > 0:
            raise SceneError("dx must be > 0", "config.dx")
        if not self.dt > 0:
            raise SceneError("dt must be > 0", "config.dt")
        if min(self.grid_res) < 3:
            raise SceneError("grid_res must be >= 3 per axis", "config.grid_res")
        if self.steps < 0:
            raise SceneError("steps must be >= 0", "config.steps")
        if self.precision not in ("f32", "f64"):
            raise SceneError("precision must be 'f32' or 'f64'", "config.precision")
        k = math.isqrt(self.particles_per_cell)
        if self.particles_per_cell < 1 or k * k != self.particles_per_cell:
            raise SceneError("particles_per_cell must be a perfect square", "config.particles_per_cell")
        if not 0.0 <= self.jitter <= 1.0:
            raise SceneError("jitter must be in [0, 1]", "config.jitter")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    @property
    def inv_dx2(self) -> float:
        """APIC inertia factor ``4 / dx^2`` of the quadratic kernel."""
        return 4.0 / (self.dx * self.dx)

    @property
    def domain(self) -> tuple[float, float]:
        return ((self.grid_res[0] - 1) * self.dx, (self.grid_res[1] - 1) * self.dx)

    @classmethod
    def from_dict(cls, d, strict=True):
        _check_keys(d, cls.FIELDS, "config", strict)
        kw = {}
        for k in ("dx", "dt", "jitter"):
            if k in d:
                kw[k] = float(d[k])
        for k in ("steps", "particles_per_cell", "seed"):
            if k in d:
                kw[k] = int(d[k])
        if "grid_res" in d:
            kw["grid_res"] = _pair(d["grid_res"], "config.grid_res", int)
        if "gravity" in d:
            kw["gravity"] = _pair(d["gravity"], "config.gravity")
        if "precision" in d:
            kw["precision"] = str(d["precision"])
        return cls(**kw)

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in ((k, getattr(self, k)) for k in self.FIELDS)}


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    center: tuple[float, float]
    size: tuple[float, float] | None = None
    radius: float | None = None
    density: float = 1.0
    youngs_modulus: float = 10.0
    poisson_ratio: float = 0.2
    initial_velocity: tuple[float, float] = (0.0, 0.0)
    group_id: int = 0
    actuator_id: int | None = None

    FIELDS = ("kind", "center", "size", "radius", "density", "youngs_modulus", "poisson_ratio",
              "initial_velocity", "group_id", "actuator_id")

    def validate(self, where="shape"):
        if self.kind not in ("box", "ball"):
            raise SceneError("kind must be 'box' or 'ball'", f"{where}.kind")
        if self.kind == "box" and (self.size is None or min(self.size) <= 0):
            raise SceneError("a box needs a positive 'size' [width, height]", f"{where}.size")
        if self.kind == "ball" and (self.radius is None or self.radius <= 0):
            raise SceneError("a ball needs a positive 'radius'", f"{where}.radius")
        if not self.density > 0:
            raise SceneError("density must be > 0", f"{where}.density")
        if not self.youngs_modulus > 0:
            raise SceneError("youngs_modulus must be > 0", f"{where}.youngs_modulus")
        if not self.poisson_ratio >= 0:
            raise SceneError("poisson_ratio must be >= 0", f"{where}.poisson_ratio")
        if not self.poisson_ratio < 0.5:
            raise SceneError("poisson_ratio must be < 0.5", f"{where}.poisson_ratio")

    def bbox(self):
        c = np.asarray(self.center, dtype=float)
        h = np.asarray(self.size, dtype=float) / 2 if self.kind == "box" else np.array([self.radius] * 2)
        return c - h, c + h

    def contains(self, pts):
        c = np.asarray(self.center)
        if self.kind == "box":
            lo, hi = self.bbox()
            return np.all((pts >= lo) & (pts < hi), axis=1)
        return ((pts - c) ** 2).sum(axis=1) < self.radius ** 2

    @classmethod
    def from_dict(cls, d, index=0, strict=True):
        where = f"shapes[{index}]"
        _check_keys(d, cls.FIELDS, where, strict)
        if "kind" not in d or "center" not in d:
            raise SceneError("shape needs 'kind' and 'center'", where)
        kw = dict(kind=str(d["kind"]), center=_pair(d["center"], f"{where}.center"), group_id=int(d.get("group_id", index)))
        if "size" in d:
            kw["size"] = _pair(d["size"], f"{where}.size")
        if "radius" in d:
            kw["radius"] = float(d["radius"])
        for k in ("density", "youngs_modulus", "poisson_ratio"):
            if k in d:
                kw[k] = float(d[k])
        if "initial_velocity" in d:
            kw["initial_velocity"] = _pair(d["initial_velocity"], f"{where}.initial_velocity")
        if d.get("actuator_id") is not None:
            kw["actuator_id"] = int(d["actuator_id"])
        s = cls(**kw)
        s.validate(where)
        return s

    def to_dict(self):
        out = {}
        for k in self.FIELDS:
            v = getattr(self, k)
            if v is None:
                continue
            out[k] = list(v) if isinstance(v, tuple) else v
        return out


_WALLS = {
    "left": ((1.0, 0.0), 0),
    "right": ((-1.0, 0.0), 0),
    "bottom": ((0.0, 1.0), 1),
    "top": ((0.0, -1.0), 1),
}


@dataclass(frozen=True)
class BoundarySpec:
    """A boundary condition on a domain wall or a half-space obstacle.

    ``normal`` points out of the obstacle into free space. Domain walls sit
    ``offset`` cells in from the grid edge.
    """

    kind: str
    friction: float = 0.0
    wall: str | None = None
    normal: tuple[float, float] | None = None
    point: tuple[float, float] | None = None
    offset: float = 2.0

    FIELDS = ("kind", "friction", "wall", "normal", "point", "offset")

    def validate(self, where="boundary"):
        if self.kind not in ("sticky", "slip", "friction"):
            raise SceneError("kind must be 'sticky', 'slip' or 'friction'", f"{where}.kind")
        if not self.friction >= 0:
            raise SceneError("friction coefficient must be >= 0", f"{where}.friction")
        if (self.wall is None) == (self.normal is None):
            raise SceneError("give either 'wall' or 'normal' + 'point'", where)
        if self.wall is not None and self.wall not in (*_WALLS, "all"):
            raise SceneError(f"wall must be one of {sorted(_WALLS) + ['all']}", f"{where}.wall")
        if self.normal is not None:
            if self.point is None:
                raise SceneError("a half-space obstacle needs a 'point'", f"{where}.point")
            if abs(math.hypot(*self.normal) - 1.0) > 1e-9:
                raise SceneError("normal must have unit length", f"{where}.normal")

    def planes(self, res, dx):
        if self.normal is not None:
            return [(self.normal, self.point)]
        names = list(_WALLS) if self.wall == "all" else [self.wall]
        out = []
        for name in names:
            n, axis = _WALLS[name]
            p = [0.0, 0.0]
            p[axis] = self.offset * dx if n[axis] > 0 else (res[axis] - 1 - self.offset) * dx
            out.append((n, tuple(p)))
        return out

    @classmethod
    def from_dict(cls, d, index=0, strict=True):
        where = f"boundaries[{index}]"
        _check_keys(d, cls.FIELDS, where, strict)
        if "kind" not in d:
            raise SceneError("boundary needs 'kind'", where)
        kw = dict(kind=str(d["kind"]), friction=float(d.get("friction", 0.0)), offset=float(d.get("offset", 2.0)))
        if "wall" in d:
            kw["wall"] = str(d["wall"])
        if "normal" in d:
            kw["normal"] = _pair(d["normal"], f"{where}.normal")
        if "point" in d:
            kw["point"] = _pair(d["point"], f"{where}.point")
        b = cls(**kw)
        b.validate(where)
        return b

    def to_dict(self):
        out = {}
        for k in self.FIELDS:
            v = getattr(self, k)
            if v is not None:
                out[k] = list(v) if isinstance(v, tuple) else v
        return out


@dataclass(frozen=True)
class SceneSpec:
    config: SimConfig = field(default_factory=SimConfig)
    shapes: tuple[ShapeSpec, ...] = ()
    boundaries: tuple[BoundarySpec, ...] = ()
    controller: ControllerSpec | None = None
    objective: LossSpec | None = None
    target: tuple[float, float] | None = None

    def replace(self, **kw) -> "SceneSpec":
        from dataclasses import replace

        return replace(self, **kw)

    def with_config(self, **kw) -> "SceneSpec":
        from dataclasses import replace

        return replace(self, config=replace(self.config, **kw))


def _validate_scene(spec: SceneSpec) -> list[str]:
    cfg = spec.config
    if not spec.shapes:
        raise SceneError("a scene needs at least one shape", "shapes")
    margin = SHAPE_MARGIN_CELLS * cfg.dx
    hi_bound = np.asarray(cfg.domain) - margin
    for i, s in enumerate(spec.shapes):
        lo, hi = s.bbox()
        if np.any(lo < margin - 1e-12) or np.any(hi > hi_bound + 1e-12):
            raise SceneError(
                f"shape extends past the domain margin ({SHAPE_MARGIN_CELLS} cells from the grid edge)",
                f"shapes[{i}]",
            )
    if spec.controller is not None:
        ids = {s.actuator_id for s in spec.shapes if s.actuator_id is not None}
        for k in spec.controller.actuators:
            if k not in ids:
                raise SceneError(f"actuator id {k} is not assigned to any shape", "controller.actuators")
    if spec.objective is not None:
        groups = {s.group_id for s in spec.shapes}
        for term in spec.objective.walk():
            for g in term.groups or ():
                if g not in groups:
                    raise SceneError(f"group {g} does not exist", "objective.groups")
    notes = []
    bound = stable_dt(spec)
    if cfg.dt > bound:
        notes.append(f"dt={cfg.dt:g} exceeds the estimated stable time step {bound:g}")
    return notes


def scene_from_dict(doc: dict, strict: bool = True) -> SceneSpec:
    _check_keys(doc, TOP_LEVEL, "scene", strict)
    try:
        config = SimConfig.from_dict(doc.get("config", {}), strict)
        shapes = tuple(ShapeSpec.from_dict(s, i, strict) for i, s in enumerate(doc.get("shapes", [])))
        bounds = tuple(BoundarySpec.from_dict(b, i, strict) for i, b in enumerate(doc.get("boundaries", [])))
        ctrl = doc.get("controller")
        ctrl = None if ctrl is None else ControllerSpec.from_dict(ctrl, strict)
        obj = doc.get("objective")
        obj = None if obj is None else LossSpec.from_dict(obj, strict)
    except ControlError as e:
        raise SceneError(str(e)) from None
    except (TypeError, ValueError) as e:
        if isinstance(e, SceneError):
            raise
        raise SceneError(str(e)) from None
    target = doc.get("target")
    spec = SceneSpec(config, shapes, bounds, ctrl, obj, None if target is None else _pair(target, "target"))
    for note in _validate_scene(spec):
        warnings.warn(note, SceneWarning, stacklevel=3)
    return spec


def parse_scene(text: str, strict: bool = True) -> SceneSpec:
    """Parse and validate a JSON scene document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SceneError(f"JSON syntax error at line {e.lineno} column {e.colno} (char {e.pos}): {e.msg}") from None
    return scene_from_dict(doc, strict)


def load_scene(path, strict: bool = True) -> SceneSpec:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"scene file not found: {path}")
    return parse_scene(path.read_text(encoding="utf-8"), strict)


def packaged_scenes() -> list[str]:
    """Names of the scenes shipped with the package."""
    return sorted(p.name[:-5] for p in (resources.files("chainwork") / "scenes").iterdir() if p.name.endswith(".json"))


def packaged_scene(name: str, strict: bool = True) -> SceneSpec:
    if name not in packaged_scenes():
        raise FileNotFoundError(f"no packaged scene {name!r}; available: {', '.join(packaged_scenes())}")
    text = (resources.files("chainwork") / "scenes" / f"{name}.json").read_text(encoding="utf-8")
    return parse_scene(text, strict)


def scene_to_dict(spec: SceneSpec) -> dict:
    out = {
        "config": spec.config.to_dict(),
        "shapes": [s.to_dict() for s in spec.shapes],
        "boundaries": [b.to_dict() for b in spec.boundaries],
    }
    if spec.controller is not None:
        out["controller"] = {k: v for k, v in spec.controller.to_dict().items() if v is not None}
    if spec.objective is not None:
        out["objective"] = spec.objective.to_dict()
    if spec.target is not None:
        out["target"] = list(spec.target)
    return out


def serialize_scene(spec: SceneSpec) -> str:
    return json.dumps(scene_to_dict(spec), indent=2)


def stable_dt(spec: SceneSpec) -> float:
    """Explicit-integration bound ``C dx sqrt(rho / E)``, minimised over shapes."""
    if not spec.shapes:
        raise SceneError("stable_dt needs at least one shape", "shapes")
    dx = spec.config.dx
    return min(CFL_CONSTANT * dx * math.sqrt(s.density / s.youngs_modulus) for s in spec.shapes)


def _lattice(shape: ShapeSpec, cfg: SimConfig, rng):
    k = math.isqrt(cfg.particles_per_cell)
    h = cfg.dx / k
    lo, hi = shape.bbox()
    i0 = np.floor(lo / h).astype(int)
    i1 = np.ceil(hi / h).astype(int)
    ix = np.arange(i0[0], i1[0])
    iy = np.arange(i0[1], i1[1])
    gx, gy = np.meshgrid((ix + 0.5) * h, (iy + 0.5) * h, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    pts = pts[shape.contains(pts)]
    if cfg.jitter > 0:
        pts = pts + (rng.random(pts.shape) - 0.5) * cfg.jitter * h
    return pts


def sample_particles(spec: SceneSpec, dtype=None) -> ParticleState:
    """Seed particles on a jittered sub-cell lattice, one per sub-cell."""
    cfg = spec.config
    dtype = cfg.dtype if dtype is None else dtype
    vol = cfg.dx * cfg.dx / cfg.particles_per_cell
    parts = []
    for i, s in enumerate(spec.shapes):
        rng = np.random.default_rng([cfg.seed, i])
        pts = _lattice(s, cfg, rng)
        if len(pts) == 0:
            raise SceneError("shape produced no particles", f"shapes[{i}]")
        parts.append((s, pts))
    n = sum(len(p) for _, p in parts)
    cols = {k: [] for k in ("x", "v", "mass", "E", "nu", "group", "actuator")}
    for s, pts in parts:
        m = len(pts)
        cols["x"].append(pts)
        cols["v"].append(np.tile(np.asarray(s.initial_velocity, dtype=float), (m, 1)))
        cols["mass"].append(np.full(m, s.density * vol))
        cols["E"].append(np.full(m, s.youngs_modulus))
        cols["nu"].append(np.full(m, s.poisson_ratio))
        cols["group"].append(np.full(m, s.group_id, dtype=np.int64))
        cols["actuator"].append(np.full(m, -1 if s.actuator_id is None else s.actuator_id, dtype=np.int64))
    c = {k: np.concatenate(v) for k, v in cols.items()}
    mu, lam = lame_parameters(c["E"], c["nu"])
    eye = np.broadcast_to(np.eye(2), (n, 2, 2))
    return ParticleState(
        x=c["x"].astype(dtype), v=c["v"].astype(dtype),
        F=np.array(eye, dtype=dtype), C=np.zeros((n, 2, 2), dtype=dtype),
        mass=c["mass"].astype(dtype), vol=np.full(n, vol, dtype=dtype),
        E=c["E"].astype(dtype), nu=c["nu"].astype(dtype),
        mu=mu.astype(dtype), lam=lam.astype(dtype),
        group=c["group"], actuator=c["actuator"],
    )
