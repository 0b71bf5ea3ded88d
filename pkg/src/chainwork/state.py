"""Particle and grid containers shared by the forward and adjoint passes."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


@dataclass
class ParticleState:
    """Structure-of-arrays particle state.

    ``x, v, F, C`` evolve each step; the remaining arrays are per-particle
    constants and are shared (not copied) between successive states.
    """

    x: np.ndarray
    v: np.ndarray
    F: np.ndarray
    C: np.ndarray
    mass: np.ndarray
    vol: np.ndarray
    E: np.ndarray
    nu: np.ndarray
    mu: np.ndarray
    lam: np.ndarray
    group: np.ndarray
    actuator: np.ndarray

    def __post_init__(self):
        n = self.x.shape[0]
        for name in ("v", "F", "C", "mass", "vol", "E", "nu", "mu", "lam", "group", "actuator"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"particle array {name!r} has length {getattr(self, name).shape[0]}, expected {n}")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dtype(self):
        return self.x.dtype

    def evolve(self, x, v, C, F) -> "ParticleState":
        return replace(self, x=x, v=v, C=C, F=F)

    def copy(self) -> "ParticleState":
        return ParticleState(**{k: np.array(getattr(self, k), copy=True) for k in self.__dataclass_fields__})

    def astype(self, dtype) -> "ParticleState":
        kw = {k: getattr(self, k) for k in self.__dataclass_fields__}
        for k in ("x", "v", "F", "C", "mass", "vol", "E", "nu", "mu", "lam"):
            kw[k] = np.asarray(kw[k], dtype=dtype)
        return ParticleState(**kw)

    def with_material(self, mass=None, E=None) -> "ParticleState":
        """New state with replaced masses and/or Young's moduli (Lame parameters rederived)."""
        from .kernel_math import lame_parameters

        kw = {}
        if mass is not None:
            kw["mass"] = np.asarray(mass, dtype=self.dtype)
        if E is not None:
            E = np.asarray(E, dtype=self.dtype)
            mu, lam = lame_parameters(E, self.nu)
            kw.update(E=E, mu=mu.astype(self.dtype), lam=lam.astype(self.dtype))
        return replace(self, **kw)

    def group_mask(self, groups) -> np.ndarray:
        if groups is None:
            return np.ones(self.n, dtype=bool)
        return np.isin(self.group, np.asarray(list(groups)))


@dataclass
class GridState:
    """Node arrays of one step.

    ``m`` has shape ``res``; ``p``, ``v`` and ``v_pre`` have shape ``res + (2,)``.
    ``v_pre`` is the velocity before boundary projection; ``active`` flags the
    nodes treated as non-empty.
    """

    m: np.ndarray
    p: np.ndarray
    v: np.ndarray | None = None
    v_pre: np.ndarray | None = None
    active: np.ndarray | None = None
    boundary: object = field(default=None, repr=False)

    @property
    def res(self) -> tuple[int, int]:
        return self.m.shape
