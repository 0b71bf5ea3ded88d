"""Grid-node boundary conditions: sticky, slip and Coulomb-like friction.

Each condition acts on the nodes lying in a half-space ``(x_i - point) . n <= 0``
where ``n`` is the unit normal pointing out of the obstacle into free space.
Conditions are applied in declaration order; a node covered by two walls
(a corner) sees both projections in sequence.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STICKY, SLIP, FRICTION = "sticky", "slip", "friction"


def eps_for(dtype) -> float:
    return 1e-7 if np.dtype(dtype) == np.float32 else 1e-12


def project(kind, v, n, c=0.0, eps=1e-12):
    """Project node velocities ``v`` (shape ``(k, 2)``) for one condition."""
    if kind == STICKY:
        return np.zeros_like(v)
    ln = v @ n
    if kind == SLIP:
        return v - np.minimum(ln, 0.0)[:, None] * n
    vt = v - ln[:, None] * n
    lt = np.sqrt((vt * vt).sum(axis=1) + eps)
    vhat = vt / lt[:, None]
    lt_star = np.maximum(lt + c * np.minimum(ln, 0.0), 0.0)
    return lt_star[:, None] * vhat + np.maximum(ln, 0.0)[:, None] * n


def project_vjp(kind, v, n, c, eps, g):
    """Pull back ``g = dL/dv*`` through :func:`project` evaluated at pre-projection ``v``.

    Heaviside factors use ``H(x) = [x >= 0]``.
    """
    if kind == STICKY:
        return np.zeros_like(g)
    ln = v @ n
    if kind == SLIP:
        active = ln < 0
        gn = g @ n
        return g - np.where(active, gn, 0.0)[:, None] * n
    vt = v - ln[:, None] * n
    lt = np.sqrt((vt * vt).sum(axis=1) + eps)
    vhat = vt / lt[:, None]
    R = lt + c * np.minimum(ln, 0.0)
    lt_star = np.maximum(R, 0.0)
    H_R = (R >= 0).astype(v.dtype)
    H_neg = (-ln >= 0).astype(v.dtype)
    H_pos = (ln >= 0).astype(v.dtype)

    g_ltstar = (g * vhat).sum(axis=1)
    g_vhat = g * lt_star[:, None]
    g_lt = -(vt * g_vhat).sum(axis=1) / (lt * lt) + g_ltstar * H_R
    g_vt = (g_lt[:, None] * vt + g_vhat) / lt[:, None]
    g_ln = -(g_vt @ n) + g_ltstar * H_R * c * H_neg + H_pos * (g @ n)
    return g_ln[:, None] * n + g_vt


@dataclass(frozen=True)
class NodeCondition:
    kind: str
    normal: np.ndarray
    friction: float
    nodes: np.ndarray  # flat node indices


@dataclass(frozen=True)
class BoundaryField:
    """Boundary conditions resolved to node index sets for one grid."""

    conditions: tuple[NodeCondition, ...]
    res: tuple[int, int]

    def __bool__(self):
        return bool(self.conditions)

    def apply(self, v_flat, active_flat, eps):
        """Apply all conditions in place on the ``(n_nodes, 2)`` velocity array."""
        for cond in self.conditions:
            idx = cond.nodes[active_flat[cond.nodes]]
            if idx.size:
                v_flat[idx] = project(cond.kind, v_flat[idx], cond.normal, cond.friction, eps)
        return v_flat

    def vjp(self, v_pre_flat, active_flat, g_flat, eps):
        """Map ``dL/dv`` (post-projection) to ``dL/dv`` (pre-projection)."""
        stages = []
        v = v_pre_flat.copy()
        for cond in self.conditions:
            idx = cond.nodes[active_flat[cond.nodes]]
            stages.append((cond, idx, v[idx].copy()))
            if idx.size:
                v[idx] = project(cond.kind, v[idx], cond.normal, cond.friction, eps)
        g = g_flat.copy()
        for cond, idx, vin in reversed(stages):
            if idx.size:
                g[idx] = project_vjp(cond.kind, vin, cond.normal, cond.friction, eps, g[idx])
        return g


def resolve(boundaries, res, dx, dtype=np.float64) -> BoundaryField:
    """Turn boundary specs into per-node index sets on a ``res`` grid."""
    gx, gy = np.meshgrid(np.arange(res[0]) * dx, np.arange(res[1]) * dx, indexing="ij")
    pos = np.stack([gx.ravel(), gy.ravel()], axis=1)
    conds = []
    for b in boundaries:
        for normal, point in b.planes(res, dx):
            n = np.asarray(normal, dtype=float)
            # nodes exactly on the plane count as inside
            inside = (pos - np.asarray(point)) @ n <= 1e-9 * dx
            conds.append(NodeCondition(b.kind, n.astype(dtype), float(b.friction), np.flatnonzero(inside)))
    return BoundaryField(tuple(conds), tuple(res))
