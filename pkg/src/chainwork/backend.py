"""Select the transfer-kernel implementation at import time.

The compiled extension ``chainwork._core`` is used when it can be imported;
otherwise the numpy kernels in ``chainwork._transfer`` are used. Setting
``CHAINWORK_BACKEND=python`` forces the fallback.
"""
from __future__ import annotations

import os

import numpy as np

from . import _transfer

try:  # pragma: no cover - depends on the build
    from . import _core
except ImportError:  # pragma: no cover
    _core = None

__all__ = ["NAME", "available", "get", "scatter", "gather", "gather_adjoint", "default_threads"]

available = {"python": _transfer}
if _core is not None:
    available["compiled"] = _core


def _pick():
    want = os.environ.get("CHAINWORK_BACKEND", "").strip().lower()
    if want in available:
        return want
    return "compiled" if "compiled" in available else "python"


NAME = _pick()


def get(name: str | None = None):
    """Kernel module by name (``"compiled"`` or ``"python"``); default is the active one."""
    name = name or NAME
    if name not in available:
        raise ValueError(f"backend {name!r} is not available (have: {sorted(available)})")
    return available[name]


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("CHAINWORK_THREADS", "1")))
    except ValueError:
        return 1


def _c(a, dtype):
    return None if a is None else np.ascontiguousarray(a, dtype=dtype)


def scatter(x, dx, res, a, B, mass=None, nthreads=1, backend=None):
    dt = x.dtype
    return get(backend).scatter(_c(x, dt), float(dx), tuple(res), _c(a, dt), _c(B, dt), _c(mass, dt), int(nthreads))


def gather(x, dx, grid_v, nthreads=1, backend=None):
    dt = x.dtype
    return get(backend).gather(_c(x, dt), float(dx), _c(grid_v, dt), int(nthreads))


def gather_adjoint(x, dx, grid_v, grid_gp, grid_gm, gv, kgC, mass, mv, G, nthreads=1, backend=None):
    dt = x.dtype
    args = [_c(a, dt) for a in (grid_v, grid_gp, grid_gm, gv, kgC, mass, mv, G)]
    return get(backend).gather_adjoint(_c(x, dt), float(dx), *args, int(nthreads))
