import json
from importlib import resources

import numpy as np
import pytest

from chainwork.scene import load_scene, scene_from_dict


def scene_path(name):
    return resources.files("chainwork") / "scenes" / f"{name}.json"


def packaged(name):
    with resources.as_file(scene_path(name)) as p:
        return load_scene(p)


def make_scene(shapes, config=None, boundaries=(), **extra):
    doc = {"config": {"dx": 1 / 32, "grid_res": [32, 32], "dt": 1e-3, "steps": 10, "jitter": 0.0,
                      **(config or {})},
           "shapes": list(shapes), "boundaries": list(boundaries), **extra}
    return scene_from_dict(json.loads(json.dumps(doc)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_F(rng, n, lo=0.5, hi=2.0):
    """Well-conditioned deformation gradients with singular values in [lo, hi]."""
    def rot(t):
        c, s = np.cos(t), np.sin(t)
        return np.array([[c, -s], [s, c]])

    out = np.empty((n, 2, 2))
    for i in range(n):
        U = rot(rng.uniform(0, 2 * np.pi))
        V = rot(rng.uniform(0, 2 * np.pi))
        out[i] = U @ np.diag(rng.uniform(lo, hi, 2)) @ V.T
    return out


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
