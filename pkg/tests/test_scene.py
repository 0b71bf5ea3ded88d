import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chainwork.scene import (
    SceneError, SceneWarning, load_scene, parse_scene, sample_particles, scene_from_dict, scene_to_dict,
    serialize_scene, stable_dt,
)

from conftest import make_scene, packaged

BOX = {"kind": "box", "center": [0.5, 0.5], "size": [0.25, 0.25], "density": 2.0}


def test_packaged_scenes_load():
    for name in ("billiards", "finger", "walker", "freefall", "cube_bench", "arm"):
        s = packaged(name)
        assert s.shapes
        assert sample_particles(s).n > 0


def test_cube_bench_has_6400_particles():
    assert sample_particles(packaged("cube_bench")).n == 6400


def test_round_trip_is_identity():
    for name in ("billiards", "finger", "walker", "arm"):
        s = packaged(name)
        assert parse_scene(serialize_scene(s)) == s


def test_sampling_deterministic_and_masses():
    s = make_scene([BOX], {"jitter": 1.0, "seed": 3})
    a, b = sample_particles(s), sample_particles(s)
    assert np.array_equal(a.x, b.x)
    # 8x8 cells of 4 particles each; total mass = density * area
    assert a.n == 256
    assert np.isclose(a.mass.sum(), 2.0 * 0.25 * 0.25)
    assert np.allclose(a.F, np.eye(2)) and np.allclose(a.C, 0)
    c = sample_particles(s.with_config(seed=4))
    assert not np.array_equal(a.x, c.x)


def test_ball_sampling_inside():
    s = make_scene([{"kind": "ball", "center": [0.5, 0.5], "radius": 0.2}])
    p = sample_particles(s)
    assert (np.linalg.norm(p.x - 0.5, axis=1) < 0.2).all()
    assert abs(p.n * (1 / 32) ** 2 / 4 - np.pi * 0.04) / (np.pi * 0.04) < 0.05


def test_group_and_actuator_ids():
    s = make_scene([dict(BOX, center=[0.3, 0.5], size=[0.1, 0.1], group_id=5, actuator_id=2),
                    dict(BOX, center=[0.7, 0.5], size=[0.1, 0.1])])
    p = sample_particles(s)
    assert set(p.group) == {5, 1}
    assert set(p.actuator) == {2, -1}


def test_f32_precision():
    s = make_scene([BOX], {"precision": "f32"})
    assert sample_particles(s).x.dtype == np.float32


@pytest.mark.parametrize("doc,field", [
    ({"config": {"dx": -1}}, "config.dx"),
    ({"config": {"precision": "f16"}}, "config.precision"),
    ({"config": {"particles_per_cell": 3}}, "config.particles_per_cell"),
    ({"config": {"bogus": 1}}, "config"),
    ({"shapes": [{"kind": "box", "center": [0.5, 0.5]}]}, "shapes[0].size"),
    ({"shapes": [dict(BOX, poisson_ratio=0.5)]}, "shapes[0].poisson_ratio"),
    ({"shapes": [dict(BOX, youngs_modulus=0)]}, "shapes[0].youngs_modulus"),
    ({"shapes": [dict(BOX, kind="tri")]}, "shapes[0].kind"),
    ({"shapes": [dict(BOX, center=[0.05, 0.5])]}, "shapes[0]"),
    ({"shapes": [BOX], "boundaries": [{"kind": "glue", "wall": "left"}]}, "boundaries[0].kind"),
    ({"shapes": [BOX], "boundaries": [{"kind": "slip", "normal": [1, 1], "point": [0, 0]}]}, "boundaries[0].normal"),
])
def test_invalid_fields_named(doc, field):
    doc = {"config": {"grid_res": [32, 32], "dx": 1 / 32}, "shapes": [BOX], **doc}
    doc["config"] = {"grid_res": [32, 32], "dx": 1 / 32, **doc["config"]}
    with pytest.raises(SceneError) as e:
        scene_from_dict(doc)
    assert e.value.field == field


def test_unknown_fields_tolerated_when_not_strict():
    doc = {"config": {"grid_res": [32, 32], "dx": 1 / 32, "extra": 1}, "shapes": [dict(BOX, colour="red")]}
    scene_from_dict(doc, strict=False)


def test_controller_actuator_must_exist():
    with pytest.raises(SceneError):
        make_scene([BOX], controller={"actuators": [0], "stress_scale": 1.0})


def test_objective_group_must_exist():
    with pytest.raises(SceneError):
        make_scene([BOX], objective={"kind": "final_com_distance", "groups": [7]})


def test_json_syntax_error_location():
    with pytest.raises(SceneError, match="line 2"):
        parse_scene('{"config":\n {,}}')


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="scene file not found"):
        load_scene(tmp_path / "nope.json")


def test_unstable_dt_warns():
    with pytest.warns(SceneWarning, match="stable time step"):
        make_scene([dict(BOX, youngs_modulus=1e6)], {"dt": 1e-2})


def test_stable_dt_formula():
    s = make_scene([dict(BOX, density=4.0, youngs_modulus=100.0)])
    assert np.isclose(stable_dt(s), 0.5 * (1 / 32) * np.sqrt(4.0 / 100.0))


@settings(max_examples=30, deadline=None)
@given(cx=st.floats(0.3, 0.7), cy=st.floats(0.3, 0.7), w=st.floats(0.05, 0.3), h=st.floats(0.05, 0.3),
       rho=st.floats(0.1, 10), ppc=st.sampled_from([1, 4, 9]))
def test_box_mass_property(cx, cy, w, h, rho, ppc):
    """Lattice sampling of a box conserves density * (lattice-covered area)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SceneWarning)
        s = make_scene([{"kind": "box", "center": [cx, cy], "size": [w, h], "density": rho}],
                       {"particles_per_cell": ppc})
    p = sample_particles(s)
    assert np.isclose(p.mass.sum(), rho * p.n * (1 / 32) ** 2 / ppc)
    lo, hi = np.array([cx - w / 2, cy - h / 2]), np.array([cx + w / 2, cy + h / 2])
    assert ((p.x >= lo - 1e-12) & (p.x < hi)).all()
    # round trip survives arbitrary floats
    assert scene_from_dict(json.loads(json.dumps(scene_to_dict(s)))) == s


def test_packaged_scene_lookup():
    from chainwork.scene import packaged_scene, packaged_scenes

    names = packaged_scenes()
    assert {"freefall", "billiards", "finger", "walker", "arm", "cube_bench"} <= set(names)
    assert packaged_scene("billiards") == packaged("billiards")
    with pytest.raises(FileNotFoundError, match="available"):
        packaged_scene("nope")
