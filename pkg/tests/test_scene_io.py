import hashlib
import json
import math

import numpy as np
import pytest

from xpbi.particles import ParticleSet
from xpbi.scene_io import (Frame, SceneError, bundled_scenes, compute_metrics, instantiate,
                           nearest_neighbor_distances, parse_scene, read_frame, resolve_scene,
                           scene_from_dict, scene_to_dict, serialize_scene, write_frame)


def _base():
    return {
        "version": 1, "name": "t", "dim": 2, "particle_radius": 0.01,
        "materials": {"sand": {"model": "DP", "params": [1, 3.537e5, 0.3, 35, 0]}},
        "geometry": [{"shape": {"type": "box", "min": [0, 0], "max": [0.1, 0.1]}, "material": "sand"}],
        "solver": {"dt": 1e-4, "iterations": 5},
        "duration": 0.1, "frame_rate": 10,
    }


def test_hourglass_parameters_echo():
    spec = parse_scene(bundled_scenes()["hourglass_lite"])
    m = spec.materials["sand"]
    assert m.tag == "DP"
    assert m.as_tuple() == pytest.approx((1, 3.537e5, 0.3, 35, 0))
    assert spec.solver.dt == 1e-4 and spec.solver.iterations == 5


def test_defaults_filled():
    spec = scene_from_dict(_base())
    assert spec.solver.xsph_c == 0.01 and spec.solver.gap_factor == 0.25
    assert spec.seed == 0 and spec.colliders == []


def test_unknown_tag_lists_alternatives():
    d = _base()
    d["materials"]["sand"]["model"] = "XYZ"
    with pytest.raises(SceneError) as err:
        scene_from_dict(d)
    msg = str(err.value)
    assert msg.startswith("materials.sand.model")
    assert "XYZ" in msg and "DP" in msg and "VM" in msg


def test_incompressible_poisson_ratio_rejected():
    d = _base()
    d["materials"]["sand"]["params"][2] = 0.5
    with pytest.raises(SceneError) as err:
        scene_from_dict(d)
    assert str(err.value).startswith("materials.sand.params")


@pytest.mark.parametrize("mutate, where", [
    (lambda d: d.pop("particle_radius"), "particle_radius"),
    (lambda d: d["solver"].__setitem__("dt", -1e-3), "solver.dt"),
    (lambda d: d["geometry"][0].pop("material"), "geometry[0].material"),
    (lambda d: d["geometry"][0]["shape"].pop("max"), "geometry[0].shape"),
    (lambda d: d.__setitem__("dim", 4), "dim"),
    (lambda d: d.__setitem__("version", 9), "version"),
    (lambda d: d["solver"].__setitem__("bogus", 1), "solver.bogus"),
    (lambda d: d["solver"].__setitem__("iterations", 2.5), "solver.iterations"),
    (lambda d: d["geometry"][0].__setitem__("material", "clay"), "geometry[0].material"),
    (lambda d: d.__setitem__("colliders", [{"shape": {"type": "half_space", "point": [0, 0], "normal": [0, 1]},
                                            "friction": -1}]), "colliders[0].friction"),
])
def test_errors_are_path_qualified(mutate, where):
    d = _base()
    mutate(d)
    with pytest.raises(SceneError) as err:
        scene_from_dict(d)
    assert err.value.path.startswith(where)


def test_parse_file_errors(tmp_path):
    with pytest.raises(SceneError):
        parse_scene(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{ not json")
    with pytest.raises(SceneError) as err:
        parse_scene(bad)
    assert "line 1" in str(err.value)
    with pytest.raises(SceneError):
        resolve_scene("no_such_scene")
    assert resolve_scene("sand_column").name == "sand_column.json"


@pytest.mark.parametrize("name", sorted(bundled_scenes()))
def test_bundled_round_trip(name, tmp_path):
    spec = parse_scene(bundled_scenes()[name])
    out = tmp_path / "s.json"
    serialize_scene(spec, out)
    again = parse_scene(out)
    assert scene_to_dict(again) == scene_to_dict(spec)
    assert 1_000 <= instantiate(spec)[0].n <= 10_000 or name == "hourglass_lite"


def test_infinite_friction_serializes_as_text():
    d = _base()
    d["colliders"] = [{"shape": {"type": "half_space", "point": [0, 0], "normal": [0, 1]}, "friction": "inf"}]
    spec = scene_from_dict(d)
    assert math.isinf(spec.colliders[0].friction)
    assert json.loads(serialize_scene(spec))["colliders"][0]["friction"] == "inf"


def test_instantiate_mass_and_seed():
    spec = scene_from_dict(_base())
    a, world, cfg = instantiate(spec)
    b, _, _ = instantiate(spec)
    assert np.array_equal(a.x, b.x)
    assert a.m.sum() == pytest.approx(1 * 0.01)
    assert world.dim == 2 and np.all(a.x[:, 2] == 0)


@pytest.mark.parametrize("n", [3, 0, 10_000])
@pytest.mark.parametrize("fmt", ["binary", "csv"])
def test_frame_round_trip(n, fmt, tmp_path):
    if fmt == "csv" and n > 100:
        n = 100
    rng = np.random.default_rng(n)
    fr = Frame(7, 0.125, rng.standard_normal((n, 3)), rng.standard_normal((n, 3)), rng.random(n))
    path = write_frame(fr, tmp_path / f"f.{fmt}", fmt)
    back = read_frame(path)
    assert back.count == n and back.step == 7 and back.time == 0.125
    assert np.array_equal(back.x, fr.x) and np.array_equal(back.v, fr.v)
    assert np.array_equal(back.det_F, fr.det_F) and back.yield_flags is None


def test_frame_errors(tmp_path):
    fr = Frame(0, 0.0, np.zeros((2, 3)))
    with pytest.raises(OSError) as err:
        write_frame(fr, tmp_path / "nodir" / "f.bin")
    assert "nodir" in str(err.value)
    with pytest.raises(ValueError):
        write_frame(fr, tmp_path / "f.x", "xml")
    p = write_frame(fr, tmp_path / "f.bin")
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ValueError):
        read_frame(p)


def _lattice(s, n=6, dim=3):
    ax = [np.arange(n) * s] * dim + [np.zeros(1)] * (3 - dim)
    x = np.stack(np.meshgrid(*ax, indexing="ij"), -1).reshape(-1, 3)
    return ParticleSet.create(x, s ** dim, 1000 * s ** dim, dim=dim)


@pytest.mark.parametrize("dim", [2, 3])
def test_lattice_metrics(dim):
    s = 0.05
    st = _lattice(s, dim=dim)
    m = compute_metrics(st, s)
    assert m.valid and m.nn_mean == pytest.approx(s, rel=1e-12) and m.nn_std <= 1e-12
    n = 6
    idx = np.indices((n,) * dim).reshape(dim, -1).T
    interior = np.all((idx >= 2) & (idx <= n - 3), axis=1)
    vals = m.density[interior]
    assert np.max(vals) - np.min(vals) <= 1e-12 * np.max(vals)
    assert m.max_density == pytest.approx(m.density.max())


def test_nn_matches_brute_force():
    rng = np.random.default_rng(11)
    x = rng.random((300, 3))
    d = np.linalg.norm(x[:, None] - x[None], axis=2)
    np.fill_diagonal(d, np.inf)
    np.testing.assert_allclose(nearest_neighbor_distances(x), d.min(axis=1), rtol=0, atol=1e-15)


def test_metrics_undefined_below_two_particles():
    one = ParticleSet.create([[0, 0, 0]], 1.0, 1.0)
    m = compute_metrics(one, 0.1)
    assert not m.valid and m.nn_mean == 0.0 and not np.isnan(m.nn_std)
    empty = ParticleSet.empty(3)
    assert not compute_metrics(empty, 0.1).valid


def test_metrics_read_only():
    st = _lattice(0.05)
    st.v[:] = 1.0

    def digest(s):
        return hashlib.sha256(b"".join(a.tobytes() for a in (s.x, s.v, s.F, s.m, s.V0))).hexdigest()

    before = digest(st)
    compute_metrics(st, 0.05)
    assert digest(st) == before
