import itertools

import numpy as np
import pytest
from scipy.spatial import cKDTree

from xpbi.geometry import Box, Cylinder, Sphere, Union
from xpbi.oracles import brute_force_neighbors
from xpbi.particles import (ParticleSet, build_neighbor_table, cell_color, lattice_sample,
                            poisson_disk_sample)


def test_particle_set_create_defaults():
    s = ParticleSet.create(np.zeros((4, 3)), 0.5, 2.0)
    assert s.n == 4
    np.testing.assert_array_equal(s.inv_mass, 0.5)
    np.testing.assert_array_equal(s.F, np.tile(np.eye(3), (4, 1, 1)))
    np.testing.assert_array_equal(s.current_volume(), 0.5)


def test_pinned_particles_have_zero_inverse_mass():
    s = ParticleSet.create(np.zeros((3, 3)), 1.0, 1.0, pinned=[True, False, False])
    assert list(s.inv_mass) == [0.0, 1.0, 1.0]


def test_concat_and_copy_are_independent():
    a = ParticleSet.create(np.zeros((2, 3)), 1.0, 1.0)
    b = ParticleSet.create(np.ones((3, 3)), 1.0, 2.0)
    c = a.concat(b)
    assert c.n == 5
    d = c.copy()
    d.x[0, 0] = 9.0
    assert c.x[0, 0] == 0.0
    with pytest.raises(ValueError):
        a.concat(ParticleSet.create(np.zeros((1, 3)), 1.0, 1.0, dim=2))


def test_poisson_deterministic_and_separated():
    box = Box((0, 0, 0), (1, 1, 1))
    a = poisson_disk_sample(box, 0.1, seed=5)
    b = poisson_disk_sample(box, 0.1, seed=5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, poisson_disk_sample(box, 0.1, seed=6))
    d, _ = cKDTree(a).query(a, k=2)
    assert d[:, 1].min() >= 0.1


@pytest.mark.parametrize("shape,dim", [
    (Box((0, 0, 0), (1, 1, 1)), 3),
    (Sphere((0, 0, 0), 0.6), 3),
    (Box((0, 0), (2, 1)), 2),
    (Union((Box((0, 0), (1, 1)), Sphere((1.5, 0.5), 0.5))), 2),
    (Cylinder((0, 0, 0), (0, 0, 1), 0.5, 0.5), 3),
])
def test_poisson_coverage(shape, dim):
    s = 0.08
    pts = poisson_disk_sample(shape, s, seed=1, dim=dim)
    tree = cKDTree(pts[:, :dim])
    lo, hi = shape.bounds(dim)
    rng = np.random.default_rng(0)
    probes = rng.uniform(lo, hi, (4000, dim))
    p3 = np.zeros((len(probes), 3))
    p3[:, :dim] = probes
    from xpbi.geometry import sdf_union, shape_rows
    rows = shape_rows(shape)
    # keep probes whose 2s ball lies strictly inside
    inside = np.array([sdf_union(rows, p) < -2 * s for p in p3])
    d, _ = tree.query(probes[inside])
    assert inside.sum() > 0
    assert d.max() < 2 * s
    if dim == 2:
        assert np.all(pts[:, 2] == 0)


def test_poisson_degenerate_domain_is_empty():
    assert poisson_disk_sample(Box((0, 0, 0), (1, 0, 1)), 0.1).shape == (0, 3)
    with pytest.raises(ValueError):
        poisson_disk_sample(Box((0, 0, 0), (1, 1, 1)), 0.0)


def test_lattice_spacing():
    pts = lattice_sample(Box((0, 0), (1, 0.5)), 0.1, dim=2)
    assert pts.shape == (50, 3)
    d, _ = cKDTree(pts).query(pts, k=2)
    np.testing.assert_allclose(d[:, 1], 0.1)


def test_boundary_distance_is_inclusive():
    t = build_neighbor_table([[0, 0, 0], [0.25, 0, 0]], 0.25)
    assert t.as_lists() == [[1], [0]]


def test_single_and_empty():
    assert build_neighbor_table([[1.0, 2.0, 3.0]], 0.5).as_lists() == [[]]
    assert build_neighbor_table(np.zeros((0, 3)), 0.5).as_lists() == []


@pytest.mark.parametrize("dim", [2, 3])
def test_neighbors_match_brute_force(dim):
    rng = np.random.default_rng(dim)
    for _ in range(10):
        x = np.zeros((1000, 3))
        x[:, :dim] = rng.uniform(-1, 1, (1000, dim))
        t = build_neighbor_table(x, 0.1 if dim == 3 else 0.05, dim)
        lists = t.as_lists()
        assert lists == brute_force_neighbors(x, t.k)
        for p, nb in enumerate(lists):
            for b in nb:
                assert p in lists[b]
        assert t.h_cell == t.k
        assert t.coloring_safe


def test_neighbors_lie_in_adjacent_cells():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, (800, 3))
    t = build_neighbor_table(x, 0.15)
    for p in range(len(x)):
        for b in t.neighbors(p):
            assert np.max(np.abs(t.cells[t.cell_of[b]] - t.cells[t.cell_of[p]])) <= 1


def test_same_colour_cells_never_hold_neighbours():
    rng = np.random.default_rng(1)
    for dim in (2, 3):
        x = np.zeros((1500, 3))
        x[:, :dim] = rng.uniform(0, 1, (1500, dim))
        t = build_neighbor_table(x, 0.12, dim)
        for p in range(len(x)):
            for b in t.neighbors(p):
                cp, cb = t.cell_of[p], t.cell_of[b]
                assert cp == cb or t.cell_colors[cp] != t.cell_colors[cb]


def test_cell_color_formula():
    assert cell_color((0, 0, 0)) == 0
    assert cell_color((1, 0, 0)) == 1
    assert cell_color((0, 0, 0)) == cell_color((2, 0, 0))
    assert cell_color((-1, 3, 1)) == 7
    for d in (2, 3):
        block = list(itertools.product(range(4), repeat=d))
        for a in block:
            for b in block:
                if a != b and max(abs(i - j) for i, j in zip(a, b)) == 1:
                    assert cell_color(a, d) != cell_color(b, d)
        assert {cell_color(c, d) for c in block} == set(range(2 ** d))
