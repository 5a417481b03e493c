import numpy as np
import pytest

from xpbi.constitutive import DruckerPrager, ElasticParams, MaterialModel, return_map
from xpbi.geometry import Box, HalfSpace
from xpbi.particles import ParticleSet, lattice_sample
from xpbi.solver import (Collider, SimulationError, SolverConfig, World, constraint_gradients,
                         evaluate_constraint, finalize_state, prepare_step, residual_norm,
                         solve_boundary, solve_distance_constraint, solve_inelastic_constraint, step,
                         trial_deformation, velocity_gradient, xsph_smooth)

ELASTIC = MaterialModel(1000.0, ElasticParams(1e5, 0.3))


def _cloud(n=30, seed=0, dim=3, r=0.1):
    rng = np.random.default_rng(seed)
    x = np.zeros((n, 3))
    x[:, :dim] = rng.uniform(0, 3 * r, (n, dim))
    vols = rng.uniform(0.5, 1.5, n) * r ** dim
    return ParticleSet.create(x, vols, 1000.0 * vols, dim=dim), World([ELASTIC], r, dim)


def _block(r=0.05, dim=3, size=0.3):
    hi = (size,) * dim
    x = lattice_sample(Box((0,) * dim, hi), r, dim)
    V0 = size ** dim / len(x)
    return ParticleSet.create(x, V0, 1000.0 * V0, dim=dim), World([ELASTIC], r, dim)


def test_config_validation():
    SolverConfig()
    for kw in ({"dt": 0}, {"iterations": 0}, {"backend": "sor"}, {"xsph_c": -1}, {"gap_factor": 1.0},
               {"correction_cutoff": 0.0}, {"residual_tol": 0.0}):
        with pytest.raises(ValueError):
            SolverConfig(**kw)
    assert SolverConfig(backend="jacobi").backend == "jacobi"
    assert SolverConfig(gravity=(0, -1)).gravity == (0.0, -1.0, 0.0)
    assert SolverConfig().xsph_c == 0.01 and SolverConfig().gap_factor == 0.25


def test_velocity_gradient_fields():
    s, w = _cloud()
    ctx = prepare_step(s, w, 1e-3)
    s.v[:] = [1.0, -2.0, 0.5]
    for p in range(s.n):
        assert np.max(np.abs(velocity_gradient(p, s, ctx))) <= 1e-12
    rng = np.random.default_rng(1)
    A = rng.standard_normal((3, 3))
    s.v[:] = s.x @ A.T + 1.0
    omega = np.array([0.3, -1.0, 2.0])
    errs = []
    for p in range(s.n):
        if len(ctx.table.neighbors(p)) >= 6:
            errs.append(np.max(np.abs(velocity_gradient(p, s, ctx) - A)))
    assert max(errs) <= 1e-9
    s.v[:] = np.cross(omega, s.x)
    for p in range(s.n):
        if len(ctx.table.neighbors(p)) >= 6:
            G = velocity_gradient(p, s, ctx)
            assert np.max(np.abs(G + G.T)) <= 1e-9


def test_isolated_particle_has_zero_gradient():
    s = ParticleSet.create([[0, 0, 0], [5, 0, 0]], 1.0, 1.0, v=[[0, 0, 0], [1, 0, 0]])
    w = World([ELASTIC], 0.1)
    ctx = prepare_step(s, w, 1e-3)
    assert np.all(velocity_gradient(0, s, ctx) == 0.0)
    g = constraint_gradients(0, s, ctx, np.eye(3))
    assert len(g) == 1 and g[0][0] == 0 and np.all(g[0][1] == 0)


def test_trial_deformation():
    rng = np.random.default_rng(2)
    F = np.eye(3) + 0.1 * rng.standard_normal((3, 3))
    np.testing.assert_array_equal(trial_deformation(F, np.zeros((3, 3)), 0.1), F)
    np.testing.assert_allclose(trial_deformation(np.eye(3), 2.0 * np.eye(3), 0.1), 1.2 * np.eye(3))
    G = rng.standard_normal((3, 3))
    dt = 1e-5
    det = np.linalg.det(trial_deformation(F, G, dt))
    assert abs(det - (1 + dt * np.trace(G)) * np.linalg.det(F)) <= 10 * dt * dt * np.linalg.norm(G) ** 2
    with pytest.raises(ValueError):
        trial_deformation(F, G, 0.0)


def test_constraint_gradients_sum_to_zero():
    s, w = _cloud(seed=3)
    rng = np.random.default_rng(3)
    s.v[:] = rng.standard_normal((s.n, 3))
    ctx = prepare_step(s, w, 1e-2)
    for p in range(s.n):
        C, dC, _ = evaluate_constraint(p, s, ctx, w)
        grads = constraint_gradients(p, s, ctx, dC)
        assert grads[-1][0] == p
        total = sum(g for _, g in grads)
        assert np.max(np.abs(total)) <= 1e-12 * max(1.0, max(np.max(np.abs(g)) for _, g in grads))


def test_zero_constraint_is_skipped():
    s, w = _cloud(seed=4)
    ctx = prepare_step(s, w, 1e-3)
    v0 = s.v.copy()
    dlam, upd, _ = solve_inelastic_constraint(0, s, ctx, w)
    assert dlam == 0.0 and upd == {} and np.array_equal(s.v, v0)


def test_inelastic_update_conserves_momentum():
    s, w = _cloud(seed=5)
    rng = np.random.default_rng(5)
    s.v[:] = rng.standard_normal((s.n, 3))
    ctx = prepare_step(s, w, 1e-2)
    for p in range(s.n):
        _, upd, _ = solve_inelastic_constraint(p, s, ctx, w)
        dp = sum(s.m[b] * dv for b, dv in upd.items()) if upd else np.zeros(3)
        assert np.max(np.abs(dp)) <= 1e-12 * max(1.0, max(s.m[b] * np.abs(dv).max() for b, dv in upd.items()))


def test_two_particle_stretch_residual_decreases():
    r = 0.1
    s = ParticleSet.create([[0, 0, 0], [0.15, 0, 0]], r ** 3, 1000 * r ** 3, v=[[-1, 0, 0], [1, 0, 0]])
    w = World([ELASTIC], r)
    ctx = prepare_step(s, w, 1e-2)
    alpha = 1.0 / (s.V0[0] * ctx.dt ** 2)
    C0, _, _ = evaluate_constraint(0, s, ctx, w)
    before = abs(C0 + alpha * s.lam[0])
    dlam, _, _ = solve_inelastic_constraint(0, s, ctx, w)
    C1, _, _ = evaluate_constraint(0, s, ctx, w)
    assert dlam < 0
    assert abs(C1 + alpha * s.lam[0]) < before
    # the two velocities moved towards each other
    assert s.v[0, 0] > -1 and s.v[1, 0] < 1


def test_constraint_uses_projected_F_of_the_same_iteration():
    dp = MaterialModel(1000.0, ElasticParams(1e5, 0.3), DruckerPrager(30.0))
    s, _ = _cloud(seed=6)
    w = World([dp], 0.1)
    rng = np.random.default_rng(6)
    s.v[:] = 3.0 * rng.standard_normal((s.n, 3))
    ctx = prepare_step(s, w, 1e-2)
    for p in range(s.n):
        Ft = trial_deformation(s.F[p], velocity_gradient(p, s, ctx), ctx.dt)
        expected = return_map(dp, Ft, ctx.dt)
        _, _, F_used = solve_inelastic_constraint(p, s, ctx, w)
        assert np.max(np.abs(F_used - expected)) <= 1e-12


def test_distance_constraint():
    s = ParticleSet.create([[0, 0, 0], [0.2, 0, 0]], 1.0, 1.0)
    dva, dvb, fb = solve_distance_constraint(0, 1, s, 0.1, 0.025, 1e-2)
    assert np.all(dva == 0) and np.all(dvb == 0) and not fb
    s = ParticleSet.create([[0, 0, 0], [0.05, 0, 0]], 1.0, 1.0)
    dva, dvb, fb = solve_distance_constraint(0, 1, s, 0.1, 0.025, 1e-2)
    np.testing.assert_allclose(dva, -dvb)
    # closing a 0.025 gap split evenly over dt
    np.testing.assert_allclose(dva, [-1.25, 0, 0])
    assert np.linalg.norm(s.x[1] + 1e-2 * s.v[1] - s.x[0] - 1e-2 * s.v[0]) == pytest.approx(0.075)
    s = ParticleSet.create([[0, 0, 0], [0, 0, 0]], 1.0, 1.0)
    dva, dvb, fb = solve_distance_constraint(0, 1, s, 0.1, 0.025, 1e-2)
    assert fb and dva[0] != 0 and dva[1] == dva[2] == 0
    with pytest.raises(ValueError):
        solve_distance_constraint(0, 0, s, 0.1, 0.025, 1e-2)


def test_boundary_floor():
    floor = Collider(HalfSpace((0, 0, 0), (0, 1, 0)))
    s = ParticleSet.create([[0, 0.1, 0]], 1.0, 1.0, v=[[0.5, -1.0, 0]])
    assert np.all(solve_boundary(0, floor, s, 0.01) == 0)
    s = ParticleSet.create([[0, 0.005, 0]], 1.0, 1.0, v=[[0.5, -1.0, 0]])
    solve_boundary(0, floor, s, 0.01)
    assert s.x[0, 1] + 0.01 * s.v[0, 1] == pytest.approx(0.0, abs=1e-12)
    assert s.v[0, 0] == 0.5
    sticky = Collider(HalfSpace((0, 0, 0), (0, 1, 0)), friction=np.inf)
    s = ParticleSet.create([[0, 0.005, 0]], 1.0, 1.0, v=[[0.5, -1.0, 0]])
    solve_boundary(0, sticky, s, 0.01)
    assert s.v[0, 0] == 0.0
    assert s.x[0, 1] + 0.01 * s.v[0, 1] == pytest.approx(0.0, abs=1e-12)


def test_boundary_coulomb_friction():
    floor = Collider(HalfSpace((0, 0, 0), (0, 1, 0)), friction=0.5)
    s = ParticleSet.create([[0, 0.0, 0]], 1.0, 1.0, v=[[1.0, -1.0, 0]])
    solve_boundary(0, floor, s, 0.01)
    # normal push of 1 m/s removes 0.5 m/s of sliding
    assert s.v[0, 0] == pytest.approx(0.5)
    assert s.v[0, 1] == pytest.approx(0.0, abs=1e-9)


def test_collider_inside_flag():
    c = Collider(Box((0, 0, 0), (1, 1, 1)), inside=True)
    assert c.signed_distance([0.5, 0.5, 0.5]) > 0
    assert c.signed_distance([2, 0.5, 0.5]) < 0
    with pytest.raises(ValueError):
        Collider(Box((0, 0, 0), (1, 1, 1)), friction=-1)


def test_xsph():
    s, w = _cloud(seed=7)
    s.v[:] = [0.3, 0.2, 0.1]
    ctx = prepare_step(s, w, 1e-3)
    xsph_smooth(s, ctx, 0.5)
    np.testing.assert_allclose(s.v, 0.3 * (s.v[:, :1] * 0 + 1) * [1, 2 / 3, 1 / 3], rtol=0, atol=1e-15)
    rng = np.random.default_rng(7)
    s.v[:] = rng.standard_normal((s.n, 3))
    v0 = s.v.copy()
    xsph_smooth(s, ctx, 0.0)
    np.testing.assert_array_equal(s.v, v0)
    r = 0.1
    two = ParticleSet.create([[0, 0, 0], [0.1, 0, 0]], r ** 3, 1.0, v=[[1, 0, 0], [-1, 0, 0]])
    ctx = prepare_step(two, World([ELASTIC], r), 1e-3)
    xsph_smooth(two, ctx, 0.01)
    assert abs(two.v[0, 0]) < 1 and abs(two.v[1, 0]) < 1
    assert np.max(np.abs(two.momentum())) <= 1e-12


def test_finalize_rest_and_translation():
    s, w = _block()
    ctx = prepare_step(s, w, 1e-3)
    x0, F0 = s.x.copy(), s.F.copy()
    finalize_state(s, ctx, w, 1e-3)
    np.testing.assert_array_equal(s.x, x0)
    np.testing.assert_array_equal(s.F, F0)
    assert s.step == 1 and s.time == 1e-3
    s.v[:] = [1.0, 2.0, 3.0]
    ctx = prepare_step(s, w, 1e-3)
    finalize_state(s, ctx, w, 1e-3)
    np.testing.assert_allclose(s.x, x0 + 1e-3 * np.array([1.0, 2.0, 3.0]), atol=1e-15)
    assert np.max(np.abs(s.F - F0)) <= 1e-13


def test_residual_zero_at_rest():
    s, w = _block()
    ctx = prepare_step(s, w, 1e-3)
    assert residual_norm(s, ctx, w) == 0.0


def test_single_particle_ballistic():
    s = ParticleSet.create([[0, 1, 0]], 1.0, 1.0, v=[[1, 0, 0]])
    w = World([ELASTIC], 0.1)
    cfg = SolverConfig(dt=0.01)
    s2, diag = step(s, cfg, w)
    np.testing.assert_allclose(s2.v[0], [1, -0.0981, 0])
    np.testing.assert_allclose(s2.x[0], [0.01, 1 - 0.000981, 0])
    assert s.x[0, 1] == 1.0  # not in place
    assert diag.iterations == 10


def test_nan_aborts_with_snapshot():
    s, w = _block()
    s.v[3, 0] = np.nan
    with pytest.raises(SimulationError) as err:
        step(s, SolverConfig(), w, inplace=True)
    assert 3 in err.value.snapshot["particles"]


def test_adaptive_iterations_stop_early():
    s, w = _block(dim=2, r=0.05, size=0.5)
    cfg = SolverConfig(dt=5e-3, iterations=200, residual_tol=1e-3, gravity=(0, -9.81))
    s.v[:, 0] = s.x[:, 1]  # shear
    _, diag = step(s, cfg, w)
    assert diag.iterations < 200
    assert diag.relative_residuals[-1] <= 1e-3


@pytest.mark.parametrize("backend", ["gs", "jacobi"])
def test_runs_are_bitwise_repeatable(backend):
    s, w = _block(dim=2, r=0.05, size=0.5)
    s.v[:, 0] = s.x[:, 1]
    cfg = SolverConfig(dt=2e-3, backend=backend)
    a, b = s.copy(), s.copy()
    for _ in range(3):
        a, _ = step(a, cfg, w, inplace=True)
        b, _ = step(b, cfg, w, inplace=True)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.F, b.F)


def test_pinned_particles_stay_put():
    s, w = _block(dim=2, r=0.05, size=0.5)
    pinned = s.x[:, 0] < 0.06
    s.inv_mass[pinned] = 0.0
    x0 = s.x.copy()
    for _ in range(5):
        s, _ = step(s, SolverConfig(dt=1e-3, gravity=(0, -9.81)), w, inplace=True)
    np.testing.assert_array_equal(s.x[pinned], x0[pinned])
    assert np.all(s.x[~pinned, 1] < x0[~pinned, 1])


def test_extra_constraint_hook_and_external_force():
    calls = []
    s, w = _block(dim=2, r=0.05, size=0.5)
    w.extra_constraints.append(lambda st, dt: calls.append(dt))
    w.external_force = lambda st: np.tile([1.0, 0, 0], (st.n, 1)) * st.m[:, None]
    s2, _ = step(s, SolverConfig(dt=1e-3, iterations=4, gravity=(0, 0), xsph_c=0), w)
    assert len(calls) == 4
    np.testing.assert_allclose(s2.v[:, 0], 1e-3, rtol=1e-9)
