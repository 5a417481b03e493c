"""Reference checks for the solver numerics.

The finite-difference and affine-field checks recompute the quantity
under test with plain numpy (numpy's SVD, explicit sums) so that they
share nothing with the compiled solver path except the kernel
functions. Tolerances are module constants; loosening one needs a
changelog entry.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from numba import njit
from scipy.spatial.transform import Rotation

from .constitutive import ElasticParams, MaterialModel, return_map_nb, yield_nb
from .kernels import KernelSpec, correction_matrix, kernel_gradient
from .particles import ParticleSet, build_neighbor_table
from .solver import (SolverConfig, World, constraint_gradients, evaluate_constraint, prepare_step,
                     step, velocity_gradient)

FD_TOL = 1e-4
FD_STEP = 1e-6
FD_DT = 1e-3
AFFINE_TOL = 1e-9
IDEMPOTENCE_TOL = 1e-10
YIELD_TOL = 1e-8
EQUIVARIANCE_TOL = 1e-8
VOLUME_TOL = 1e-8
HB_LIMIT_TOL = 1e-6
# the small-dt deviation is first order in dt times the plastic strain rate
HB_ZERO_TOL = 1e-4
HB_DT_SMALL = 1e-8
HB_DT_LARGE = 1e8


@dataclass
class OracleReport:
    name: str
    max_error: float
    tolerance: float
    samples: int
    details: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.max_error <= self.tolerance)

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag} {self.name}: max_error={self.max_error:.3e} tol={self.tolerance:.1e} n={self.samples}"

    def csv_row(self):
        return [self.name, self.max_error, self.tolerance, int(self.passed), self.samples]


# --------------------------------------------------------------------------
# reference constraint via numpy


def _hencky_C(F: np.ndarray, mu: float, lam: float) -> float:
    s = np.linalg.svd(F, compute_uv=False)
    eps = np.log(np.maximum(s, 1e-6))
    psi = mu * np.sum(eps * eps) + 0.5 * lam * np.sum(eps) ** 2
    return float(np.sqrt(max(2.0 * psi, 0.0)))


def _reference_C(p, x, v, F, vols, spec: KernelSpec, neighbors, dt, mu, lam, dim):
    """C_p recomputed from scratch: corrected gradient sum, trial F, Hencky energy."""
    L = correction_matrix(spec, x[p], [(x[b], vols[b]) for b in neighbors])
    G = np.zeros((3, 3))
    for b in neighbors:
        G += vols[b] * np.outer(v[b] - v[p], L @ kernel_gradient(spec, x[p], x[b]))
    Ft = (np.eye(3) + dt * G) @ F[p]
    return _hencky_C(Ft[:dim, :dim], mu, lam)


def _random_cloud(rng, n, dim, spread=1.2):
    x = np.zeros((n, 3))
    x[:, :dim] = rng.uniform(0.0, spread, (n, dim))
    return x


def fd_gradient_check(cloud_size: int = 10, trials: int = 100, h_fd: float = FD_STEP,
                      dt: float = FD_DT, seed: int = 0, dim: int = 3, velocity_scale: float = 5.0,
                      deform: float = 0.15, tol: float = FD_TOL) -> OracleReport:
    """Analytic velocity-space constraint gradients against central differences."""
    if cloud_size < 5:
        raise ValueError("cloud size must be at least 5")
    rng = np.random.default_rng(seed)
    elastic = ElasticParams(1.0, 0.3)
    mu, lam = elastic.mu, elastic.lam
    world = World([MaterialModel(1.0, elastic)], 1.0, dim)
    worst = 0.0
    samples = 0
    sum_err = 0.0
    for _ in range(trials):
        x = _random_cloud(rng, cloud_size, dim)
        v = np.zeros((cloud_size, 3))
        v[:, :dim] = velocity_scale * rng.standard_normal((cloud_size, dim))
        F = np.tile(np.eye(3), (cloud_size, 1, 1))
        F[:, :dim, :dim] += deform * rng.standard_normal((cloud_size, dim, dim))
        vols = rng.uniform(0.05, 0.15, cloud_size)
        state = ParticleSet.create(x, vols, vols, v=v, dim=dim)
        state.F[:] = F
        # V^n = V0 det F inside the solver; give the reference the same volumes
        vn = vols * np.linalg.det(F)
        ctx = prepare_step(state, world, dt)
        p = int(rng.integers(cloud_size))
        nb = [int(b) for b in ctx.table.neighbors(p)]
        if not nb:
            continue
        C, dC, Fz = evaluate_constraint(p, state, ctx, world)
        grads = constraint_gradients(p, state, ctx, dC)
        analytic = {b: dt * g for b, g in grads}
        scale = max(np.max(np.abs(g)) for g in analytic.values())
        err = 0.0
        for b, g in analytic.items():
            for i in range(dim):
                vp = v.copy()
                vm = v.copy()
                vp[b, i] += h_fd
                vm[b, i] -= h_fd
                cp = _reference_C(p, x, vp, F, vn, world.kernel, nb, dt, mu, lam, dim)
                cm = _reference_C(p, x, vm, F, vn, world.kernel, nb, dt, mu, lam, dim)
                fd = (cp - cm) / (2.0 * h_fd)
                err = max(err, abs(fd - g[i]))
        rel = err / scale if scale > 0 else err
        worst = max(worst, rel)
        sum_err += rel
        samples += 1
    return OracleReport("fd_gradient_check", worst, tol, samples,
                        {"mean_error": sum_err / max(samples, 1)})


def linear_field_consistency(cloud_size: int = 40, trials: int = 20, seed: int = 0, dim: int = 3,
                             tol: float = AFFINE_TOL) -> OracleReport:
    """Corrected velocity gradients of random affine fields must be exact.

    Every particle with a full-rank neighbourhood is checked, so hull
    particles with one-sided neighbourhoods are always included.
    """
    rng = np.random.default_rng(seed)
    world = World([MaterialModel(1.0, ElasticParams(1.0, 0.3))], 0.5, dim)
    spec = world.kernel
    worst = 0.0
    worst_unc = 0.0
    worst_hull = 0.0
    samples = 0
    for _ in range(trials):
        x = _random_cloud(rng, cloud_size, dim, spread=1.5)
        A = np.zeros((3, 3))
        A[:dim, :dim] = rng.standard_normal((dim, dim))
        c = np.zeros(3)
        c[:dim] = rng.standard_normal(dim)
        v = x @ A.T + c
        vols = rng.uniform(0.01, 0.03, cloud_size)
        state = ParticleSet.create(x, vols, vols, v=v, dim=dim)
        ctx = prepare_step(state, world, 1e-3)
        centre = x.mean(axis=0)
        hull = int(np.argmax(np.linalg.norm(x - centre, axis=1)))
        norm_a = np.max(np.abs(A))
        for p in range(cloud_size):
            nb = ctx.table.neighbors(p)
            rel = x[nb, :dim] - x[p, :dim]
            if nb.shape[0] < dim or np.linalg.matrix_rank(rel, tol=1e-8) < dim:
                continue
            G = velocity_gradient(p, state, ctx)
            err = np.max(np.abs(G - A)) / norm_a
            unc = np.zeros((3, 3))
            for b in nb:
                unc += vols[b] * np.outer(v[b] - v[p], kernel_gradient(spec, x[p], x[b]))
            worst = max(worst, err)
            worst_unc = max(worst_unc, np.max(np.abs(unc - A)) / norm_a)
            if p == hull:
                worst_hull = max(worst_hull, err)
            samples += 1
    return OracleReport("linear_field_consistency", worst, tol, samples,
                        {"uncorrected_error": worst_unc, "hull_error": worst_hull})


def brute_force_neighbors(positions, k: float) -> List[List[int]]:
    """O(n^2) neighbour lists within ``k`` inclusive, self excluded, sorted."""
    x = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = x.shape[0]
    out = []
    k2 = float(k) * float(k)
    for p in range(n):
        d2 = np.sum((x - x[p]) ** 2, axis=1)
        out.append([int(b) for b in np.flatnonzero(d2 <= k2) if b != p])
    return out


def neighbor_check(n: int = 1000, clouds: int = 10, k: float = 0.1, seed: int = 0,
                   dim: int = 3) -> OracleReport:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(clouds):
        x = _random_cloud(rng, n, dim, spread=1.0)
        grid = build_neighbor_table(x, k, dim).as_lists()
        ref = brute_force_neighbors(x, k)
        mismatches += sum(a != b for a, b in zip(grid, ref))
    return OracleReport("brute_force_neighbors", float(mismatches), 0.0, clouds * n)


# --------------------------------------------------------------------------
# return mapping properties


@njit(cache=True)
def _map_batch(params, Fs, dt, hard):
    n = Fs.shape[0]
    out = np.empty_like(Fs)
    for i in range(n):
        out[i] = return_map_nb(params, Fs[i], dt, hard)
    return out


@njit(cache=True)
def _yield_batch(params, Fs, hard):
    out = np.empty(Fs.shape[0])
    for i in range(Fs.shape[0]):
        out[i] = yield_nb(params, Fs[i], hard)
    return out


def random_deformations(rng, trials: int, dim: int = 3, spread: float = 0.3) -> np.ndarray:
    """F = U diag(exp(e)) V^T with random rotations and Gaussian log-stretches."""
    U = Rotation.random(trials, random_state=rng).as_matrix()
    V = Rotation.random(trials, random_state=rng).as_matrix()
    s = np.exp(spread * rng.standard_normal((trials, 3)))
    F = np.einsum("nij,nj,nkj->nik", U, s, V)
    if dim == 2:
        ang = rng.uniform(0, 2 * np.pi, (2, trials))
        R = lambda a: np.stack([np.stack([np.cos(a), -np.sin(a)], -1), np.stack([np.sin(a), np.cos(a)], -1)], -2)
        F = np.einsum("nij,nj,nkj->nik", R(ang[0]), s[:, :2], R(ang[1]))
    return np.ascontiguousarray(F)


def return_map_properties(model: MaterialModel, trials: int = 10_000, seed: int = 0, dim: int = 3,
                          dt: float = 1e-3, hardening: Optional[float] = None,
                          spread: float = 0.3) -> List[OracleReport]:
    """Idempotence, feasibility, rotation equivariance (and VM volume) of Z."""
    rng = np.random.default_rng(seed)
    prm = model.pack()
    hard = model.initial_hardening() if hardening is None else hardening
    F = random_deformations(rng, trials, dim, spread)
    Z = _map_batch(prm, F, dt, hard)
    ZZ = _map_batch(prm, Z, dt, hard)
    nrm = np.linalg.norm(Z, axis=(1, 2))
    idem = np.max(np.linalg.norm(ZZ - Z, axis=(1, 2)) / nrm)
    yld = float(np.max(_yield_batch(prm, Z, hard)))
    Q = random_deformations(rng, trials, dim, 0.0)
    left = _map_batch(prm, np.ascontiguousarray(Q @ F), dt, hard)
    right = _map_batch(prm, np.ascontiguousarray(F @ Q), dt, hard)
    eq = max(np.max(np.linalg.norm(left - Q @ Z, axis=(1, 2)) / nrm),
             np.max(np.linalg.norm(right - Z @ Q, axis=(1, 2)) / nrm))
    plastic = float(np.mean(np.linalg.norm(Z - F, axis=(1, 2)) > 1e-12))
    tag = model.tag
    reports = [
        OracleReport(f"{tag} idempotence", float(idem), IDEMPOTENCE_TOL, trials, {"plastic_fraction": plastic}),
        OracleReport(f"{tag} yield", max(yld, 0.0), YIELD_TOL, trials, {"max_yield": yld}),
        OracleReport(f"{tag} rotation equivariance", float(eq), EQUIVARIANCE_TOL, trials),
    ]
    if tag == "VM":
        dF = np.linalg.det(F)
        vol = np.max(np.abs(np.linalg.det(Z) - dF) / np.abs(dF))
        reports.append(OracleReport("VM determinant", float(vol), VOLUME_TOL, trials))
    return reports


def herschel_bulkley_limits(model: MaterialModel, trials: int = 1000, seed: int = 0,
                            dim: int = 3) -> List[OracleReport]:
    """dt -> 0 leaves F untouched; dt -> inf recovers the rate-independent VM map."""
    from .constitutive import VonMises
    rng = np.random.default_rng(seed)
    prm = model.pack()
    vm = MaterialModel(model.density, model.elastic, VonMises(model.plastic.sigma_y)).pack()
    F = random_deformations(rng, trials, dim)
    nrm = np.linalg.norm(F, axis=(1, 2))
    small = _map_batch(prm, F, HB_DT_SMALL, 0.0)
    large = _map_batch(prm, F, HB_DT_LARGE, 0.0)
    ref = _map_batch(vm, F, 1e-3, 0.0)
    e0 = float(np.max(np.linalg.norm(small - F, axis=(1, 2)) / nrm))
    e1 = float(np.max(np.linalg.norm(large - ref, axis=(1, 2)) / nrm))
    return [OracleReport("HB dt->0", e0, HB_ZERO_TOL, trials),
            OracleReport("HB dt->inf", e1, HB_LIMIT_TOL, trials)]


# --------------------------------------------------------------------------
# trajectories and the semi-implicit comparator


@dataclass
class Trajectory:
    times: List[float]
    positions: List[np.ndarray]
    energy: List[float]
    residuals: List[List[float]]
    final: ParticleSet


def run_trajectory(state: ParticleSet, world: World, config: SolverConfig, n_steps: int,
                   record_every: int = 1, callback: Optional[Callable] = None) -> Trajectory:
    state = state.copy()
    times, pos, energy, res = [state.time], [state.x.copy()], [0.0], []
    for i in range(n_steps):
        state, diag = step(state, config, world, inplace=True)
        energy.append(diag.energy)
        if diag.residuals:
            res.append(diag.residuals)
        if (i + 1) % record_every == 0:
            times.append(state.time)
            pos.append(state.x.copy())
        if callback is not None:
            callback(state, diag)
    return Trajectory(times, pos, energy, res, state)


def semi_implicit_comparator(state: ParticleSet, world: World, config: SolverConfig, n_steps: int,
                             record_every: int = 1) -> Trajectory:
    """Same pipeline with the return map applied only at the end of each step."""
    from dataclasses import replace
    cfg = replace(config, implicit_plasticity=False)
    return run_trajectory(state, world, cfg, n_steps, record_every)


def bbox_diagonal(x) -> float:
    x = np.asarray(x)
    return float(np.linalg.norm(x.max(axis=0) - x.min(axis=0)))


def trajectory_rms(a: np.ndarray, b: np.ndarray, diagonal: float) -> float:
    """RMS per-particle distance between matched snapshots, over the box diagonal."""
    d = np.linalg.norm(np.asarray(a) - np.asarray(b), axis=1)
    return float(np.sqrt(np.mean(d * d)) / diagonal)
