"""Velocity-space XPBD stepper with in-loop implicit plasticity.

A step runs: neighbour search on the current positions, kernel
correction, external forces, then a fixed number of sweeps over the
per-particle inelastic constraints followed by the auxiliary
(distance and collider) constraints, XSPH smoothing and the final
F / position update.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import sweeps
from .constitutive import MaterialModel, PARAM_WIDTH
from .geometry import ROW, sdf_row, shape_rows
from .kernels import KernelSpec
from .linalg import PINV_CUTOFF
from .particles import NeighborTable, ParticleSet, build_neighbor_table

BACKENDS = ("gs", "jacobi")
_BACKEND_ALIASES = {"gs": "gs", "gauss-seidel": "gs", "ColoredGaussSeidel": "gs",
                    "jacobi": "jacobi", "Jacobi": "jacobi"}
PHASES = ("neighbors", "correction", "forces", "inelastic", "auxiliary", "xsph", "finalize")


class SimulationError(RuntimeError):
    """Raised when a step produces non-finite values; carries a state snapshot."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class SolverConfig:
    dt: float = 1e-3
    iterations: int = 10
    backend: str = "gs"
    xsph_c: float = 0.01
    gap_factor: float = 0.25
    gravity: Sequence[float] = (0.0, -9.81, 0.0)
    implicit_plasticity: bool = True
    position_correction: bool = True
    track_residual: bool = False
    # relative singular-value cutoff for the kernel correction pseudo-inverse
    correction_cutoff: float = PINV_CUTOFF
    # adaptive mode: stop once the relative residual drops to this value
    residual_tol: Optional[float] = None
    check_finite: bool = True

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if int(self.iterations) < 1:
            raise ValueError("iterations must be at least 1")
        self.iterations = int(self.iterations)
        if self.backend not in _BACKEND_ALIASES:
            raise ValueError(f"unknown backend {self.backend!r}; expected one of {list(BACKENDS)}")
        self.backend = _BACKEND_ALIASES[self.backend]
        if self.xsph_c < 0:
            raise ValueError("xsph_c must be non-negative")
        if not 0 <= self.gap_factor < 1:
            raise ValueError("gap_factor must lie in [0, 1)")
        g = np.zeros(3)
        g[: len(self.gravity)] = self.gravity
        self.gravity = tuple(float(c) for c in g)
        if not 0 < self.correction_cutoff < 1:
            raise ValueError("correction_cutoff must lie in (0, 1)")
        if self.residual_tol is not None and not self.residual_tol > 0:
            raise ValueError("residual_tol must be positive")


@dataclass
class Collider:
    """Analytic obstacle. ``inside=True`` keeps particles inside the shape instead."""

    shape: object
    friction: float = 0.0
    velocity: Sequence[float] = (0.0, 0.0, 0.0)
    inside: bool = False

    def __post_init__(self):
        if self.friction < 0:
            raise ValueError("friction must be non-negative")

    def rows(self) -> np.ndarray:
        base = shape_rows(self.shape)
        out = np.zeros((base.shape[0], sweeps.COLLIDER_WIDTH))
        out[:, :ROW] = base
        out[:, sweeps.C_INVERT] = 1.0 if self.inside else 0.0
        out[:, sweeps.C_FRICTION] = self.friction
        v = np.zeros(3)
        v[: len(self.velocity)] = self.velocity
        out[:, sweeps.C_VEL:sweeps.C_VEL + 3] = v
        return out

    def signed_distance(self, x, t: float = 0.0) -> float:
        """Positive outside the obstacle (inside the container when ``inside``)."""
        y = np.zeros(3)
        y[: len(x)] = x
        return float(min(sweeps.collider_sdf(r, y, t) for r in self.rows()))


@dataclass
class World:
    """Everything a step needs besides the particle state."""

    materials: List[MaterialModel]
    radius: float
    dim: int = 3
    colliders: List[Collider] = field(default_factory=list)
    external_force: Optional[Callable[[ParticleSet], np.ndarray]] = None
    extra_constraints: List[Callable[[ParticleSet, float], None]] = field(default_factory=list)

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("particle radius must be positive")
        self.kernel = KernelSpec(self.radius, self.dim)
        self.params = (np.array([m.pack() for m in self.materials]) if self.materials
                       else np.zeros((0, PARAM_WIDTH)))
        rows = [c.rows() for c in self.colliders]
        self.collider_rows = (np.concatenate(rows) if rows
                              else np.zeros((0, sweeps.COLLIDER_WIDTH)))


@dataclass
class StepDiagnostics:
    step: int
    residuals: List[float]
    constraint_count: int
    iterations: int
    timings_us: Dict[str, float]
    energy: float = 0.0
    fallback_count: int = 0

    @property
    def relative_residuals(self) -> List[float]:
        if not self.residuals or self.residuals[0] == 0.0:
            return [0.0 for _ in self.residuals]
        return [r / self.residuals[0] for r in self.residuals]

    def csv_rows(self):
        t = [self.timings_us.get(k, 0.0) for k in PHASES]
        return [[self.step, i, r] + t for i, r in enumerate(self.residuals)]


@dataclass
class StepContext:
    """Per-step quantities frozen at the start-of-step positions."""

    table: NeighborTable
    Vn: np.ndarray
    L: np.ndarray
    gradc: np.ndarray
    wval: np.ndarray
    color_start: np.ndarray
    color_cells: np.ndarray
    halo_start: np.ndarray
    halo_idx: np.ndarray
    eslot: np.ndarray
    dt: float

    def __post_init__(self):
        n = self.Vn.shape[0]
        nnz = self.gradc.shape[0]
        self.halo = np.zeros((max(self.halo_idx.shape[0], 1), 3))
        self.F_used = np.tile(np.eye(3), (n, 1, 1))
        self.contrib = np.zeros((nnz, 3))
        self.self_contrib = np.zeros((n, 3))
        self.dlam = np.zeros(n)
        self.cell_fallbacks = np.zeros(max(self.table.cell_start.shape[0] - 1, 1), np.int64)
        self.particle_fallbacks = np.zeros(n, np.int64)


def prepare_step(state: ParticleSet, world: World, dt: float,
                 cutoff: float = PINV_CUTOFF) -> StepContext:
    """Neighbour table, schedule and corrected kernel gradients from the current positions."""
    t0 = time.perf_counter()
    table = build_neighbor_table(state.x, world.kernel.k, state.dim)
    table.extra["build_us"] = (time.perf_counter() - t0) * 1e6
    n = state.n
    nnz = table.index.shape[0]
    Vn = np.empty(n)
    L = np.empty((n, 3, 3))
    gradc = np.empty((nnz, 3))
    wval = np.empty(nnz)
    if n:
        sweeps.precompute(state.x, state.F, state.V0, table.start, table.index, world.radius,
                          world.kernel.normalization, cutoff, Vn, L, gradc, wval)
    ncolors = 2 ** state.dim
    sched = sweeps.build_schedule(n, table.cell_of, table.cell_start, table.cell_particles,
                                  table.cell_colors, ncolors, table.start, table.index)
    return StepContext(table, Vn, L, gradc, wval, *sched, dt=dt)


# --------------------------------------------------------------------------
# single-operation API


_NO_HALO = np.zeros((1, 3))
_NO_SLOT = np.zeros(1, np.int64)


def velocity_gradient(p: int, state: ParticleSet, ctx: StepContext) -> np.ndarray:
    t = ctx.table
    return sweeps.velocity_gradient_at(p, state.v, t.start, t.index, ctx.Vn, ctx.gradc,
                                       _NO_HALO, -1, _NO_SLOT)


def trial_deformation(F_n, grad_v, dt: float) -> np.ndarray:
    if not dt > 0:
        raise ValueError("dt must be positive")
    return (np.eye(3) + dt * np.asarray(grad_v, float)) @ np.asarray(F_n, float)


def constraint_gradients(p: int, state: ParticleSet, ctx: StepContext, dCdF) -> list:
    """Position gradients of particle p's constraint, neighbours first, p last.

    The self entry is minus the sum of the others, so the list sums to zero.
    """
    t = ctx.table
    P = np.asarray(dCdF, float) @ state.F[p].T
    out = []
    total = np.zeros(3)
    for e in range(t.start[p], t.start[p + 1]):
        b = int(t.index[e])
        g = ctx.Vn[b] * (P @ ctx.gradc[e])
        out.append((b, g))
        total -= g
    out.append((p, total))
    return out


def evaluate_constraint(p: int, state: ParticleSet, ctx: StepContext, world: World,
                        implicit: bool = True):
    """(C, dC/dF, F used) for particle p at the current velocities."""
    G = velocity_gradient(p, state, ctx)
    prm = world.params[state.material[p]]
    return sweeps.constraint_at(state.F[p], G, prm, ctx.dt, state.hardening[p], implicit, state.dim)


def solve_inelastic_constraint(p: int, state: ParticleSet, ctx: StepContext, world: World,
                               implicit: bool = True):
    """One XPBD update of particle p. Returns (dlambda, {index: dv}, F used)."""
    t = ctx.table
    contrib = np.zeros((t.index.shape[0], 3))
    self_dv = np.zeros((state.n, 3))
    dlam = sweeps.solve_inelastic_one(
        p, state.v, state.lam, state.F, state.V0, state.inv_mass, state.material,
        state.hardening, world.params, t.start, t.index, ctx.Vn, ctx.gradc, ctx.dt, implicit,
        state.dim, _NO_HALO, -1, _NO_SLOT, ctx.F_used, contrib, self_dv, False)
    updates = {}
    if dlam != 0.0:
        state.lam[p] += dlam
        for e in range(t.start[p], t.start[p + 1]):
            b = int(t.index[e])
            updates[b] = updates.get(b, 0.0) + contrib[e]
        updates[p] = updates.get(p, 0.0) + self_dv[p]
        for b, dv in updates.items():
            state.v[b] += dv
    return dlam, updates, ctx.F_used[p].copy()


def solve_distance_constraint(pa: int, pb: int, state: ParticleSet, r: float, eps: float,
                              dt: float):
    """Hard pair-distance inequality on candidate positions. Returns (dva, dvb, fallback)."""
    if pa == pb:
        raise ValueError("distance constraint needs two distinct particles")
    fb, s, n0, n1, n2 = sweeps.distance_pair(pa, pb, state.v[pb].copy(), state.x, state.v,
                                             state.inv_mass, dt, r - eps)
    n = np.array([n0, n1, n2])
    dva = state.inv_mass[pa] * s * n
    dvb = -state.inv_mass[pb] * s * n
    state.v[pa] += dva
    state.v[pb] += dvb
    return dva, dvb, bool(fb)


def solve_boundary(p: int, collider: Collider, state: ParticleSet, dt: float,
                   t_next: Optional[float] = None) -> np.ndarray:
    t_next = state.time + dt if t_next is None else t_next
    total = np.zeros(3)
    if state.inv_mass[p] == 0.0:
        return total
    dv = np.zeros(3)
    for row in collider.rows():
        if sweeps.boundary_dv(row, state.x[p], state.v[p], dt, t_next, dv):
            state.v[p] += dv
            total += dv
    if state.dim == 2:
        state.v[p, 2] = 0.0
    return total


def xsph_smooth(state: ParticleSet, ctx: StepContext, c: float) -> np.ndarray:
    out = np.empty_like(state.v)
    t = ctx.table
    sweeps.xsph(state.v, state.inv_mass, t.start, t.index, ctx.Vn, ctx.wval, float(c), out)
    state.v[:] = out
    return out


def finalize_state(state: ParticleSet, ctx: StepContext, world: World, dt: float) -> ParticleSet:
    t = ctx.table
    if state.n:
        sweeps.finalize(state.x, state.v, state.F, state.material, state.hardening, world.params,
                        t.start, t.index, ctx.Vn, ctx.gradc, dt, state.dim)
    state.time += dt
    state.step += 1
    return state


def constraint_residuals(state: ParticleSet, ctx: StepContext, world: World,
                         implicit: bool = True):
    """Per-particle h = C + alpha_tilde * lambda and constraint energy V0 * Psi."""
    t = ctx.table
    h = np.zeros(state.n)
    energy = np.zeros(state.n)
    if state.n:
        sweeps.residual(state.v, state.lam, state.F, state.V0, state.material, state.hardening,
                        world.params, t.start, t.index, ctx.Vn, ctx.gradc, ctx.dt, implicit,
                        state.dim, h, energy)
    return h, energy


def residual_norm(state: ParticleSet, ctx: StepContext, world: World, implicit: bool = True) -> float:
    h, _ = constraint_residuals(state, ctx, world, implicit)
    return float(np.linalg.norm(h))


# --------------------------------------------------------------------------
# sweeps and the full step


def inelastic_sweep(state: ParticleSet, ctx: StepContext, world: World, config: SolverConfig):
    t = ctx.table
    args = (state.v, state.lam, state.F, state.V0, state.inv_mass, state.material,
            state.hardening, world.params, t.start, t.index, ctx.Vn, ctx.gradc, ctx.dt,
            config.implicit_plasticity, state.dim)
    if config.backend == "gs":
        sweeps.gs_inelastic(*args, ctx.color_start, ctx.color_cells, t.cell_start,
                            t.cell_particles, ctx.halo_start, ctx.halo_idx, ctx.eslot, ctx.halo,
                            ctx.F_used)
    else:
        sweeps.jacobi_inelastic(*args, ctx.contrib, ctx.self_contrib, ctx.dlam, ctx.F_used)


def auxiliary_sweep(state: ParticleSet, ctx: StepContext, world: World, config: SolverConfig):
    t = ctx.table
    rest = world.radius * (1.0 - config.gap_factor)
    t_next = state.time + ctx.dt
    args = (state.x, state.v, state.inv_mass, t.start, t.index, ctx.dt, rest,
            config.position_correction, world.collider_rows, t_next, state.dim)
    if config.backend == "gs":
        sweeps.gs_aux(*args, ctx.color_start, ctx.color_cells, t.cell_start, t.cell_particles,
                      ctx.halo_start, ctx.halo_idx, ctx.eslot, ctx.halo, ctx.cell_fallbacks)
    else:
        sweeps.jacobi_aux(*args, ctx.contrib, ctx.self_contrib, ctx.particle_fallbacks)
        ctx.cell_fallbacks[0] += ctx.particle_fallbacks.sum()
    for extra in world.extra_constraints:
        extra(state, ctx.dt)


def _check_finite(state: ParticleSet, where: str):
    bad = ~(np.isfinite(state.x).all(1) & np.isfinite(state.v).all(1)
            & np.isfinite(state.F).all((1, 2)) & np.isfinite(state.lam))
    if bad.any():
        idx = np.flatnonzero(bad)
        snap = {"step": state.step, "time": state.time, "phase": where, "particles": idx[:32].tolist(),
                "x": state.x[idx[:32]].copy(), "v": state.v[idx[:32]].copy(),
                "F": state.F[idx[:32]].copy()}
        raise SimulationError(f"non-finite state in {len(idx)} particles after {where} "
                              f"(step {state.step})", snap)


def step(state: ParticleSet, config: SolverConfig, world: World,
         inplace: bool = False):
    """Advance one substep. Returns (new state, StepDiagnostics)."""
    if not inplace:
        state = state.copy()
    dt = config.dt
    timings = {k: 0.0 for k in PHASES}

    t0 = time.perf_counter()
    ctx = prepare_step(state, world, dt, config.correction_cutoff)
    t1 = time.perf_counter()
    timings["neighbors"] = ctx.table.extra.get("build_us", 0.0)
    timings["correction"] = (t1 - t0) * 1e6 - timings["neighbors"]

    free = state.inv_mass > 0
    state.v[free] += dt * np.asarray(config.gravity)
    if world.external_force is not None:
        f = np.asarray(world.external_force(state), float).reshape(-1, 3)
        state.v += dt * state.inv_mass[:, None] * f
    if state.dim == 2:
        state.v[:, 2] = 0.0
    state.lam[:] = 0.0
    t2 = time.perf_counter()
    timings["forces"] = (t2 - t1) * 1e6

    implicit = config.implicit_plasticity
    track = config.track_residual or config.residual_tol is not None
    residuals: List[float] = []
    if track:
        residuals.append(residual_norm(state, ctx, world, implicit))
    iters = 0
    for _ in range(config.iterations):
        ta = time.perf_counter()
        inelastic_sweep(state, ctx, world, config)
        tb = time.perf_counter()
        auxiliary_sweep(state, ctx, world, config)
        tc = time.perf_counter()
        timings["inelastic"] += (tb - ta) * 1e6
        timings["auxiliary"] += (tc - tb) * 1e6
        iters += 1
        if track:
            residuals.append(residual_norm(state, ctx, world, implicit))
            if config.residual_tol is not None:
                ref = residuals[0]
                if residuals[-1] <= config.residual_tol * (ref if ref > 0 else 1.0):
                    break
    _, energy = constraint_residuals(state, ctx, world, implicit)

    t3 = time.perf_counter()
    if config.xsph_c > 0:
        xsph_smooth(state, ctx, config.xsph_c)
    t4 = time.perf_counter()
    finalize_state(state, ctx, world, dt)
    t5 = time.perf_counter()
    timings["xsph"] = (t4 - t3) * 1e6
    timings["finalize"] = (t5 - t4) * 1e6
    if config.check_finite:
        _check_finite(state, "step")

    n_aux = int(len(world.colliders) > 0) * state.n
    diag = StepDiagnostics(state.step, residuals, state.n + n_aux, iters, timings,
                           float(energy.sum()), int(ctx.cell_fallbacks.sum()))
    return state, diag


class Simulation:
    """Convenience driver holding a state, world and config."""

    def __init__(self, state: ParticleSet, world: World, config: SolverConfig):
        self.state = state
        self.world = world
        self.config = config
        self.diagnostics: List[StepDiagnostics] = []

    def advance(self, n_steps: int, callback=None, keep_diagnostics: bool = True):
        for _ in range(n_steps):
            self.state, diag = step(self.state, self.config, self.world, inplace=True)
            if keep_diagnostics:
                self.diagnostics.append(diag)
            if callback is not None:
                callback(self.state, diag)
        return self.state
