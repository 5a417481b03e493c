"""Particle storage, Poisson-disk seeding, neighbour grid and cell colouring."""
from dataclasses import dataclass, field, fields

import numpy as np
from numba import njit, prange

from .geometry import sdf_union, shape_rows


@dataclass
class ParticleSet:
    """Structure-of-arrays particle state.

    ``inv_mass`` is 0 for kinematically pinned particles. ``hardening``
    holds the per-particle plastic state scalar of models that have one
    (NACC: alpha, snow: plastic volume ratio), and is unused otherwise.
    """

    x: np.ndarray
    v: np.ndarray
    F: np.ndarray
    V0: np.ndarray
    m: np.ndarray
    inv_mass: np.ndarray
    lam: np.ndarray
    material: np.ndarray
    hardening: np.ndarray
    dim: int = 3
    time: float = 0.0
    step: int = 0

    @classmethod
    def empty(cls, dim: int = 3) -> "ParticleSet":
        return cls.create(np.zeros((0, 3)), np.zeros(0), np.zeros(0), dim=dim)

    @classmethod
    def create(cls, x, V0, m, v=None, material=None, hardening=None, pinned=None,
               dim: int = 3) -> "ParticleSet":
        x = np.array(x, dtype=np.float64).reshape(-1, 3)
        n = x.shape[0]
        V0 = np.broadcast_to(np.asarray(V0, dtype=np.float64), (n,)).copy()
        m = np.broadcast_to(np.asarray(m, dtype=np.float64), (n,)).copy()
        v = np.zeros((n, 3)) if v is None else np.broadcast_to(np.asarray(v, float), (n, 3)).copy()
        F = np.tile(np.eye(3), (n, 1, 1))
        inv_mass = np.where(m > 0, 1.0 / np.where(m > 0, m, 1.0), 0.0)
        if pinned is not None:
            inv_mass[np.asarray(pinned, bool)] = 0.0
        mat = np.zeros(n, np.int64) if material is None else np.broadcast_to(
            np.asarray(material, np.int64), (n,)).copy()
        hard = np.zeros(n) if hardening is None else np.broadcast_to(
            np.asarray(hardening, float), (n,)).copy()
        if dim == 2:
            x[:, 2] = 0.0
            v[:, 2] = 0.0
        return cls(x, v, F, V0, m, inv_mass, np.zeros(n), mat, hard, dim)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def copy(self) -> "ParticleSet":
        kw = {}
        for f in fields(self):
            val = getattr(self, f.name)
            kw[f.name] = val.copy() if isinstance(val, np.ndarray) else val
        return ParticleSet(**kw)

    def concat(self, other: "ParticleSet") -> "ParticleSet":
        if other.dim != self.dim:
            raise ValueError("cannot merge particle sets of different dimension")
        kw = {}
        for f in fields(self):
            a = getattr(self, f.name)
            kw[f.name] = np.concatenate([a, getattr(other, f.name)]) if isinstance(a, np.ndarray) else a
        return ParticleSet(**kw)

    def current_volume(self) -> np.ndarray:
        return self.V0 * np.linalg.det(self.F)

    def momentum(self) -> np.ndarray:
        return (self.m[:, None] * self.v).sum(axis=0)


# --------------------------------------------------------------------------
# Poisson-disk sampling


@njit(cache=True)
def _far_enough(p, pts, grid, lo, cell, dims, s2, reach):
    c0 = int((p[0] - lo[0]) / cell)
    c1 = int((p[1] - lo[1]) / cell)
    c2 = int((p[2] - lo[2]) / cell)
    for i in range(max(c0 - reach, 0), min(c0 + reach + 1, dims[0])):
        for j in range(max(c1 - reach, 0), min(c1 + reach + 1, dims[1])):
            for k in range(max(c2 - reach, 0), min(c2 + reach + 1, dims[2])):
                q = grid[i, j, k]
                if q >= 0:
                    d0 = p[0] - pts[q, 0]
                    d1 = p[1] - pts[q, 1]
                    d2 = p[2] - pts[q, 2]
                    if d0 * d0 + d1 * d1 + d2 * d2 < s2:
                        return False
    return True


@njit(cache=True)
def _poisson(rows, lo, hi, s, d, seed, tries):
    np.random.seed(seed)
    cell = s / np.sqrt(d)
    dims = np.ones(3, np.int64)
    for a in range(d):
        dims[a] = max(int(np.ceil((hi[a] - lo[a]) / cell)), 1)
    grid = -np.ones((dims[0], dims[1], dims[2]), np.int64)
    cap = 1024
    pts = np.zeros((cap, 3))
    n = 0
    reach = 2
    s2 = s * s
    active = np.empty(0, np.int64)

    # seeds come from a shuffled lattice at s/2 so every component and
    # every gap of width ~2s ends up covered
    h = 0.5 * s
    lat = np.ones(3, np.int64)
    for a in range(d):
        lat[a] = int(np.floor((hi[a] - lo[a]) / h)) + 1
    total = lat[0] * lat[1] * lat[2]
    perm = np.random.permutation(total)
    p = np.zeros(3)
    q = np.zeros(3)
    stack = np.empty(64, np.int64)
    for t in range(total):
        idx = perm[t]
        k0 = idx // (lat[1] * lat[2])
        k1 = (idx // lat[2]) % lat[1]
        k2 = idx % lat[2]
        p[0] = lo[0] + k0 * h
        p[1] = lo[1] + k1 * h
        p[2] = lo[2] + k2 * h if d == 3 else 0.0
        if sdf_union(rows, p) > 0.0:
            continue
        if not _far_enough(p, pts, grid, lo, cell, dims, s2, reach):
            continue
        top = 0
        # Bridson growth from this seed
        if n == cap:
            cap *= 2
            grown = np.zeros((cap, 3))
            grown[:n] = pts[:n]
            pts = grown
        pts[n] = p
        grid[int((p[0] - lo[0]) / cell), int((p[1] - lo[1]) / cell), int((p[2] - lo[2]) / cell)] = n
        stack[top] = n
        top += 1
        n += 1
        while top > 0:
            j = np.random.randint(top)
            src = stack[j]
            placed = False
            for _ in range(tries):
                u = np.random.random()
                rad = s * (1.0 + u * (2.0 ** d - 1.0)) ** (1.0 / d)
                g0 = np.random.normal()
                g1 = np.random.normal()
                g2 = np.random.normal() if d == 3 else 0.0
                gn = np.sqrt(g0 * g0 + g1 * g1 + g2 * g2)
                if gn == 0.0:
                    continue
                q[0] = pts[src, 0] + rad * g0 / gn
                q[1] = pts[src, 1] + rad * g1 / gn
                q[2] = pts[src, 2] + rad * g2 / gn
                inside_box = True
                for a in range(d):
                    if q[a] < lo[a] or q[a] > hi[a]:
                        inside_box = False
                if not inside_box or sdf_union(rows, q) > 0.0:
                    continue
                if not _far_enough(q, pts, grid, lo, cell, dims, s2, reach):
                    continue
                if n == cap:
                    cap *= 2
                    grown = np.zeros((cap, 3))
                    grown[:n] = pts[:n]
                    pts = grown
                pts[n] = q
                grid[int((q[0] - lo[0]) / cell), int((q[1] - lo[1]) / cell), int((q[2] - lo[2]) / cell)] = n
                if top == stack.shape[0]:
                    bigger = np.empty(2 * top, np.int64)
                    bigger[:top] = stack[:top]
                    stack = bigger
                stack[top] = n
                top += 1
                n += 1
                placed = True
                break
            if not placed:
                top -= 1
                stack[j] = stack[top]
    return pts[:n].copy()


def poisson_disk_sample(domain, spacing: float, seed: int = 0, dim: int = 3,
                        tries: int = 30) -> np.ndarray:
    """Blue-noise samples inside ``domain`` with minimum separation ``spacing``.

    Deterministic for a fixed seed. Returns an (n, 3) array; for ``dim=2``
    the z column is zero.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    lo, hi = domain.bounds(dim)
    lo3 = np.zeros(3)
    hi3 = np.zeros(3)
    lo3[:dim] = lo
    hi3[:dim] = hi
    if np.any(hi3[:dim] - lo3[:dim] <= 0):
        return np.zeros((0, 3))
    return _poisson(shape_rows(domain), lo3, hi3, float(spacing), dim, int(seed), tries)


def lattice_sample(domain, spacing: float, dim: int = 3) -> np.ndarray:
    """Regular grid samples inside ``domain``, cell-centred in its bounds."""
    lo, hi = domain.bounds(dim)
    axes = [np.arange(lo[a] + 0.5 * spacing, hi[a], spacing) for a in range(dim)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
    pts = np.zeros((grid.shape[0], 3))
    pts[:, :dim] = grid
    rows = shape_rows(domain)
    keep = np.array([sdf_union(rows, p) <= 0.0 for p in pts], dtype=bool)
    return pts[keep]


# --------------------------------------------------------------------------
# neighbour search


def cell_color(cell, d: int = 3) -> int:
    """Parity colour of an integer cell index, in ``[0, 2**d)``."""
    return int(sum((int(cell[i]) % 2) << i for i in range(d)))


@dataclass
class NeighborTable:
    """Uniform-grid index with exact neighbour lists (CSR layout)."""

    k: float
    dim: int
    cell_of: np.ndarray        # particle -> cell id
    cells: np.ndarray          # (ncells, 3) integer cell coordinates, sorted
    cell_start: np.ndarray     # CSR into cell_particles
    cell_particles: np.ndarray
    cell_colors: np.ndarray
    start: np.ndarray          # CSR into index
    index: np.ndarray
    coloring_safe: bool = True
    extra: dict = field(default_factory=dict)

    @property
    def h_cell(self) -> float:
        return self.k

    def neighbors(self, p: int) -> np.ndarray:
        return self.index[self.start[p]:self.start[p + 1]]

    def as_lists(self):
        return [self.neighbors(p).tolist() for p in range(len(self.start) - 1)]


@njit(cache=True)
def _lookup(keys, key):
    i = np.searchsorted(keys, key)
    if i < keys.shape[0] and keys[i] == key:
        return i
    return -1


@njit(cache=True, parallel=True)
def _count_neighbors(x, cc, keys, cmin, span, cell_start, cell_particles, k2, d, counts):
    n = x.shape[0]
    rz = 1 if d == 3 else 0
    for p in prange(n):
        c = 0
        for di in range(-1, 2):
            for dj in range(-1, 2):
                for dk in range(-rz, rz + 1):
                    key = (((cc[p, 0] + di - cmin[0]) * span[1] + (cc[p, 1] + dj - cmin[1])) * span[2]
                           + (cc[p, 2] + dk - cmin[2]))
                    ci = _lookup(keys, key)
                    if ci < 0:
                        continue
                    for t in range(cell_start[ci], cell_start[ci + 1]):
                        b = cell_particles[t]
                        if b == p:
                            continue
                        d0 = x[p, 0] - x[b, 0]
                        d1 = x[p, 1] - x[b, 1]
                        d2 = x[p, 2] - x[b, 2]
                        if d0 * d0 + d1 * d1 + d2 * d2 <= k2:
                            c += 1
        counts[p] = c


@njit(cache=True, parallel=True)
def _fill_neighbors(x, cc, keys, cmin, span, cell_start, cell_particles, k2, d, start, index):
    n = x.shape[0]
    rz = 1 if d == 3 else 0
    for p in prange(n):
        c = start[p]
        for di in range(-1, 2):
            for dj in range(-1, 2):
                for dk in range(-rz, rz + 1):
                    key = (((cc[p, 0] + di - cmin[0]) * span[1] + (cc[p, 1] + dj - cmin[1])) * span[2]
                           + (cc[p, 2] + dk - cmin[2]))
                    ci = _lookup(keys, key)
                    if ci < 0:
                        continue
                    for t in range(cell_start[ci], cell_start[ci + 1]):
                        b = cell_particles[t]
                        if b == p:
                            continue
                        d0 = x[p, 0] - x[b, 0]
                        d1 = x[p, 1] - x[b, 1]
                        d2 = x[p, 2] - x[b, 2]
                        if d0 * d0 + d1 * d1 + d2 * d2 <= k2:
                            index[c] = b
                            c += 1
        index[start[p]:start[p + 1]] = np.sort(index[start[p]:start[p + 1]])


@njit(cache=True)
def _same_color_pairs(start, index, cell_of, colors):
    bad = 0
    for p in range(start.shape[0] - 1):
        for e in range(start[p], start[p + 1]):
            b = index[e]
            if cell_of[b] != cell_of[p] and colors[cell_of[b]] == colors[cell_of[p]]:
                bad += 1
    return bad


def build_neighbor_table(positions, k: float, dim: int = 3) -> NeighborTable:
    """Exact symmetric neighbour lists within ``k`` (inclusive), self excluded."""
    if k <= 0:
        raise ValueError("support radius must be positive")
    x = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
    n = x.shape[0]
    if n == 0:
        z = np.zeros(0, np.int64)
        return NeighborTable(k, dim, z, np.zeros((0, 3), np.int64), np.zeros(1, np.int64), z, z,
                             np.zeros(1, np.int64), z)
    cc = np.floor(x / k).astype(np.int64)
    if dim == 2:
        cc[:, 2] = 0
    cmin = cc.min(axis=0) - 1
    span = cc.max(axis=0) - cmin + 2
    lin = ((cc[:, 0] - cmin[0]) * span[1] + (cc[:, 1] - cmin[1])) * span[2] + (cc[:, 2] - cmin[2])
    keys, cell_of = np.unique(lin, return_inverse=True)
    cell_of = cell_of.astype(np.int64).ravel()
    order = np.argsort(cell_of, kind="stable")
    counts = np.bincount(cell_of, minlength=keys.shape[0])
    cell_start = np.zeros(keys.shape[0] + 1, np.int64)
    np.cumsum(counts, out=cell_start[1:])
    cells = np.empty((keys.shape[0], 3), np.int64)
    cells[cell_of] = cc
    colors = ((cells[:, 0] % 2) + 2 * (cells[:, 1] % 2) + (4 * (cells[:, 2] % 2) if dim == 3 else 0))

    nb_counts = np.zeros(n, np.int64)
    k2 = float(k) * float(k)
    _count_neighbors(x, cc, keys, cmin, span, cell_start, order, k2, dim, nb_counts)
    start = np.zeros(n + 1, np.int64)
    np.cumsum(nb_counts, out=start[1:])
    index = np.empty(start[-1], np.int64)
    _fill_neighbors(x, cc, keys, cmin, span, cell_start, order, k2, dim, start, index)
    safe = _same_color_pairs(start, index, cell_of, colors) == 0
    return NeighborTable(float(k), dim, cell_of, cells, cell_start, order.astype(np.int64),
                         colors.astype(np.int64), start, index, safe)
