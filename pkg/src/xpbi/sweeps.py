"""Compiled per-step kernels for the XPBI stepper.

Colored Gauss-Seidel contract: cells of one color run concurrently.
A cell task writes velocities of its own particles directly; updates to
particles outside the cell go to a cell-private halo buffer that the
task also reads through. Buffers are folded into the velocity array in
cell order at the color barrier, so the result does not depend on the
thread count.
"""
import numpy as np
from numba import njit, prange

from .constitutive import constraint_and_grad, hardening_nb, lame_scale, return_map_nb
from .geometry import sdf_row
from .kernels import w_grad, w_value
from .linalg import pinv_nb

K_MU, K_LAM = 4, 5

# collider row: shape row (10) + invert, friction, vx, vy, vz
C_INVERT, C_FRICTION, C_VEL = 10, 11, 12
COLLIDER_WIDTH = 15


# --------------------------------------------------------------------------
# per-step setup


@njit(cache=True, parallel=True)
def precompute(x, F, V0, start, index, r, norm, cutoff, Vn, L, gradc, wval):
    n = x.shape[0]
    for p in prange(n):
        f = F[p]
        Vn[p] = V0[p] * (f[0, 0] * (f[1, 1] * f[2, 2] - f[1, 2] * f[2, 1])
                         - f[0, 1] * (f[1, 0] * f[2, 2] - f[1, 2] * f[2, 0])
                         + f[0, 2] * (f[1, 0] * f[2, 1] - f[1, 1] * f[2, 0]))
    for p in prange(n):
        g = np.empty(3)
        M = np.zeros((3, 3))
        for e in range(start[p], start[p + 1]):
            b = index[e]
            w_grad(x[p], x[b], r, norm, g)
            for i in range(3):
                for j in range(3):
                    M[i, j] += Vn[b] * g[i] * (x[b, j] - x[p, j])
        Lp = pinv_nb(M, cutoff)
        L[p] = Lp
        for e in range(start[p], start[p + 1]):
            b = index[e]
            w_grad(x[p], x[b], r, norm, g)
            for i in range(3):
                gradc[e, i] = Lp[i, 0] * g[0] + Lp[i, 1] * g[1] + Lp[i, 2] * g[2]
            d0 = x[p, 0] - x[b, 0]
            d1 = x[p, 1] - x[b, 1]
            d2 = x[p, 2] - x[b, 2]
            wval[e] = w_value(np.sqrt(d0 * d0 + d1 * d1 + d2 * d2), r, norm)


@njit(cache=True)
def build_schedule(n, cell_of, cell_start, cell_particles, colors, ncolors, start, index):
    ncells = cell_start.shape[0] - 1
    nnz = index.shape[0]
    eslot = -np.ones(nnz, np.int64)
    halo_start = np.zeros(ncells + 1, np.int64)
    halo_idx = np.empty(nnz, np.int64)
    stamp = -np.ones(n, np.int64)
    slot_of = np.zeros(n, np.int64)
    h = 0
    for c in range(ncells):
        halo_start[c] = h
        cnt = 0
        for t in range(cell_start[c], cell_start[c + 1]):
            p = cell_particles[t]
            for e in range(start[p], start[p + 1]):
                b = index[e]
                if cell_of[b] == c:
                    continue
                if stamp[b] != c:
                    stamp[b] = c
                    slot_of[b] = cnt
                    halo_idx[h + cnt] = b
                    cnt += 1
                eslot[e] = slot_of[b]
        h += cnt
    halo_start[ncells] = h
    order = np.argsort(colors, kind="mergesort")
    color_start = np.zeros(ncolors + 1, np.int64)
    for c in range(ncells):
        color_start[colors[c] + 1] += 1
    for k in range(ncolors):
        color_start[k + 1] += color_start[k]
    return color_start, order.astype(np.int64), halo_start, halo_idx[:h].copy(), eslot


# --------------------------------------------------------------------------
# inelastic constraint


@njit(cache=True)
def _read_v(v, halo, base, eslot, e, b, out):
    out[0] = v[b, 0]
    out[1] = v[b, 1]
    out[2] = v[b, 2]
    if base >= 0:
        s = eslot[e]
        if s >= 0:
            out[0] += halo[base + s, 0]
            out[1] += halo[base + s, 1]
            out[2] += halo[base + s, 2]


@njit(cache=True)
def velocity_gradient_at(p, v, start, index, Vn, gradc, halo, base, eslot):
    G = np.zeros((3, 3))
    vb = np.empty(3)
    for e in range(start[p], start[p + 1]):
        b = index[e]
        _read_v(v, halo, base, eslot, e, b, vb)
        for i in range(3):
            dv = Vn[b] * (vb[i] - v[p, i])
            for j in range(3):
                G[i, j] += dv * gradc[e, j]
    return G


@njit(cache=True)
def _mm(A, B):
    C = np.zeros((3, 3))
    for i in range(3):
        for k in range(3):
            a = A[i, k]
            for j in range(3):
                C[i, j] += a * B[k, j]
    return C


@njit(cache=True)
def _mmT(A, B):
    C = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            C[i, j] = A[i, 0] * B[j, 0] + A[i, 1] * B[j, 1] + A[i, 2] * B[j, 2]
    return C


@njit(cache=True)
def trial_F(Fn, G, dt):
    A = dt * G
    for i in range(3):
        A[i, i] += 1.0
    return _mm(A, Fn)


@njit(cache=True)
def constraint_at(Fn, G, params, dt, hard, implicit, dim):
    """Trial F -> (optional) return map -> C, dC/dF (3x3, embedded), F used."""
    Ft = trial_F(Fn, G, dt)
    Fd = np.ascontiguousarray(Ft[:dim, :dim])
    if implicit:
        Fz = return_map_nb(params, Fd, dt, hard)
    else:
        Fz = Fd
    sc = lame_scale(params, hard)
    C, dC = constraint_and_grad(Fz, params[K_MU] * sc, params[K_LAM] * sc)
    dC3 = np.zeros((3, 3))
    F3 = Ft.copy()
    for i in range(dim):
        for j in range(dim):
            dC3[i, j] = dC[i, j]
            F3[i, j] = Fz[i, j]
    return C, dC3, F3


@njit(cache=True)
def solve_inelastic_one(p, v, lam, Fn, V0, inv_mass, mat, hard, params, start, index, Vn, gradc,
                        dt, implicit, dim, halo, base, eslot, F_used, out_dv, out_self, apply):
    """XPBD update of particle p's constraint.

    With ``apply`` the velocity changes are written (owned directly, halo
    through the buffer); otherwise they are stored in ``out_dv`` (per
    neighbour entry) and ``out_self``. Returns the multiplier increment.
    """
    G = velocity_gradient_at(p, v, start, index, Vn, gradc, halo, base, eslot)
    prm = params[mat[p]]
    C, dC, Fz = constraint_at(Fn[p], G, prm, dt, hard[p], implicit, dim)
    F_used[p] = Fz
    if C == 0.0:
        return 0.0
    P = _mmT(dC, Fn[p])
    alpha_t = 1.0 / (V0[p] * dt * dt)
    s0 = 0.0
    s1 = 0.0
    s2 = 0.0
    denom = alpha_t
    ne = start[p + 1] - start[p]
    grads = np.empty((ne, 3))
    for e in range(start[p], start[p + 1]):
        b = index[e]
        k = e - start[p]
        for i in range(3):
            grads[k, i] = Vn[b] * (P[i, 0] * gradc[e, 0] + P[i, 1] * gradc[e, 1] + P[i, 2] * gradc[e, 2])
        s0 -= grads[k, 0]
        s1 -= grads[k, 1]
        s2 -= grads[k, 2]
        denom += inv_mass[b] * (grads[k, 0] ** 2 + grads[k, 1] ** 2 + grads[k, 2] ** 2)
    denom += inv_mass[p] * (s0 * s0 + s1 * s1 + s2 * s2)
    dlam = (-C - alpha_t * lam[p]) / denom
    f = dlam / dt
    if apply:
        lam[p] += dlam
        for e in range(start[p], start[p + 1]):
            b = index[e]
            k = e - start[p]
            wb = inv_mass[b] * f
            if base >= 0 and eslot[e] >= 0:
                s = base + eslot[e]
                for i in range(3):
                    halo[s, i] += wb * grads[k, i]
            else:
                for i in range(3):
                    v[b, i] += wb * grads[k, i]
        wp = inv_mass[p] * f
        v[p, 0] += wp * s0
        v[p, 1] += wp * s1
        v[p, 2] += wp * s2
    else:
        for e in range(start[p], start[p + 1]):
            k = e - start[p]
            wb = inv_mass[index[e]] * f
            for i in range(3):
                out_dv[e, i] = wb * grads[k, i]
        wp = inv_mass[p] * f
        out_self[p, 0] = wp * s0
        out_self[p, 1] = wp * s1
        out_self[p, 2] = wp * s2
    return dlam


@njit(cache=True, parallel=True)
def gs_inelastic(v, lam, Fn, V0, inv_mass, mat, hard, params, start, index, Vn, gradc, dt,
                 implicit, dim, color_start, color_cells, cell_start, cell_particles,
                 halo_start, halo_idx, eslot, halo, F_used):
    dummy = np.zeros((1, 3))
    for col in range(color_start.shape[0] - 1):
        c0 = color_start[col]
        c1 = color_start[col + 1]
        for ci in prange(c0, c1):
            c = color_cells[ci]
            base = halo_start[c]
            for j in range(base, halo_start[c + 1]):
                halo[j, 0] = 0.0
                halo[j, 1] = 0.0
                halo[j, 2] = 0.0
            for t in range(cell_start[c], cell_start[c + 1]):
                p = cell_particles[t]
                solve_inelastic_one(p, v, lam, Fn, V0, inv_mass, mat, hard, params, start, index,
                                    Vn, gradc, dt, implicit, dim, halo, base, eslot, F_used,
                                    dummy, dummy, True)
        for ci in range(c0, c1):
            c = color_cells[ci]
            for j in range(halo_start[c], halo_start[c + 1]):
                b = halo_idx[j]
                v[b, 0] += halo[j, 0]
                v[b, 1] += halo[j, 1]
                v[b, 2] += halo[j, 2]


@njit(cache=True, parallel=True)
def jacobi_inelastic(v, lam, Fn, V0, inv_mass, mat, hard, params, start, index, Vn, gradc, dt,
                     implicit, dim, contrib, self_contrib, dlam, F_used):
    n = v.shape[0]
    dummy_halo = np.zeros((1, 3))
    dummy_slot = np.zeros(1, np.int64)
    for p in prange(n):
        for e in range(start[p], start[p + 1]):
            contrib[e, 0] = 0.0
            contrib[e, 1] = 0.0
            contrib[e, 2] = 0.0
        self_contrib[p, 0] = 0.0
        self_contrib[p, 1] = 0.0
        self_contrib[p, 2] = 0.0
        dlam[p] = solve_inelastic_one(p, v, lam, Fn, V0, inv_mass, mat, hard, params, start, index,
                                      Vn, gradc, dt, implicit, dim, dummy_halo, -1, dummy_slot,
                                      F_used, contrib, self_contrib, False)
    for p in range(n):
        lam[p] += dlam[p]
        for e in range(start[p], start[p + 1]):
            b = index[e]
            v[b, 0] += contrib[e, 0]
            v[b, 1] += contrib[e, 1]
            v[b, 2] += contrib[e, 2]
        v[p, 0] += self_contrib[p, 0]
        v[p, 1] += self_contrib[p, 1]
        v[p, 2] += self_contrib[p, 2]


@njit(cache=True, parallel=True)
def residual(v, lam, Fn, V0, mat, hard, params, start, index, Vn, gradc, dt, implicit, dim, h, energy):
    n = v.shape[0]
    dummy_halo = np.zeros((1, 3))
    dummy_slot = np.zeros(1, np.int64)
    for p in prange(n):
        G = velocity_gradient_at(p, v, start, index, Vn, gradc, dummy_halo, -1, dummy_slot)
        C, dC, Fz = constraint_at(Fn[p], G, params[mat[p]], dt, hard[p], implicit, dim)
        h[p] = C + lam[p] / (V0[p] * dt * dt)
        energy[p] = 0.5 * V0[p] * C * C


# --------------------------------------------------------------------------
# auxiliary constraints: pair distance and colliders


@njit(cache=True)
def distance_pair(p, b, vb, x, v, inv_mass, dt, rest):
    """Velocity corrections (dvp, dvb) for the hard pair-distance inequality."""
    d0 = x[p, 0] + dt * v[p, 0] - x[b, 0] - dt * vb[0]
    d1 = x[p, 1] + dt * v[p, 1] - x[b, 1] - dt * vb[1]
    d2 = x[p, 2] + dt * v[p, 2] - x[b, 2] - dt * vb[2]
    dist = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
    C = dist - rest
    wsum = inv_mass[p] + inv_mass[b]
    if C >= 0.0 or wsum == 0.0:
        return False, 0.0, 0.0, 0.0, 0.0
    fallback = False
    if dist > 0.0:
        n0 = d0 / dist
        n1 = d1 / dist
        n2 = d2 / dist
    else:
        n0 = 1.0
        n1 = 0.0
        n2 = 0.0
        fallback = True
    s = -C / (wsum * dt)
    return fallback, s, n0, n1, n2


@njit(cache=True)
def collider_sdf(col, y, t):
    q = np.empty(3)
    q[0] = y[0] - col[C_VEL] * t
    q[1] = y[1] - col[C_VEL + 1] * t
    q[2] = y[2] - col[C_VEL + 2] * t
    d = sdf_row(col[:10], q)
    if col[C_INVERT] != 0.0:
        return -d
    return d


@njit(cache=True)
def boundary_dv(col, xp, vp, dt, t_next, out):
    """Velocity change that moves the candidate position onto the collider surface."""
    y = xp + dt * vp
    d = collider_sdf(col, y, t_next)
    out[0] = 0.0
    out[1] = 0.0
    out[2] = 0.0
    if d >= 0.0:
        return False
    h = 1e-6 * max(1.0, abs(y[0]) + abs(y[1]) + abs(y[2]))
    nrm = np.zeros(3)
    for a in range(3):
        yp = y.copy()
        ym = y.copy()
        yp[a] += h
        ym[a] -= h
        nrm[a] = (collider_sdf(col, yp, t_next) - collider_sdf(col, ym, t_next)) / (2.0 * h)
    nn = np.sqrt(nrm[0] ** 2 + nrm[1] ** 2 + nrm[2] ** 2)
    if nn == 0.0:
        return False
    nrm /= nn
    vc = col[C_VEL:C_VEL + 3]
    rel = vp - vc
    push = -d / dt
    vn = rel[0] * nrm[0] + rel[1] * nrm[1] + rel[2] * nrm[2] + push
    tang = rel - (rel[0] * nrm[0] + rel[1] * nrm[1] + rel[2] * nrm[2]) * nrm
    tn = np.sqrt(tang[0] ** 2 + tang[1] ** 2 + tang[2] ** 2)
    mu_f = col[C_FRICTION]
    if np.isinf(mu_f):
        scale = 0.0
    elif tn > 0.0:
        scale = max(0.0, tn - mu_f * push) / tn
    else:
        scale = 0.0
    for a in range(3):
        out[a] = vc[a] + vn * nrm[a] + scale * tang[a] - vp[a]
    return True


@njit(cache=True)
def _aux_particle(p, x, v, inv_mass, start, index, dt, rest, correct, colliders, t_next, dim,
                  halo, base, eslot):
    fallbacks = 0
    vb = np.empty(3)
    if correct:
        for e in range(start[p], start[p + 1]):
            b = index[e]
            if b <= p:
                continue
            _read_v(v, halo, base, eslot, e, b, vb)
            fb, s, n0, n1, n2 = distance_pair(p, b, vb, x, v, inv_mass, dt, rest)
            if s == 0.0:
                continue
            if fb:
                fallbacks += 1
            wp = inv_mass[p] * s
            wb = -inv_mass[b] * s
            v[p, 0] += wp * n0
            v[p, 1] += wp * n1
            v[p, 2] += wp * n2
            if base >= 0 and eslot[e] >= 0:
                k = base + eslot[e]
                halo[k, 0] += wb * n0
                halo[k, 1] += wb * n1
                halo[k, 2] += wb * n2
            else:
                v[b, 0] += wb * n0
                v[b, 1] += wb * n1
                v[b, 2] += wb * n2
    if inv_mass[p] > 0.0:
        dv = np.empty(3)
        for c in range(colliders.shape[0]):
            if boundary_dv(colliders[c], x[p], v[p], dt, t_next, dv):
                v[p, 0] += dv[0]
                v[p, 1] += dv[1]
                v[p, 2] += dv[2]
    if dim == 2:
        v[p, 2] = 0.0
    return fallbacks


@njit(cache=True, parallel=True)
def gs_aux(x, v, inv_mass, start, index, dt, rest, correct, colliders, t_next, dim,
           color_start, color_cells, cell_start, cell_particles, halo_start, halo_idx, eslot,
           halo, fallback_count):
    for col in range(color_start.shape[0] - 1):
        c0 = color_start[col]
        c1 = color_start[col + 1]
        for ci in prange(c0, c1):
            c = color_cells[ci]
            base = halo_start[c]
            for j in range(base, halo_start[c + 1]):
                halo[j, 0] = 0.0
                halo[j, 1] = 0.0
                halo[j, 2] = 0.0
            fb = 0
            for t in range(cell_start[c], cell_start[c + 1]):
                p = cell_particles[t]
                fb += _aux_particle(p, x, v, inv_mass, start, index, dt, rest, correct, colliders,
                                    t_next, dim, halo, base, eslot)
            fallback_count[c] += fb
        for ci in range(c0, c1):
            c = color_cells[ci]
            for j in range(halo_start[c], halo_start[c + 1]):
                b = halo_idx[j]
                v[b, 0] += halo[j, 0]
                v[b, 1] += halo[j, 1]
                v[b, 2] += halo[j, 2]
                if dim == 2:
                    v[b, 2] = 0.0


@njit(cache=True, parallel=True)
def jacobi_aux(x, v, inv_mass, start, index, dt, rest, correct, colliders, t_next, dim,
               pair_dv, self_dv, fallback_count):
    n = x.shape[0]
    for p in prange(n):
        fb = 0
        vb = np.empty(3)
        for e in range(start[p], start[p + 1]):
            pair_dv[e, 0] = 0.0
            pair_dv[e, 1] = 0.0
            pair_dv[e, 2] = 0.0
        self_dv[p, 0] = 0.0
        self_dv[p, 1] = 0.0
        self_dv[p, 2] = 0.0
        if correct:
            for e in range(start[p], start[p + 1]):
                b = index[e]
                if b <= p:
                    continue
                vb[0] = v[b, 0]
                vb[1] = v[b, 1]
                vb[2] = v[b, 2]
                f, s, n0, n1, n2 = distance_pair(p, b, vb, x, v, inv_mass, dt, rest)
                if s == 0.0:
                    continue
                if f:
                    fb += 1
                self_dv[p, 0] += inv_mass[p] * s * n0
                self_dv[p, 1] += inv_mass[p] * s * n1
                self_dv[p, 2] += inv_mass[p] * s * n2
                pair_dv[e, 0] = -inv_mass[b] * s * n0
                pair_dv[e, 1] = -inv_mass[b] * s * n1
                pair_dv[e, 2] = -inv_mass[b] * s * n2
        if inv_mass[p] > 0.0:
            dv = np.empty(3)
            for c in range(colliders.shape[0]):
                if boundary_dv(colliders[c], x[p], v[p], dt, t_next, dv):
                    self_dv[p, 0] += dv[0]
                    self_dv[p, 1] += dv[1]
                    self_dv[p, 2] += dv[2]
        fallback_count[p] = fb
    for p in range(n):
        for e in range(start[p], start[p + 1]):
            b = index[e]
            v[b, 0] += pair_dv[e, 0]
            v[b, 1] += pair_dv[e, 1]
            v[b, 2] += pair_dv[e, 2]
        v[p, 0] += self_dv[p, 0]
        v[p, 1] += self_dv[p, 1]
        v[p, 2] += self_dv[p, 2]
        if dim == 2:
            v[p, 2] = 0.0


# --------------------------------------------------------------------------
# end of step


@njit(cache=True, parallel=True)
def xsph(v, inv_mass, start, index, Vn, wval, c, out):
    n = v.shape[0]
    for p in prange(n):
        a0 = 0.0
        a1 = 0.0
        a2 = 0.0
        if inv_mass[p] > 0.0:
            for e in range(start[p], start[p + 1]):
                b = index[e]
                wv = c * Vn[b] * wval[e]
                a0 += wv * (v[b, 0] - v[p, 0])
                a1 += wv * (v[b, 1] - v[p, 1])
                a2 += wv * (v[b, 2] - v[p, 2])
        out[p, 0] = v[p, 0] + a0
        out[p, 1] = v[p, 1] + a1
        out[p, 2] = v[p, 2] + a2


@njit(cache=True, parallel=True)
def finalize(x, v, F, mat, hard, params, start, index, Vn, gradc, dt, dim):
    n = x.shape[0]
    dummy_halo = np.zeros((1, 3))
    dummy_slot = np.zeros(1, np.int64)
    for p in prange(n):
        G = velocity_gradient_at(p, v, start, index, Vn, gradc, dummy_halo, -1, dummy_slot)
        Ft = trial_F(F[p], G, dt)
        prm = params[mat[p]]
        Fd = np.ascontiguousarray(Ft[:dim, :dim])
        Fz = return_map_nb(prm, Fd, dt, hard[p])
        hard[p] = hardening_nb(prm, Fd, dt, hard[p])
        for i in range(dim):
            for j in range(dim):
                Ft[i, j] = Fz[i, j]
        F[p] = Ft
    for p in prange(n):
        x[p, 0] += dt * v[p, 0]
        x[p, 1] += dt * v[p, 1]
        x[p, 2] += dt * v[p, 2]
