"""Small dense algebra for deformation gradients.

The SVD here is a one-sided Jacobi sweep specialised to 2x2 and 3x3
matrices. It is several times faster than a LAPACK call from numba for
these sizes and keeps relative accuracy for nearly singular inputs.
The sign convention is rotation-variant: U and V are proper rotations
and a reflection, if any, shows up as a negative last singular value.
"""
from typing import NamedTuple

import numpy as np
from numba import njit

LOG_FLOOR = 1e-6
PINV_CUTOFF = 1e-6

_JACOBI_TOL = 1e-15
_JACOBI_SWEEPS = 30


class SvdTriple(NamedTuple):
    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray


@njit(cache=True)
def _det(M):
    n = M.shape[0]
    if n == 2:
        return M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
    return (M[0, 0] * (M[1, 1] * M[2, 2] - M[1, 2] * M[2, 1])
            - M[0, 1] * (M[1, 0] * M[2, 2] - M[1, 2] * M[2, 0])
            + M[0, 2] * (M[1, 0] * M[2, 1] - M[1, 1] * M[2, 0]))


@njit(cache=True)
def svd_rv(M):
    """Rotation-variant SVD of a 2x2 or 3x3 matrix, returns (U, sigma, V)."""
    n = M.shape[0]
    A = np.empty((n, n))
    V = np.zeros((n, n))
    for i in range(n):
        V[i, i] = 1.0
        for j in range(n):
            A[i, j] = M[i, j]

    # orthogonalise the columns of A by right rotations, accumulated in V
    for _ in range(_JACOBI_SWEEPS):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                a = 0.0
                b = 0.0
                g = 0.0
                for r in range(n):
                    a += A[r, i] * A[r, i]
                    b += A[r, j] * A[r, j]
                    g += A[r, i] * A[r, j]
                if g == 0.0 or abs(g) <= _JACOBI_TOL * np.sqrt(a * b):
                    continue
                rotated = True
                zeta = (b - a) / (2.0 * g)
                t = 1.0 / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                if zeta < 0.0:
                    t = -t
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for r in range(n):
                    ai = A[r, i]
                    aj = A[r, j]
                    A[r, i] = c * ai - s * aj
                    A[r, j] = s * ai + c * aj
                    vi = V[r, i]
                    vj = V[r, j]
                    V[r, i] = c * vi - s * vj
                    V[r, j] = s * vi + c * vj
        if not rotated:
            break

    norms = np.empty(n)
    for i in range(n):
        acc = 0.0
        for r in range(n):
            acc += A[r, i] * A[r, i]
        norms[i] = np.sqrt(acc)
    # descending order by a tiny insertion sort (n <= 3)
    order = np.empty(n, np.int64)
    for i in range(n):
        order[i] = i
    for i in range(1, n):
        k = i
        while k > 0 and norms[order[k]] > norms[order[k - 1]]:
            tmp = order[k]
            order[k] = order[k - 1]
            order[k - 1] = tmp
            k -= 1
    As = np.empty((n, n))
    Vs = np.empty((n, n))
    for k in range(n):
        for r in range(n):
            As[r, k] = A[r, order[k]]
            Vs[r, k] = V[r, order[k]]
    if _det(Vs) < 0.0:
        for r in range(n):
            Vs[r, n - 1] = -Vs[r, n - 1]
            As[r, n - 1] = -As[r, n - 1]

    U = np.zeros((n, n))
    sigma = np.zeros(n)
    s0 = norms[order[0]]
    if s0 == 0.0:
        for i in range(n):
            U[i, i] = 1.0
        return U, sigma, Vs
    for r in range(n):
        U[r, 0] = As[r, 0] / s0
    sigma[0] = s0

    if n == 2:
        U[0, 1] = -U[1, 0]
        U[1, 1] = U[0, 0]
        sigma[1] = U[0, 1] * As[0, 1] + U[1, 1] * As[1, 1]
        return U, sigma, Vs

    # second column: Gram-Schmidt against u0, or any perpendicular if ~0
    proj = 0.0
    for r in range(3):
        proj += U[r, 0] * As[r, 1]
    u1 = np.empty(3)
    for r in range(3):
        u1[r] = As[r, 1] - proj * U[r, 0]
    nrm = np.sqrt(u1[0] * u1[0] + u1[1] * u1[1] + u1[2] * u1[2])
    if nrm <= 1e-300:
        k = 0
        if abs(U[1, 0]) < abs(U[k, 0]):
            k = 1
        if abs(U[2, 0]) < abs(U[k, 0]):
            k = 2
        e = np.zeros(3)
        e[k] = 1.0
        proj = U[k, 0]
        for r in range(3):
            u1[r] = e[r] - proj * U[r, 0]
        nrm = np.sqrt(u1[0] * u1[0] + u1[1] * u1[1] + u1[2] * u1[2])
        sigma[1] = 0.0
    else:
        sigma[1] = nrm
    for r in range(3):
        U[r, 1] = u1[r] / nrm
    if sigma[1] != 0.0:
        acc = 0.0
        for r in range(3):
            acc += U[r, 1] * As[r, 1]
        sigma[1] = acc
    U[0, 2] = U[1, 0] * U[2, 1] - U[2, 0] * U[1, 1]
    U[1, 2] = U[2, 0] * U[0, 1] - U[0, 0] * U[2, 1]
    U[2, 2] = U[0, 0] * U[1, 1] - U[1, 0] * U[0, 1]
    acc = 0.0
    for r in range(3):
        acc += U[r, 2] * As[r, 2]
    sigma[2] = acc
    return U, sigma, Vs


@njit(cache=True)
def pinv_nb(M, cutoff):
    n = M.shape[0]
    U, s, V = svd_rv(M)
    out = np.zeros((n, n))
    smax = abs(s[0])
    if smax == 0.0:
        return out
    for k in range(n):
        if abs(s[k]) < cutoff * smax:
            continue
        inv = 1.0 / s[k]
        for i in range(n):
            vik = V[i, k] * inv
            for j in range(n):
                out[i, j] += vik * U[j, k]
    return out


@njit(cache=True)
def log_clamped_nb(sigma, floor):
    out = np.empty(sigma.shape[0])
    for i in range(sigma.shape[0]):
        out[i] = np.log(max(sigma[i], floor))
    return out


def _as_square(M) -> np.ndarray:
    A = np.ascontiguousarray(M, dtype=np.float64)
    if A.shape not in ((2, 2), (3, 3)):
        raise ValueError(f"expected a 2x2 or 3x3 matrix, got shape {A.shape}")
    return A


def svd3(M) -> SvdTriple:
    """SVD with proper-rotation factors.

    ``U @ diag(sigma) @ V.T`` reconstructs ``M``; ``sigma`` is descending
    and only its last entry may be negative.
    """
    U, s, V = svd_rv(_as_square(M))
    return SvdTriple(U, s, V)


def pseudo_inverse(M, cutoff: float = PINV_CUTOFF) -> np.ndarray:
    """SVD pseudo-inverse; singular values below ``cutoff * sigma_max`` are dropped."""
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    return pinv_nb(_as_square(M), float(cutoff))


def log_clamped(sigma, floor: float = LOG_FLOOR) -> np.ndarray:
    """Componentwise ``log(max(sigma, floor))``."""
    if floor <= 0:
        raise ValueError("floor must be positive")
    return log_clamped_nb(np.ascontiguousarray(sigma, dtype=np.float64), float(floor))
