"""Wendland C2 smoothing kernel and first-order gradient correction."""
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from numpy.polynomial import Polynomial

from .linalg import PINV_CUTOFF, pinv_nb

# unnormalised profile f(q) = (1 - q/2)^4 (2q + 1) on q in [0, 2], q = dist / r
_PROFILE = Polynomial([1.0, -0.5]) ** 4 * Polynomial([1.0, 2.0])
_SPHERE_AREA = {2: 2.0 * np.pi, 3: 4.0 * np.pi}


def _unit_normalization(d: int) -> float:
    moment = (_PROFILE * Polynomial([0.0] * (d - 1) + [1.0])).integ()
    return 1.0 / (_SPHERE_AREA[d] * (moment(2.0) - moment(0.0)))


_NORM_UNIT = {d: _unit_normalization(d) for d in (2, 3)}


@dataclass(frozen=True)
class KernelSpec:
    """Kernel with particle radius ``r`` and compact support ``k = 2r``."""

    r: float
    d: int = 3
    k: float = field(init=False)
    normalization: float = field(init=False)

    def __post_init__(self):
        if self.r <= 0:
            raise ValueError("particle radius must be positive")
        if self.d not in (2, 3):
            raise ValueError("dimension must be 2 or 3")
        object.__setattr__(self, "k", 2.0 * self.r)
        object.__setattr__(self, "normalization", _NORM_UNIT[self.d] / self.r**self.d)


@njit(cache=True)
def w_value(dist, r, norm):
    q = dist / r
    if q >= 2.0:
        return 0.0
    t = 1.0 - 0.5 * q
    return norm * t * t * t * t * (2.0 * q + 1.0)


@njit(cache=True)
def w_grad(xp, xb, r, norm, out):
    """Write grad_xp W(|xp - xb|) into ``out``."""
    dx0 = xp[0] - xb[0]
    dx1 = xp[1] - xb[1]
    dx2 = xp[2] - xb[2]
    dist = np.sqrt(dx0 * dx0 + dx1 * dx1 + dx2 * dx2)
    q = dist / r
    if q >= 2.0:
        out[0] = 0.0
        out[1] = 0.0
        out[2] = 0.0
        return
    t = 1.0 - 0.5 * q
    # dW/dq = -5 q t^3, and dq/dxp = (xp - xb) / (r dist)
    c = -5.0 * norm * t * t * t / (r * r)
    out[0] = c * dx0
    out[1] = c * dx1
    out[2] = c * dx2


@njit(cache=True)
def moment_matrix(xp, xs, vols, r, norm):
    M = np.zeros((3, 3))
    g = np.empty(3)
    for j in range(xs.shape[0]):
        w_grad(xp, xs[j], r, norm, g)
        for a in range(3):
            for b in range(3):
                M[a, b] += vols[j] * g[a] * (xs[j, b] - xp[b])
    return M


def kernel_value(spec: KernelSpec, dist: float) -> float:
    if dist < 0:
        raise ValueError("distance must be non-negative")
    return w_value(float(dist), spec.r, spec.normalization)


def kernel_gradient(spec: KernelSpec, xp, xb) -> np.ndarray:
    """Gradient of ``W(|xb - xp|)`` with respect to ``xp``."""
    out = np.empty(3)
    w_grad(_vec3(xp), _vec3(xb), spec.r, spec.normalization, out)
    return out


def correction_matrix(spec: KernelSpec, xp, neighbors, cutoff: float = PINV_CUTOFF) -> np.ndarray:
    """Pseudo-inverse of the kernel moment matrix at ``xp``.

    ``neighbors`` is a sequence of ``(xb, Vb)`` pairs. An empty
    neighbourhood gives the zero matrix.
    """
    if len(neighbors) == 0:
        return np.zeros((3, 3))
    xs = np.array([_vec3(xb) for xb, _ in neighbors])
    vols = np.array([float(vb) for _, vb in neighbors])
    M = moment_matrix(_vec3(xp), xs, vols, spec.r, spec.normalization)
    return pinv_nb(M, cutoff)


def _vec3(x) -> np.ndarray:
    a = np.zeros(3)
    x = np.asarray(x, dtype=np.float64)
    a[: x.shape[0]] = x
    return a
