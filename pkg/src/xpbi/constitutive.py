"""StVK-Hencky elasticity, its XPBD constraint forms, and plastic return maps.

All return maps work on the Hencky strain ``eps = log(sigma)`` of the
rotation-variant SVD ``F = U diag(sigma) V^T`` and rebuild
``F = U diag(exp(eps)) V^T``. A 2x2 ``F`` is treated as plane strain with
``d = 2`` in every deviatoric split.

Compiled kernels take a packed parameter row (see ``MaterialModel.pack``)
so the solver can call them from inside its sweeps.
"""
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from numba import njit

from .linalg import LOG_FLOOR, svd_rv

ELASTIC, VON_MISES, DRUCKER_PRAGER, NACC, HERSCHEL_BULKLEY, SNOW = range(6)
MODEL_TAGS = {"elastic": ELASTIC, "VM": VON_MISES, "DP": DRUCKER_PRAGER, "NACC": NACC,
              "HB": HERSCHEL_BULKLEY, "SnowClamp": SNOW}
PARAM_WIDTH = 12
# row layout: kind, rho, E, nu, mu, lam, then model-specific slots 6..11
K_KIND, K_RHO, K_E, K_NU, K_MU, K_LAM = range(6)

TAU_C_REL = 1e-12
_SQRT_2_3 = np.sqrt(2.0 / 3.0)


# --------------------------------------------------------------------------
# parameter sets


@dataclass(frozen=True)
class ElasticParams:
    E: float
    nu: float

    def __post_init__(self):
        if not self.E > 0:
            raise ValueError(f"Young's modulus must be positive, got {self.E}")
        if not -1.0 < self.nu < 0.5:
            raise ValueError(f"Poisson ratio must lie in (-1, 0.5), got {self.nu}")

    @property
    def mu(self) -> float:
        return self.E / (2.0 * (1.0 + self.nu))

    @property
    def lam(self) -> float:
        return self.E * self.nu / ((1.0 + self.nu) * (1.0 - 2.0 * self.nu))


@dataclass(frozen=True)
class VonMises:
    sigma_y: float

    def __post_init__(self):
        if self.sigma_y < 0:
            raise ValueError("yield stress must be non-negative")


@dataclass(frozen=True)
class DruckerPrager:
    friction_angle: float  # degrees
    cohesion: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.friction_angle < 90.0:
            raise ValueError("friction angle must lie in [0, 90) degrees")
        if self.cohesion < 0:
            raise ValueError("cohesion must be non-negative")


@dataclass(frozen=True)
class CamClay:
    """Non-associated Cam-Clay: hardening state alpha0, cohesion ratio beta,
    hardening factor xi, critical-state slope M."""

    alpha0: float
    beta: float
    xi: float
    M: float

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.xi < 0 or self.M <= 0:
            raise ValueError("xi must be >= 0 and M > 0")


@dataclass(frozen=True)
class HerschelBulkley:
    sigma_y: float
    h: float
    eta: float

    def __post_init__(self):
        if self.sigma_y < 0 or self.h <= 0 or self.eta <= 0:
            raise ValueError("need sigma_y >= 0, h > 0 and eta > 0")


@dataclass(frozen=True)
class SnowClamp:
    theta_c: float
    theta_s: float
    xi: float = 10.0

    def __post_init__(self):
        if not (0.0 < self.theta_c < 1.0 and self.theta_s > 0.0):
            raise ValueError("need 0 < theta_c < 1 and theta_s > 0")
        if self.xi < 0:
            raise ValueError("hardening coefficient must be non-negative")


PlasticModel = Optional[Union[VonMises, DruckerPrager, CamClay, HerschelBulkley, SnowClamp]]
_ARITY = {"elastic": 0, "VM": 1, "DP": 2, "NACC": 4, "HB": 3, "SnowClamp": 3}


@dataclass(frozen=True)
class MaterialModel:
    density: float
    elastic: ElasticParams
    plastic: PlasticModel = None

    def __post_init__(self):
        if not self.density > 0:
            raise ValueError("density must be positive")

    @property
    def tag(self) -> str:
        return {type(None): "elastic", VonMises: "VM", DruckerPrager: "DP", CamClay: "NACC",
                HerschelBulkley: "HB", SnowClamp: "SnowClamp"}[type(self.plastic)]

    @classmethod
    def from_tuple(cls, tag: str, params) -> "MaterialModel":
        """Build from a flat tuple ``(rho, E, nu, *model_params)``.

        Model parameters follow the usual ordering: NACC (alpha0, beta, xi, M),
        DP (friction angle, cohesion), VM (sigma_y), HB (sigma_y, h, eta),
        SnowClamp (theta_c, theta_s, xi).
        """
        if tag not in _ARITY:
            raise ValueError(f"unknown material tag {tag!r}; expected one of {sorted(_ARITY)}")
        params = [float(p) for p in params]
        if len(params) != 3 + _ARITY[tag]:
            raise ValueError(f"{tag} expects {3 + _ARITY[tag]} parameters, got {len(params)}")
        rho, E, nu, *rest = params
        plastic = {"elastic": lambda: None, "VM": lambda: VonMises(*rest),
                   "DP": lambda: DruckerPrager(*rest), "NACC": lambda: CamClay(*rest),
                   "HB": lambda: HerschelBulkley(*rest), "SnowClamp": lambda: SnowClamp(*rest)}[tag]()
        return cls(rho, ElasticParams(E, nu), plastic)

    def as_tuple(self) -> tuple:
        p = self.plastic
        rest = {
            type(None): lambda: (),
            VonMises: lambda: (p.sigma_y,),
            DruckerPrager: lambda: (p.friction_angle, p.cohesion),
            CamClay: lambda: (p.alpha0, p.beta, p.xi, p.M),
            HerschelBulkley: lambda: (p.sigma_y, p.h, p.eta),
            SnowClamp: lambda: (p.theta_c, p.theta_s, p.xi),
        }[type(p)]()
        return (self.density, self.elastic.E, self.elastic.nu) + rest

    def initial_hardening(self) -> float:
        if isinstance(self.plastic, CamClay):
            return self.plastic.alpha0
        if isinstance(self.plastic, SnowClamp):
            return 1.0
        return 0.0

    def pack(self) -> np.ndarray:
        row = np.zeros(PARAM_WIDTH)
        row[K_KIND] = MODEL_TAGS[self.tag]
        row[K_RHO] = self.density
        row[K_E] = self.elastic.E
        row[K_NU] = self.elastic.nu
        row[K_MU] = self.elastic.mu
        row[K_LAM] = self.elastic.lam
        p = self.plastic
        if isinstance(p, VonMises):
            row[6] = p.sigma_y
        elif isinstance(p, DruckerPrager):
            s = np.sin(np.radians(p.friction_angle))
            row[6] = p.friction_angle
            row[7] = p.cohesion
            row[8] = _SQRT_2_3 * 2.0 * s / (3.0 - s)
        elif isinstance(p, CamClay):
            row[6:10] = (p.alpha0, p.beta, p.xi, p.M)
        elif isinstance(p, HerschelBulkley):
            row[6:9] = (p.sigma_y, p.h, p.eta)
        elif isinstance(p, SnowClamp):
            row[6:9] = (p.theta_c, p.theta_s, p.xi)
        return row


# --------------------------------------------------------------------------
# compiled kernels


@njit(cache=True)
def _principal(F):
    U, s, V = svd_rv(F)
    eps = np.empty(s.shape[0])
    for i in range(s.shape[0]):
        eps[i] = np.log(max(s[i], LOG_FLOOR))
    return U, s, eps, V


@njit(cache=True)
def _rebuild(U, diag, V):
    n = U.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for k in range(n):
                acc += U[i, k] * diag[k] * V[j, k]
            out[i, j] = acc
    return out


@njit(cache=True)
def psi_eps(eps, mu, lam):
    tr = 0.0
    sq = 0.0
    for i in range(eps.shape[0]):
        tr += eps[i]
        sq += eps[i] * eps[i]
    return mu * sq + 0.5 * lam * tr * tr


@njit(cache=True)
def energy_nb(F, mu, lam):
    U, s, eps, V = _principal(F)
    return psi_eps(eps, mu, lam)


@njit(cache=True)
def psi_and_grad(F, mu, lam):
    """Energy density and its F-derivative (first Piola stress)."""
    U, s, eps, V = _principal(F)
    n = eps.shape[0]
    tr = 0.0
    for i in range(n):
        tr += eps[i]
    dpsi = np.zeros(n)
    for i in range(n):
        if s[i] > LOG_FLOOR:
            dpsi[i] = (2.0 * mu * eps[i] + lam * tr) / s[i]
    return psi_eps(eps, mu, lam), _rebuild(U, dpsi, V)


@njit(cache=True)
def constraint_and_grad(F, mu, lam):
    """``C = sqrt(2 psi)`` and ``dC/dF``; the gradient is zeroed near C = 0."""
    psi, P = psi_and_grad(F, mu, lam)
    two_psi = 2.0 * psi
    n = F.shape[0]
    if two_psi < TAU_C_REL * mu:
        return np.sqrt(max(two_psi, 0.0)), np.zeros((n, n))
    C = np.sqrt(two_psi)
    return C, P / C


@njit(cache=True)
def lame_scale(params, hard):
    if int(params[K_KIND]) == SNOW:
        return np.exp(params[8] * (1.0 - hard))
    return 1.0


@njit(cache=True)
def _nacc_p0(params, alpha, kappa):
    return kappa * (1e-5 + np.sinh(params[8] * max(-alpha, 0.0)))


@njit(cache=True)
def _split(eps):
    n = eps.shape[0]
    tr = 0.0
    for i in range(n):
        tr += eps[i]
    dev = np.empty(n)
    nrm = 0.0
    for i in range(n):
        dev[i] = eps[i] - tr / n
        nrm += dev[i] * dev[i]
    return tr, dev, np.sqrt(nrm)


@njit(cache=True)
def _hb_stress(s_tr, s_y, two_mu_dt, eta, h):
    # solve s - s_tr + 2 mu dt ((s - s_y)/eta)^(1/h) = 0 on [s_y, s_tr]
    lo = s_y
    hi = s_tr
    tol = 1e-10 * s_tr
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        g = mid - s_tr + two_mu_dt * ((mid - s_y) / eta) ** (1.0 / h)
        if g > 0.0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


@njit(cache=True)
def project_strain(params, eps, dt, hard):
    """Project Hencky strain onto the yield surface.

    Returns ``(eps_new, changed, volumetric_target)`` where the last entry
    is the trace of the strain that plastic hardening should move towards
    (only meaningful for NACC).
    """
    kind = int(params[K_KIND])
    mu = params[K_MU]
    lam = params[K_LAM]
    n = eps.shape[0]
    tr, dev, dnorm = _split(eps)
    out = eps.copy()
    if kind == VON_MISES or kind == HERSCHEL_BULKLEY:
        s_tr = 2.0 * mu * dnorm
        s_y = _SQRT_2_3 * params[6]
        if s_tr <= s_y:
            return out, False, tr
        if kind == VON_MISES:
            s_new = s_y
        else:
            s_new = _hb_stress(s_tr, s_y, 2.0 * mu * dt, params[8], params[7])
        scale = s_new / s_tr
        for i in range(n):
            out[i] = tr / n + dev[i] * scale
        return out, True, tr
    if kind == DRUCKER_PRAGER:
        c0 = params[7]
        alpha = params[8]
        tr_c = tr - n * c0
        if tr_c > 0.0:
            for i in range(n):
                out[i] = c0
            return out, True, tr
        dgamma = dnorm + (n * lam + 2.0 * mu) / (2.0 * mu) * tr_c * alpha
        if dgamma <= 0.0:
            return out, False, tr
        for i in range(n):
            out[i] = eps[i] - dgamma * dev[i] / dnorm
        return out, True, tr
    if kind == NACC:
        beta = params[7]
        M = params[9]
        kappa = lam + 2.0 * mu / n
        p0 = _nacc_p0(params, hard, kappa)
        p = -kappa * tr
        qf = np.sqrt((6.0 - n) / 2.0) * 2.0 * mu
        q = qf * dnorm
        if p > p0:
            t = -p0 / kappa
            for i in range(n):
                out[i] = t / n
            return out, True, t
        if p < -beta * p0:
            t = beta * p0 / kappa
            for i in range(n):
                out[i] = t / n
            return out, True, t
        y = (1.0 + 2.0 * beta) * q * q + M * M * (p + beta * p0) * (p - p0)
        if y <= 0.0:
            return out, False, tr
        q_new = np.sqrt(max(-M * M * (p + beta * p0) * (p - p0) / (1.0 + 2.0 * beta), 0.0))
        scale = q_new / q
        for i in range(n):
            out[i] = tr / n + dev[i] * scale
        # hardening target: intersection of the ray centre -> trial with the surface
        p_c = 0.5 * (1.0 - beta) * p0
        a = 0.5 * (1.0 + beta) * p0
        dp = p - p_c
        t = M * a / np.sqrt((1.0 + 2.0 * beta) * q * q + M * M * dp * dp)
        p_x = p_c + t * dp
        return out, True, -p_x / kappa
    return out, False, tr


@njit(cache=True)
def return_map_nb(params, F, dt, hard):
    kind = int(params[K_KIND])
    if kind == ELASTIC:
        return F.copy()
    U, s, eps, V = _principal(F)
    n = s.shape[0]
    if kind == SNOW:
        lo = 1.0 - params[6]
        hi = 1.0 + params[7]
        changed = False
        c = s.copy()
        for i in range(n):
            if c[i] < lo:
                c[i] = lo
                changed = True
            elif c[i] > hi:
                c[i] = hi
                changed = True
        if not changed:
            return F.copy()
        return _rebuild(U, c, V)
    eps_new, changed, _ = project_strain(params, eps, dt, hard)
    if not changed:
        return F.copy()
    return _rebuild(U, np.exp(eps_new), V)


@njit(cache=True)
def hardening_nb(params, F_trial, dt, hard):
    """Hardening state after plastically projecting ``F_trial``."""
    kind = int(params[K_KIND])
    if kind == NACC:
        U, s, eps, V = _principal(F_trial)
        tr = 0.0
        for i in range(eps.shape[0]):
            tr += eps[i]
        _, changed, target = project_strain(params, eps, dt, hard)
        if changed:
            return hard + tr - target
        return hard
    if kind == SNOW:
        U, s, V = svd_rv(F_trial)
        lo = 1.0 - params[6]
        hi = 1.0 + params[7]
        ratio = 1.0
        for i in range(s.shape[0]):
            si = max(s[i], LOG_FLOOR)
            ratio *= si / min(max(si, lo), hi)
        return hard * ratio
    return hard


@njit(cache=True)
def yield_nb(params, F, hard):
    kind = int(params[K_KIND])
    mu = params[K_MU]
    lam = params[K_LAM]
    if kind == SNOW:
        U, s, V = svd_rv(F)
        worst = -np.inf
        for i in range(s.shape[0]):
            worst = max(worst, (s[i] - 1.0 - params[7]) / params[7])
            worst = max(worst, (1.0 - params[6] - s[i]) / params[6])
        return worst
    U, s, eps, V = _principal(F)
    n = eps.shape[0]
    tr, dev, dnorm = _split(eps)
    if kind == VON_MISES or kind == HERSCHEL_BULKLEY:
        s_y = _SQRT_2_3 * params[6]
        ref = s_y if s_y > 0.0 else 2.0 * mu
        return (2.0 * mu * dnorm - s_y) / ref
    if kind == DRUCKER_PRAGER:
        tr_c = tr - n * params[7]
        return dnorm + (n * lam + 2.0 * mu) / (2.0 * mu) * tr_c * params[8]
    if kind == NACC:
        beta = params[7]
        M = params[9]
        kappa = lam + 2.0 * mu / n
        p0 = _nacc_p0(params, hard, kappa)
        p = -kappa * tr
        q = np.sqrt((6.0 - n) / 2.0) * 2.0 * mu * dnorm
        a = 0.5 * (1.0 + beta) * p0
        y = (1.0 + 2.0 * beta) * q * q + M * M * (p + beta * p0) * (p - p0)
        # outside the pressure cap the ellipse value alone can be negative
        y_n = y / (M * M * a * a)
        y_n = max(y_n, (p - p0) / a)
        y_n = max(y_n, (-beta * p0 - p) / a)
        return y_n
    return -np.inf


# --------------------------------------------------------------------------
# public value functions


def _mat(F) -> np.ndarray:
    A = np.ascontiguousarray(F, dtype=np.float64)
    if A.shape not in ((2, 2), (3, 3)):
        raise ValueError(f"expected a 2x2 or 3x3 deformation gradient, got {A.shape}")
    return A


def energy_density(elastic: ElasticParams, F) -> float:
    """Hencky StVK energy density ``mu tr(log S^2) + lam/2 (tr log S)^2``."""
    return float(energy_nb(_mat(F), elastic.mu, elastic.lam))


def energy_gradient(elastic: ElasticParams, F) -> np.ndarray:
    return psi_and_grad(_mat(F), elastic.mu, elastic.lam)[1]


def constraint_value(elastic: ElasticParams, F, V0: float):
    """Single-constraint form: ``C = sqrt(2 psi)`` with compliance ``1/V0``."""
    if V0 <= 0:
        raise ValueError("rest volume must be positive")
    psi = energy_density(elastic, F)
    return float(np.sqrt(2.0 * psi)), 1.0 / V0


def constraint_pair(elastic: ElasticParams, F, V0: float):
    """Two-constraint form splitting the shear and volumetric terms."""
    if V0 <= 0:
        raise ValueError("rest volume must be positive")
    _, _, eps, _ = _principal(_mat(F))
    c_mu = float(np.sqrt(np.sum(eps * eps)))
    c_lam = float(np.sum(eps))
    return (c_mu, 1.0 / (2.0 * elastic.mu * V0)), (c_lam, 1.0 / (elastic.lam * V0))


def dC_dF(elastic: ElasticParams, F) -> np.ndarray:
    return constraint_and_grad(_mat(F), elastic.mu, elastic.lam)[1]


def return_map(model: MaterialModel, F_trial, dt: float, hardening: Optional[float] = None) -> np.ndarray:
    """Project a trial deformation gradient back onto the yield surface."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    hard = model.initial_hardening() if hardening is None else hardening
    return return_map_nb(model.pack(), _mat(F_trial), float(dt), float(hard))


def update_hardening(model: MaterialModel, F_trial, dt: float, hardening: float) -> float:
    return float(hardening_nb(model.pack(), _mat(F_trial), float(dt), float(hardening)))


def yield_value(model: MaterialModel, F, hardening: Optional[float] = None) -> float:
    """Normalised yield function: <= 0 inside or on the surface.

    Normalisation is per model: VM and HB by the yield stress, DP by
    ``2 mu`` (strain units), NACC by the ellipse depth, snow by the
    critical stretches.
    """
    if model.plastic is None:
        raise ValueError("purely elastic material has no yield surface")
    hard = model.initial_hardening() if hardening is None else hardening
    return float(yield_nb(model.pack(), _mat(F), float(hard)))
