"""Multivariate Gaussian and Student-t under two precision parameterizations.

All functions are vectorized over observation rows: ``y``, ``mu`` are
(N, D), the Cholesky factor is (N, D, D), the low-rank parts are (N, D)
and (N, D, R), and ``nu`` is (N,) or a scalar. ``nu=None`` selects the
Gaussian; any other value the Student-t.

Derivatives are per coordinate of the parameterization (element of mu,
element of the lower-triangular factor, diagonal entry, V entry, or nu).
Several second-derivative displays in the literature carry sign or index
typos; everything here is the exact coordinate-wise derivative and is
validated against finite differences of the log-likelihood.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import lgamma

import numpy as np
import scipy.linalg
import scipy.special

from .scale import CholeskyPrecision, LowRankPrecision, SingularMatrixError
from .special import digamma, trigamma

__all__ = [
    "MvParams",
    "chol_core",
    "loglik_chol",
    "dmu_chol",
    "d2mu_chol",
    "dchol",
    "d2chol",
    "loglik_lowrank",
    "dmu_lowrank",
    "d2mu_lowrank",
    "dlra_diag",
    "d2lra_diag",
    "dlra_v",
    "d2lra_v",
    "dnu",
    "d2nu",
    "sample_chol",
    "sample_lowrank",
    "loglik_params",
    "sample_params",
]

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class MvParams:
    """Distribution parameters for a single observation/forecast."""

    mu: np.ndarray
    scale: CholeskyPrecision | LowRankPrecision
    nu: float | None = None

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        if mu.ndim != 1 or mu.shape[0] != self.scale.dim:
            raise ValueError("mu must be a vector matching the scale dimension")
        if self.nu is not None and self.nu <= 2.0:
            raise ValueError("degrees of freedom must exceed 2")
        object.__setattr__(self, "mu", mu)


def _check_finite(*arrays):
    for a in arrays:
        if a is not None and not np.all(np.isfinite(a)):
            raise ValueError("non-finite values in distribution inputs")


def _nu_array(nu, n):
    if nu is None:
        return None
    nu = np.asarray(nu, dtype=float)
    if np.any(nu <= 2.0):
        raise ValueError("degrees of freedom must exceed 2")
    return np.broadcast_to(nu, (n,)).astype(float)


# ---------------------------------------------------------------------------
# Cholesky parameterization: Omega = B' B, B lower triangular, diag(B) > 0


def chol_core(y, mu, factor):
    """Residual r, whitened residual z = B r and quadratic form z'z."""
    r = np.asarray(y, dtype=float) - np.asarray(mu, dtype=float)
    zvec = np.einsum("nij,nj->ni", factor, r)
    zz = np.einsum("ni,ni->n", zvec, zvec)
    return r, zvec, zz


def _t_const(nu, d):
    """Normalizing constant of the t density, log scale, without |Omega|."""
    return (
        scipy.special.gammaln((nu + d) / 2.0)
        - scipy.special.gammaln(nu / 2.0)
        - 0.5 * d * np.log(nu * np.pi)
    )


def loglik_chol(y, mu, factor, nu=None):
    """Log-likelihood per row; log|Omega|^(1/2) is the sum of log diag(B)."""
    y = np.asarray(y, dtype=float)
    _check_finite(y, mu, factor)
    n, d = y.shape
    nu = _nu_array(nu, n)
    diag = np.diagonal(factor, axis1=1, axis2=2)
    if np.any(diag <= 0.0):
        raise SingularMatrixError("Cholesky factor diagonal must be positive")
    logdet_half = np.sum(np.log(diag), axis=1)
    _, _, zz = chol_core(y, mu, factor)
    if nu is None:
        return -0.5 * d * _LOG_2PI + logdet_half - 0.5 * zz
    return _t_const(nu, d) + logdet_half - 0.5 * (nu + d) * np.log1p(zz / nu)


def dmu_chol(y, mu, factor, nu=None):
    r, zvec, zz = chol_core(y, mu, factor)
    s = np.einsum("nij,ni->nj", factor, zvec)  # Omega r
    if nu is None:
        return s
    nu = _nu_array(nu, y.shape[0])
    c = (y.shape[1] + nu) / (zz + nu)
    return c[:, None] * s


def d2mu_chol(y, mu, factor, nu=None):
    r, zvec, zz = chol_core(y, mu, factor)
    omega_diag = np.einsum("nki,nki->ni", factor, factor)
    if nu is None:
        return -omega_diag
    nu = _nu_array(nu, y.shape[0])
    d = y.shape[1]
    s = np.einsum("nij,ni->nj", factor, zvec)
    denom = (zz + nu)[:, None]
    return (d + nu)[:, None] * (2.0 * s**2 - omega_diag * denom) / denom**2


def dchol(y, mu, factor, nu=None):
    """d loglik / d B_ij on the lower triangle (upper triangle zero)."""
    r, zvec, zz = chol_core(y, mu, factor)
    n, d = r.shape
    quad = np.einsum("ni,nj->nij", zvec, r)
    if nu is not None:
        nu = _nu_array(nu, n)
        quad = quad * ((d + nu) / (zz + nu))[:, None, None]
    out = -quad
    diag = np.diagonal(factor, axis1=1, axis2=2)
    idx = np.arange(d)
    out[:, idx, idx] += 1.0 / diag
    return np.tril(out)


def d2chol(y, mu, factor, nu=None):
    r, zvec, zz = chol_core(y, mu, factor)
    n, d = r.shape
    if nu is None:
        out = np.broadcast_to(-np.square(r)[:, None, :], (n, d, d)).copy()
    else:
        nu = _nu_array(nu, n)
        denom = zz + nu
        quad = np.einsum("ni,nj->nij", zvec, r)
        out = (
            -(d + nu)[:, None, None]
            * (np.square(r)[:, None, :] * denom[:, None, None] - 2.0 * quad**2)
            / denom[:, None, None] ** 2
        )
    diag = np.diagonal(factor, axis1=1, axis2=2)
    idx = np.arange(d)
    out[:, idx, idx] -= 1.0 / diag**2
    return np.tril(out)


# ---------------------------------------------------------------------------
# Low-rank parameterization: Omega = diag(a) + V V'


def lowrank_core(y, mu, diag, v):
    """Residual, V-projection t = V'r, quadratic form and per-row Sigma."""
    r = np.asarray(y, dtype=float) - np.asarray(mu, dtype=float)
    t = np.einsum("ndr,nd->nr", v, r)
    zz = np.einsum("nd,nd->n", r * diag, r) + np.einsum("nr,nr->n", t, t)
    omega = np.einsum("nir,njr->nij", v, v)
    idx = np.arange(r.shape[1])
    omega[:, idx, idx] += diag
    return r, t, zz, omega


def _batch_inverse_pd(omega):
    try:
        chol = np.linalg.cholesky(omega)
    except np.linalg.LinAlgError as err:
        raise SingularMatrixError("precision matrix is not positive definite") from err
    sigma = np.linalg.inv(omega)
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
    return sigma, logdet


def loglik_lowrank(y, mu, diag, v, nu=None):
    y = np.asarray(y, dtype=float)
    _check_finite(y, mu, diag, v)
    if np.any(np.asarray(diag) <= 0.0):
        raise SingularMatrixError("low-rank diagonal must be positive")
    n, d = y.shape
    nu = _nu_array(nu, n)
    _, _, zz, omega = lowrank_core(y, mu, diag, v)
    _, logdet = _batch_inverse_pd(omega)
    if nu is None:
        return -0.5 * d * _LOG_2PI + 0.5 * logdet - 0.5 * zz
    return _t_const(nu, d) + 0.5 * logdet - 0.5 * (nu + d) * np.log1p(zz / nu)


def dmu_lowrank(y, mu, diag, v, nu=None):
    r, t, zz, omega = lowrank_core(y, mu, diag, v)
    s = np.einsum("nij,nj->ni", omega, r)
    if nu is None:
        return s
    nu = _nu_array(nu, y.shape[0])
    c = (y.shape[1] + nu) / (zz + nu)
    return c[:, None] * s


def d2mu_lowrank(y, mu, diag, v, nu=None):
    r, t, zz, omega = lowrank_core(y, mu, diag, v)
    omega_diag = np.diagonal(omega, axis1=1, axis2=2)
    if nu is None:
        return -omega_diag
    nu = _nu_array(nu, y.shape[0])
    d = y.shape[1]
    s = np.einsum("nij,nj->ni", omega, r)
    denom = (zz + nu)[:, None]
    return (d + nu)[:, None] * (2.0 * s**2 - omega_diag * denom) / denom**2


def dlra_diag(y, mu, diag, v, nu=None):
    r, t, zz, omega = lowrank_core(y, mu, diag, v)
    sigma, _ = _batch_inverse_pd(omega)
    sigma_diag = np.diagonal(sigma, axis1=1, axis2=2)
    if nu is None:
        return 0.5 * (sigma_diag - np.square(r))
    nu = _nu_array(nu, y.shape[0])
    c = (y.shape[1] + nu) / (zz + nu)
    return 0.5 * (sigma_diag - c[:, None] * np.square(r))


def d2lra_diag(y, mu, diag, v, nu=None):
    r, t, zz, omega = lowrank_core(y, mu, diag, v)
    sigma, _ = _batch_inverse_pd(omega)
    sigma_diag = np.diagonal(sigma, axis1=1, axis2=2)
    if nu is None:
        return -0.5 * np.square(sigma_diag)
    nu = _nu_array(nu, y.shape[0])
    denom = (zz + nu)[:, None]
    return -0.5 * np.square(sigma_diag) + 0.5 * (
        (y.shape[1] + nu)[:, None] * np.power(r, 4) / denom**2
    )


def dlra_v(y, mu, diag, v, nu=None):
    """d loglik / d V_ic = (Sigma V)_ic minus the quadratic-form term."""
    r, t, zz, omega = lowrank_core(y, mu, diag, v)
    sigma, _ = _batch_inverse_pd(omega)
    sv = np.einsum("nij,njc->nic", sigma, v)
    quad = np.einsum("ni,nc->nic", r, t)
    if nu is None:
        return sv - quad
    nu = _nu_array(nu, y.shape[0])
    c = (y.shape[1] + nu) / (zz + nu)
    return sv - c[:, None, None] * quad


def d2lra_v(y, mu, diag, v, nu=None):
    r, t, zz, omega = lowrank_core(y, mu, diag, v)
    sigma, _ = _batch_inverse_pd(omega)
    sv = np.einsum("nij,njc->nic", sigma, v)
    sigma_diag = np.diagonal(sigma, axis1=1, axis2=2)
    vsv = np.einsum("ndc,ndc->nc", v, sv)  # v_c' Sigma v_c
    det_term = (
        sigma_diag[:, :, None]
        - sigma_diag[:, :, None] * vsv[:, None, :]
        - np.square(sv)
    )
    quad = np.einsum("ni,nc->nic", r, t)
    if nu is None:
        return det_term - np.square(r)[:, :, None]
    nu = _nu_array(nu, y.shape[0])
    denom = zz + nu
    d = y.shape[1]
    tail = (
        (d + nu)[:, None, None]
        * (np.square(r)[:, :, None] * denom[:, None, None] - 2.0 * quad**2)
        / denom[:, None, None] ** 2
    )
    return det_term - tail


# ---------------------------------------------------------------------------
# Degrees of freedom (shared by both parameterizations through z'z)


def dnu(zz, nu, d):
    """d loglik / d nu given the quadratic form z'z and dimension d."""
    zz = np.asarray(zz, dtype=float)
    nu = _nu_array(nu, zz.shape[0] if zz.ndim else 1)
    return (
        0.5 * digamma((nu + d) / 2.0)
        - 0.5 * digamma(nu / 2.0)
        - 0.5 * d / nu
        + 0.5 * (zz * (d + nu) / (nu * (nu + zz)) - np.log((nu + zz) / nu))
    )


def d2nu(zz, nu, d):
    zz = np.asarray(zz, dtype=float)
    nu = _nu_array(nu, zz.shape[0] if zz.ndim else 1)
    return (
        0.25 * trigamma((nu + d) / 2.0)
        - 0.25 * trigamma(nu / 2.0)
        + 0.5 * d / nu**2
        + zz * (nu * zz - d * (2.0 * nu + zz)) / (2.0 * nu**2 * (nu + zz) ** 2)
    )


def dnu_chol(y, mu, factor, nu):
    _, _, zz = chol_core(y, mu, factor)
    return dnu(zz, nu, y.shape[1])


def d2nu_chol(y, mu, factor, nu):
    _, _, zz = chol_core(y, mu, factor)
    return d2nu(zz, nu, y.shape[1])


def dnu_lowrank(y, mu, diag, v, nu):
    _, _, zz, _ = lowrank_core(y, mu, diag, v)
    return dnu(zz, nu, y.shape[1])


def d2nu_lowrank(y, mu, diag, v, nu):
    _, _, zz, _ = lowrank_core(y, mu, diag, v)
    return d2nu(zz, nu, y.shape[1])


# ---------------------------------------------------------------------------
# Sampling


def _rng(seed):
    """Counter-based generator so streams reproduce across platforms."""
    return np.random.Generator(np.random.Philox(seed))


def _student_scale(rng, nu, m):
    chi2 = rng.gamma(shape=nu / 2.0, scale=2.0, size=m)
    return np.sqrt(nu / chi2)


def sample_chol(mu, factor, nu, m, seed):
    """Draw m samples; A solves B A = I so that Sigma = A A'."""
    mu = np.asarray(mu, dtype=float)
    factor = np.asarray(factor, dtype=float)
    if np.any(np.diag(factor) <= 0.0):
        raise SingularMatrixError("Cholesky factor diagonal must be positive")
    a = scipy.linalg.solve_triangular(
        factor, np.eye(factor.shape[0]), lower=True, check_finite=False
    )
    rng = _rng(seed)
    z = rng.standard_normal((m, mu.shape[0]))
    x = z @ a.T
    if nu is not None:
        x *= _student_scale(rng, float(nu), m)[:, None]
    return mu + x


def sample_lowrank(mu, diag, v, nu, m, seed):
    mu = np.asarray(mu, dtype=float)
    omega = np.diag(np.asarray(diag, dtype=float)) + v @ v.T
    try:
        chol_sigma = np.linalg.cholesky(np.linalg.inv(omega))
    except np.linalg.LinAlgError as err:
        raise SingularMatrixError("low-rank precision is not positive definite") from err
    rng = _rng(seed)
    z = rng.standard_normal((m, mu.shape[0]))
    x = z @ chol_sigma.T
    if nu is not None:
        x *= _student_scale(rng, float(nu), m)[:, None]
    return mu + x


# ---------------------------------------------------------------------------
# Single-observation convenience wrappers


def loglik_params(params: MvParams, y) -> float:
    y = np.asarray(y, dtype=float)[None, :]
    mu = params.mu[None, :]
    if isinstance(params.scale, CholeskyPrecision):
        return float(loglik_chol(y, mu, params.scale.factor[None], params.nu)[0])
    return float(
        loglik_lowrank(
            y, mu, params.scale.diag[None], params.scale.v[None], params.nu
        )[0]
    )


def sample_params(params: MvParams, m: int, seed) -> np.ndarray:
    if isinstance(params.scale, CholeskyPrecision):
        return sample_chol(params.mu, params.scale.factor, params.nu, m, seed)
    return sample_lowrank(
        params.mu, params.scale.diag, params.scale.v, params.nu, m, seed
    )
