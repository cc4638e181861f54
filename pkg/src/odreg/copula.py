"""Adaptive Gaussian copula over Student-t marginals, and the recursive
residual-covariance tracker shared by the simpler covariance baselines.

The copula couples arbitrary continuous marginals through a correlation
matrix on normal scores: observations are mapped to (0, 1) by the
probability integral transform of their marginal, to normal scores by the
standard normal quantile, and the score second-moment matrix is tracked
with the recursion S <- ((t-1)/t) S + (1/t) n n'.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.special

from .scale import SingularMatrixError

__all__ = [
    "TMarginal",
    "CopulaState",
    "CovarianceTracker",
    "pit",
    "t_quantile",
    "t_logpdf",
    "copula_update",
    "copula_init",
    "copula_sample",
    "copula_loglik",
]

_PIT_EPS = 1e-12
_DIAG_FLOOR = 1e-6


@dataclass(frozen=True)
class TMarginal:
    """Location-scale Student-t marginal; df > 2 so the variance exists."""

    loc: float
    scale: float
    df: float

    def __post_init__(self):
        if self.scale <= 0.0 or self.df <= 2.0:
            raise ValueError("marginal requires scale > 0 and df > 2")


def pit(marginal: TMarginal, y):
    """u = F((y - loc)/scale; df), clamped away from 0 and 1."""
    u = scipy.special.stdtr(marginal.df, (np.asarray(y, float) - marginal.loc) / marginal.scale)
    return np.clip(u, _PIT_EPS, 1.0 - _PIT_EPS)


def t_quantile(marginal: TMarginal, u):
    return marginal.loc + marginal.scale * scipy.special.stdtrit(marginal.df, u)


def t_logpdf(marginal: TMarginal, y):
    std = (np.asarray(y, float) - marginal.loc) / marginal.scale
    df = marginal.df
    return (
        scipy.special.gammaln((df + 1.0) / 2.0)
        - scipy.special.gammaln(df / 2.0)
        - 0.5 * np.log(df * np.pi)
        - np.log(marginal.scale)
        - 0.5 * (df + 1.0) * np.log1p(std**2 / df)
    )


@dataclass
class CopulaState:
    """Normal-score second moment S and the derived correlation matrix."""

    s: np.ndarray
    t: int

    @classmethod
    def empty(cls, dim: int) -> "CopulaState":
        return cls(s=np.zeros((dim, dim)), t=0)

    @property
    def dim(self) -> int:
        return self.s.shape[0]

    @property
    def correlation(self) -> np.ndarray:
        """S floored on the diagonal and rescaled to unit diagonal."""
        s = self.s + _DIAG_FLOOR * np.eye(self.dim)
        d = 1.0 / np.sqrt(np.diag(s))
        corr = s * np.outer(d, d)
        np.fill_diagonal(corr, 1.0)
        return corr


def copula_update(state: CopulaState, u) -> CopulaState:
    """Fold one pseudo-observation u in (0,1)^D into the score moment."""
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise ValueError("pseudo-observations must lie strictly inside (0, 1)")
    n = scipy.special.ndtri(u)
    t = state.t + 1
    s = ((t - 1) / t) * state.s + (1.0 / t) * np.outer(n, n)
    return CopulaState(s=s, t=t)


def copula_init(u_matrix) -> CopulaState:
    """Batch second moment of training pseudo-observations."""
    u = np.asarray(u_matrix, dtype=float)
    n = scipy.special.ndtri(np.clip(u, _PIT_EPS, 1.0 - _PIT_EPS))
    return CopulaState(s=(n.T @ n) / u.shape[0], t=u.shape[0])


def _correlation_cholesky(corr):
    for shrink in (0.0, 0.1, 0.5, 1.0):
        candidate = (1.0 - shrink) * corr + shrink * np.eye(corr.shape[0])
        try:
            return np.linalg.cholesky(candidate)
        except np.linalg.LinAlgError:
            continue
    raise SingularMatrixError("copula correlation is not positive definite")


def copula_sample(state: CopulaState, marginals, m: int, seed) -> np.ndarray:
    """Draw m joint samples: z ~ N(0, corr), u = Phi(z), y_d = F_d^{-1}(u_d)."""
    chol = _correlation_cholesky(state.correlation)
    rng = np.random.Generator(np.random.Philox(seed))
    z = rng.standard_normal((m, state.dim)) @ chol.T
    u = np.clip(scipy.special.ndtr(z), _PIT_EPS, 1.0 - _PIT_EPS)
    out = np.empty((m, state.dim))
    for d, marginal in enumerate(marginals):
        out[:, d] = t_quantile(marginal, u[:, d])
    return out


def copula_loglik(state: CopulaState, marginals, y) -> float:
    """Joint log density: Gaussian copula term plus marginal log densities."""
    y = np.asarray(y, dtype=float)
    u = np.array([pit(marginal, y[d]) for d, marginal in enumerate(marginals)])
    n = scipy.special.ndtri(u)
    corr = state.correlation
    try:
        chol = np.linalg.cholesky(corr)
    except np.linalg.LinAlgError as err:
        raise SingularMatrixError("copula correlation is not positive definite") from err
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    w = scipy.linalg.solve_triangular(chol, n, lower=True, check_finite=False)
    quad = w @ w - n @ n
    marginal_ll = sum(float(t_logpdf(m, y[d])) for d, m in enumerate(marginals))
    return -0.5 * logdet - 0.5 * quad + marginal_ll


@dataclass
class CovarianceTracker:
    """(t-1)/t recursion on raw residual outer products.

    Used for the unconditional residual covariance of the mean-model
    baselines; the diagonal doubles as the per-coordinate variance
    recursion of the independence variant.
    """

    s: np.ndarray
    t: int

    @classmethod
    def from_residuals(cls, residuals) -> "CovarianceTracker":
        r = np.asarray(residuals, dtype=float)
        return cls(s=(r.T @ r) / r.shape[0], t=r.shape[0])

    @property
    def covariance(self) -> np.ndarray:
        return self.s + _DIAG_FLOOR * np.eye(self.s.shape[0])

    @property
    def variances(self) -> np.ndarray:
        return np.diag(self.s) + _DIAG_FLOOR

    def update(self, residual) -> "CovarianceTracker":
        r = np.asarray(residual, dtype=float)
        t = self.t + 1
        s = ((t - 1) / t) * self.s + (1.0 / t) * np.outer(r, r)
        return CovarianceTracker(s=s, t=t)
