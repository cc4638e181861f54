"""Proper scoring rules over forecast ensembles and the Diebold-Mariano test.

Ensembles are T x D x M cubes (days x dimensions x samples). Point scores
(RMSE, MAE) summarize the ensemble by its mean respectively coordinate-wise
median; the CRPS is evaluated per coordinate with the probability-weighted
moment estimator; the energy, Dawid-Sebastiani and variogram scores judge
the joint distribution per day. Lower is better everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.spatial.distance
import scipy.special

__all__ = [
    "ForecastEnsemble",
    "ScoreSeries",
    "DmResult",
    "UnsupportedRuleError",
    "rmse",
    "mae",
    "crps_pwm",
    "crps_ensemble",
    "energy_score",
    "dss",
    "variogram_score",
    "log_score",
    "dm_test",
    "RULES",
]


class UnsupportedRuleError(TypeError):
    """Raised when a rule needs a capability the model does not expose."""


@dataclass
class ForecastEnsemble:
    """Sample cube of shape (T, D, M) plus free-form model metadata."""

    samples: np.ndarray
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 3:
            raise ValueError("ensemble must have shape (T, D, M)")
        if not np.all(np.isfinite(samples)):
            raise ValueError("ensemble contains non-finite values")
        self.samples = samples


@dataclass
class ScoreSeries:
    """Per-day score values and the rule's aggregate."""

    rule: str
    values: np.ndarray
    aggregate: float


def _check_shapes(y, f):
    y = np.asarray(y, dtype=float)
    f = np.asarray(f, dtype=float)
    if y.ndim != 2 or f.ndim != 3 or f.shape[:2] != y.shape:
        raise ValueError("expected y of shape (T, D) and ensemble (T, D, M)")
    return y, f


def rmse(y, f) -> float:
    """Root mean squared error of the ensemble-mean forecast."""
    y, f = _check_shapes(y, f)
    return float(np.sqrt(np.mean((y - f.mean(axis=2)) ** 2)))


def mae(y, f) -> float:
    """Mean absolute error of the coordinate-wise ensemble median."""
    y, f = _check_shapes(y, f)
    return float(np.mean(np.abs(y - np.median(f, axis=2))))


def crps_pwm(y: float, x) -> float:
    """CRPS probability-weighted moment estimator, O(M log M) via sorting.

    mean |X - y| minus half the unbiased mean absolute pairwise difference;
    the pairwise sum over sorted values x_(k) is sum_k (2k - M + 1) x_(k).
    """
    x = np.sort(np.asarray(x, dtype=float))
    m = x.shape[0]
    if m < 2:
        raise ValueError("CRPS needs an ensemble of at least 2 members")
    term_abs = np.mean(np.abs(x - y))
    weights = 2.0 * np.arange(m) - m + 1.0
    pairwise = np.dot(weights, x)  # sum_{i<j} (x_(j) - x_(i))
    return float(term_abs - pairwise / (m * (m - 1)))


def crps_ensemble(y, f):
    """Per-day CRPS averaged over coordinates; returns a (T,) series."""
    y, f = _check_shapes(y, f)
    t_len, d, m = f.shape
    if m < 2:
        raise ValueError("CRPS needs an ensemble of at least 2 members")
    xs = np.sort(f, axis=2)
    term_abs = np.mean(np.abs(xs - y[:, :, None]), axis=2)
    weights = 2.0 * np.arange(m) - m + 1.0
    pairwise = xs @ weights / (m * (m - 1))
    return (term_abs - pairwise).mean(axis=1)


def energy_score(y, x) -> float:
    """Energy score with unsquared Euclidean norms.

    mean_m ||y - x_m|| - (1/(2 M^2)) sum_i sum_j ||x_i - x_j||.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or y.shape[0] != x.shape[1]:
        raise ValueError("expected y of shape (D,) and samples (M, D)")
    m = x.shape[0]
    term_y = np.mean(np.linalg.norm(x - y[None, :], axis=1))
    if m == 1:
        return float(term_y)
    pairwise = scipy.spatial.distance.pdist(x)  # i < j once each
    return float(term_y - pairwise.sum() / m**2)


def dss(y, x, load: float = 1e-8) -> float:
    """Dawid-Sebastiani score log det(S) + (y - m)' S^{-1} (y - m)."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    mean = x.mean(axis=0)
    cov = np.cov(x.T, ddof=1)
    cov = np.atleast_2d(cov)
    if x.shape[0] <= x.shape[1]:
        cov = cov + load * max(np.trace(cov), 1.0) * np.eye(cov.shape[0])
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        cov = cov + load * max(np.trace(cov), 1.0) * np.eye(cov.shape[0])
        chol = np.linalg.cholesky(cov)  # still singular -> propagate
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    w = scipy.linalg.solve_triangular(chol, y - mean, lower=True, check_finite=False)
    return float(logdet + w @ w)


def variogram_score(y, x, p: float = 0.5) -> float:
    """Variogram score of order p, reported as sqrt(raw / D^2).

    raw = sum_ij (mean_m |x_mi - x_mj|^p - |y_i - y_j|^p)^2.
    """
    if p <= 0.0:
        raise ValueError("variogram order p must be positive")
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    d = y.shape[0]
    ens = np.mean(np.abs(x[:, :, None] - x[:, None, :]) ** p, axis=0)
    obs = np.abs(y[:, None] - y[None, :]) ** p
    raw = float(np.sum((ens - obs) ** 2))
    return float(np.sqrt(raw / d**2))


def log_score(model, y) -> float:
    """Negative log joint density of y under the model's forecast."""
    logpdf = getattr(model, "log_density", None)
    if logpdf is None:
        raise UnsupportedRuleError(
            f"{type(model).__name__} exposes no joint density; log score undefined"
        )
    return -float(logpdf(np.asarray(y, dtype=float)))


@dataclass
class DmResult:
    """One-sided Diebold-Mariano p-values in both directions."""

    statistic: float
    p_a_better: float
    p_b_better: float
    degenerate: bool = False


def dm_test(score_a, score_b, newey_west: bool = False) -> DmResult:
    """Test the mean of the score differential s_A - s_B against zero.

    Small ``p_a_better`` means model A's scores are significantly lower
    (better). The default variance estimate is the lag-0 sample variance;
    ``newey_west=True`` uses a Newey-West long-run variance with bandwidth
    floor(T^(1/3)) as a robustness check.
    """
    a = np.asarray(score_a, dtype=float)
    b = np.asarray(score_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("score series must be equal-length vectors")
    t_len = a.shape[0]
    if t_len < 30:
        raise ValueError("Diebold-Mariano test needs at least 30 observations")
    delta = a - b
    mean = delta.mean()
    if newey_west:
        bandwidth = int(np.floor(t_len ** (1.0 / 3.0)))
        centered = delta - mean
        variance = np.mean(centered**2)
        for lag in range(1, bandwidth + 1):
            weight = 1.0 - lag / (bandwidth + 1.0)
            variance += 2.0 * weight * np.mean(centered[lag:] * centered[:-lag])
    else:
        variance = delta.var(ddof=1)
    if variance <= 0.0:
        return DmResult(statistic=0.0, p_a_better=0.5, p_b_better=0.5, degenerate=True)
    stat = mean / np.sqrt(variance / t_len)
    p_a = float(scipy.special.ndtr(stat))
    return DmResult(statistic=float(stat), p_a_better=p_a, p_b_better=1.0 - p_a)


#: rules evaluated per day in the study harness (ensemble-based ones)
RULES = ("rmse", "mae", "crps", "vs05", "vs1", "es", "dss", "ls")
