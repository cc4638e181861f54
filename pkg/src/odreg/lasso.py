"""Gramian-based online coordinate descent for weighted, discounted LASSO.

The regression state is held as the Gramian pair G = X'W(Gamma)X and
H = X'W(Gamma)z, where Gamma applies exponential forgetting with factor
(1 - gamma) per step. A new row updates the pair in O(J^2) regardless of
how many rows have been seen, and solutions (single lambda, a full
regularization path, or unregularized recursive least squares) are
computed from the pair alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from numba import njit

from .scale import SingularMatrixError

__all__ = [
    "GramianState",
    "LassoPath",
    "gram_update",
    "batch_gram",
    "soft_threshold",
    "lambda_grid",
    "cd_solve",
    "path_solve",
    "rls_solve",
    "effective_sample_size",
]

_SCALE_FLOOR = 1e-12


@dataclass
class GramianState:
    """Accumulated cross products for one regression coordinate."""

    g: np.ndarray
    h: np.ndarray
    gamma: float = 0.0
    n_seen: int = 0

    @classmethod
    def zeros(cls, n_features: int, gamma: float = 0.0) -> "GramianState":
        if not 0.0 <= gamma < 1.0:
            raise ValueError("forget factor gamma must lie in [0, 1)")
        return cls(
            g=np.zeros((n_features, n_features)),
            h=np.zeros(n_features),
            gamma=gamma,
        )

    @property
    def n_features(self) -> int:
        return self.h.shape[0]

    def copy(self) -> "GramianState":
        return GramianState(self.g.copy(), self.h.copy(), self.gamma, self.n_seen)


def effective_sample_size(gamma: float, n: int) -> float:
    """sum_{i<n} (1-gamma)^i, the discounted number of observations."""
    if gamma == 0.0:
        return float(n)
    return (1.0 - (1.0 - gamma) ** n) / gamma


def gram_update(state: GramianState, x, z, w=1.0) -> GramianState:
    """One-row update G <- (1-gamma) G + w x x', H <- (1-gamma) H + w x z."""
    x = np.asarray(x, dtype=float)
    if w < 0.0 or not np.isfinite(w) or not np.isfinite(z) or not np.all(np.isfinite(x)):
        raise ValueError("gram_update requires finite inputs and w >= 0")
    decay = 1.0 - state.gamma
    return GramianState(
        g=decay * state.g + w * np.outer(x, x),
        h=decay * state.h + w * (x * z),
        gamma=state.gamma,
        n_seen=state.n_seen + 1,
    )


def batch_gram(x, z, w=None, gamma: float = 0.0) -> GramianState:
    """Accumulate all rows at once with weights w and discounting gamma.

    Equivalent to folding ``gram_update`` over the rows, with the most
    recent row carrying weight (1-gamma)^0.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    n = x.shape[0]
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z)) and np.all(np.isfinite(w))):
        raise ValueError("batch_gram requires finite inputs")
    decay = (1.0 - gamma) ** np.arange(n - 1, -1, -1)
    xw = x * (w * decay)[:, None]
    state = GramianState(g=xw.T @ x, h=xw.T @ z, gamma=gamma, n_seen=n)
    return state


def soft_threshold(x, lam):
    """S(x, lam) = sign(x) max(|x| - lam, 0)."""
    return np.sign(x) * np.maximum(np.abs(x) - lam, 0.0)


def lambda_grid(h, penalized, length: int = 50, eps: float = 1e-4):
    """Log-equispaced grid from lambda_max = max |H_j| over penalized j.

    Returns ``(grid, degenerate)``; a degenerate grid (all penalized H
    zero) is all zeros and the caller should skip the descent.
    """
    if length < 2:
        raise ValueError("grid length must be at least 2")
    h = np.asarray(h, dtype=float)
    penalized = np.asarray(penalized, dtype=bool)
    if penalized.any():
        lam_max = float(np.max(np.abs(h[penalized])))
    else:
        lam_max = 0.0
    if lam_max <= 0.0:
        return np.zeros(length), True
    return np.geomspace(lam_max, lam_max * eps, length), False


@njit(cache=True)
def _cd_sweep(g, h, beta, lam, active):  # pragma: no cover - jitted
    max_delta = 0.0
    for j in range(beta.shape[0]):
        if not active[j]:
            continue
        gjj = g[j, j]
        if gjj <= 0.0:
            continue
        rho = h[j] - np.dot(g[j], beta) + gjj * beta[j]
        if lam[j] > 0.0:
            if rho > lam[j]:
                bj = (rho - lam[j]) / gjj
            elif rho < -lam[j]:
                bj = (rho + lam[j]) / gjj
            else:
                bj = 0.0
        else:
            bj = rho / gjj
        delta = abs(bj - beta[j])
        if delta > max_delta:
            max_delta = delta
        beta[j] = bj
    return max_delta


@njit(cache=True)
def _cd_solve(g, h, beta, lam, max_iter, tol):  # pragma: no cover - jitted
    full = np.ones(beta.shape[0], dtype=np.bool_)
    it = 0
    while it < max_iter:
        delta = _cd_sweep(g, h, beta, lam, full)
        it += 1
        if delta < tol:
            return it, True
        # cycle the active set until stable, then re-check all coordinates
        active = (beta != 0.0) | (lam == 0.0)
        while it < max_iter:
            delta = _cd_sweep(g, h, beta, lam, active)
            it += 1
            if delta < tol:
                break
    return it, False


@njit(cache=True)
def _cd_path(g, h, grid, beta_path, lam_scale, max_iter, tol):  # pragma: no cover
    n_lam = grid.shape[0]
    iters = np.zeros(n_lam, dtype=np.int64)
    conv = np.zeros(n_lam, dtype=np.bool_)
    beta = beta_path[0].copy()
    for l in range(n_lam):
        lam = grid[l] * lam_scale
        iters[l], conv[l] = _cd_solve(g, h, beta, lam, max_iter, tol)
        beta_path[l] = beta
    return iters, conv


@dataclass
class LassoPath:
    """Coefficients along a decreasing lambda grid (original feature scale)."""

    lambdas: np.ndarray
    coef: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    degenerate: bool = False
    scales: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_lambdas(self) -> int:
        return self.lambdas.shape[0]


def _feature_scales(g):
    return np.sqrt(np.maximum(np.diag(g), _SCALE_FLOOR))


def cd_solve(
    state: GramianState,
    start,
    lam: float,
    penalized,
    max_iter: int = 1000,
    tol: float = 1e-6,
):
    """Coordinate-wise fixed point at a single lambda.

    Unpenalized coordinates are updated with lambda = 0. Returns
    ``(beta, converged)``; on hitting ``max_iter`` the best iterate is
    returned with ``converged=False``.
    """
    if lam < 0.0 or tol <= 0.0:
        raise ValueError("lam must be >= 0 and tol > 0")
    beta = np.asarray(start, dtype=float).copy()
    lam_vec = np.where(np.asarray(penalized, dtype=bool), lam, 0.0)
    _, converged = _cd_solve(state.g, state.h, beta, lam_vec, max_iter, tol)
    return beta, bool(converged)


def path_solve(
    state: GramianState,
    penalized,
    grid=None,
    length: int = 50,
    eps: float = 1e-4,
    start_path=None,
    standardize: bool = True,
    max_iter: int = 1000,
    tol: float = 1e-6,
) -> LassoPath:
    """Warm-started coordinate descent along a decreasing lambda grid.

    With ``standardize=True`` the problem is solved on coordinates scaled
    by the running root-mean-squares sqrt(G_jj) (so the penalty acts on
    comparable scales) and coefficients are mapped back to the original
    scale; the grid is then interpreted on the standardized scale and
    computed from it when not supplied.
    """
    penalized = np.asarray(penalized, dtype=bool)
    if standardize:
        scales = _feature_scales(state.g)
        g = state.g / np.outer(scales, scales)
        h = state.h / scales
    else:
        scales = np.ones(state.n_features)
        g, h = state.g, state.h
    degenerate = False
    if grid is None:
        grid, degenerate = lambda_grid(h, penalized, length=length, eps=eps)
    grid = np.asarray(grid, dtype=float)
    n_lam = grid.shape[0]
    beta_path = np.zeros((n_lam, state.n_features))
    if start_path is not None:
        beta_path[:] = np.asarray(start_path, dtype=float) * scales[None, :]
    lam_scale = penalized.astype(float)
    iters, conv = _cd_path(g, h, grid, beta_path, lam_scale, max_iter, tol)
    coef = beta_path / scales[None, :]
    return LassoPath(
        lambdas=grid,
        coef=coef,
        converged=conv,
        iterations=iters,
        degenerate=degenerate,
        scales=scales,
    )


def rls_solve(state: GramianState):
    """Unregularized solve of G beta = H by Cholesky factorization."""
    try:
        chol = scipy.linalg.cho_factor(state.g, check_finite=False)
        return scipy.linalg.cho_solve(chol, state.h, check_finite=False)
    except (scipy.linalg.LinAlgError, ValueError) as err:
        cond = np.linalg.cond(state.g) if np.all(np.isfinite(state.g)) else np.inf
        raise SingularMatrixError(
            f"Gramian is singular or indefinite (cond ~ {cond:.3e})"
        ) from err
