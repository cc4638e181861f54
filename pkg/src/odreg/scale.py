"""Precision-matrix parameterizations and regularization masks.

Two unconstrained parameterizations of the precision matrix are supported:

* Cholesky (CD): Omega = B' B with a lower-triangular factor B whose
  diagonal is strictly positive.
* diagonal plus low rank (LRA): Omega = diag(a) + V V' with a > 0.

Both are positive definite by construction. Path-based estimation switches
coordinates on band by band (CD) or column by column (LRA) through
``RegularizationMask``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

__all__ = [
    "SingularMatrixError",
    "CholeskyPrecision",
    "LowRankPrecision",
    "RegularizationMask",
    "precision_from_cd",
    "precision_from_lra",
    "covariance_from_precision",
    "mask_for",
    "is_positive_definite",
    "tril_coords",
]


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a matrix that must be positive definite is not."""


def tril_coords(dim: int) -> list[tuple[int, int]]:
    """Row-major coordinates of the lower triangle, diagonal first per row."""
    return [(i, j) for i in range(dim) for j in range(i + 1)]


@dataclass(frozen=True)
class CholeskyPrecision:
    """Lower-triangular factor B with Omega = B' B."""

    factor: np.ndarray

    def __post_init__(self):
        factor = np.asarray(self.factor, dtype=float)
        if factor.ndim != 2 or factor.shape[0] != factor.shape[1]:
            raise ValueError("factor must be a square matrix")
        if np.any(np.triu(factor, k=1) != 0.0):
            raise ValueError("factor must be lower triangular")
        if np.any(np.diag(factor) <= 0.0):
            raise ValueError("factor diagonal must be strictly positive")
        object.__setattr__(self, "factor", factor)

    @property
    def dim(self) -> int:
        return self.factor.shape[0]


@dataclass(frozen=True)
class LowRankPrecision:
    """Diagonal a plus low-rank V V' with V of shape (dim, rank)."""

    diag: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        diag = np.asarray(self.diag, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if diag.ndim != 1:
            raise ValueError("diag must be a vector")
        if v.ndim != 2 or v.shape[0] != diag.shape[0]:
            raise ValueError("v must have shape (dim, rank)")
        if np.any(diag <= 0.0):
            raise ValueError("diagonal entries must be strictly positive")
        object.__setattr__(self, "diag", diag)
        object.__setattr__(self, "v", v)

    @property
    def dim(self) -> int:
        return self.diag.shape[0]

    @property
    def rank(self) -> int:
        return self.v.shape[1]


@dataclass(frozen=True)
class RegularizationMask:
    """Active coordinate set of the scale parameterization at level alpha.

    CD: coordinate (i, j) of the lower triangle is active iff |i - j| <= alpha.
    LRA: V entry (d, r) is active iff r < alpha; the diagonal is always active.
    """

    kind: str
    dim: int
    alpha: int
    rank: int = 0
    active: tuple = field(default=(), compare=False)

    def is_active(self, i: int, j: int) -> bool:
        if self.kind == "cd":
            return abs(i - j) <= self.alpha
        return j < self.alpha


def mask_for(kind: str, dim: int, alpha: int, rank: int = 0) -> RegularizationMask:
    """Build the active set for regularization level alpha (saturating)."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    kind = kind.lower()
    if kind == "cd":
        active = tuple((i, j) for i, j in tril_coords(dim) if i - j <= alpha)
    elif kind == "lra":
        active = tuple(
            (d, r) for d in range(dim) for r in range(rank) if r < alpha
        )
    else:
        raise ValueError("kind must be 'cd' or 'lra'")
    return RegularizationMask(kind=kind, dim=dim, alpha=alpha, rank=rank, active=active)


def precision_from_cd(p: CholeskyPrecision) -> np.ndarray:
    """Assemble Omega = B' B; symmetric positive definite by construction."""
    omega = p.factor.T @ p.factor
    return 0.5 * (omega + omega.T)


def precision_from_lra(p: LowRankPrecision) -> np.ndarray:
    """Assemble Omega = diag(a) + V V'."""
    omega = np.diag(p.diag) + p.v @ p.v.T
    return 0.5 * (omega + omega.T)


def is_positive_definite(omega: np.ndarray) -> bool:
    """Attempted Cholesky factorization, the canonical testable PD check."""
    omega = np.asarray(omega, dtype=float)
    if not np.all(np.isfinite(omega)):
        return False
    try:
        chol = np.linalg.cholesky(omega)
    except np.linalg.LinAlgError:
        return False
    return bool(np.all(np.diag(chol) > 1e-12))


def covariance_from_precision(omega: np.ndarray) -> np.ndarray:
    """Invert a symmetric PD precision matrix via Cholesky-based solve."""
    omega = np.asarray(omega, dtype=float)
    try:
        chol = np.linalg.cholesky(omega)
    except np.linalg.LinAlgError as err:
        raise SingularMatrixError("precision matrix is not positive definite") from err
    inv_chol = scipy.linalg.solve_triangular(
        chol, np.eye(omega.shape[0]), lower=True, check_finite=False
    )
    sigma = inv_chol.T @ inv_chol
    return 0.5 * (sigma + sigma.T)
