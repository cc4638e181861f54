"""Twice-differentiable link functions for distributional regression.

A link maps a constrained distribution-parameter coordinate onto the real
line so that it can be modeled by an unconstrained linear predictor. Every
link exposes the forward map, its inverse and analytic first and second
derivatives, which Newton-Raphson scoring needs to chain distribution
derivatives through to the predictor scale.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "LinkError",
    "Link",
    "IdentityLink",
    "LogLink",
    "SqrtLink",
    "LogIdentLink",
    "DifferentiableLogIdentLink",
    "InverseSoftPlusLink",
    "LogShiftTwoLink",
    "link_from_name",
    "LINK_NAMES",
]

# Inverse links clamp into this interval (shifted for shifted links) so a
# wildly overshooting Newton step cannot produce singular scale matrices.
INVERSE_FLOOR = 1e-10
INVERSE_CEIL = 1e10

# exp() overflows around 709; stay comfortably inside.
_EXP_BOUND = 690.0


class LinkError(ValueError):
    """Raised when a link is evaluated outside its domain."""


def _clip_positive(theta, shift=0.0):
    return shift + np.clip(theta - shift, INVERSE_FLOOR, INVERSE_CEIL)


def _safe_exp(eta):
    return np.exp(np.clip(eta, -_EXP_BOUND, _EXP_BOUND))


class Link:
    """Base class; subclasses define the maps on their admissible domain."""

    #: open lower bound of the admissible domain
    domain_low: float = -np.inf

    def _check_domain(self, theta) -> None:
        if self.domain_low > -np.inf and np.any(np.asarray(theta) <= self.domain_low):
            raise LinkError(
                f"{type(self).__name__} requires values > {self.domain_low}"
            )

    def link(self, theta):
        raise NotImplementedError

    def inverse(self, eta):
        raise NotImplementedError

    def derivative(self, theta):
        raise NotImplementedError

    def second_derivative(self, theta):
        raise NotImplementedError


class IdentityLink(Link):
    """g(x) = x on the whole real line."""

    def link(self, theta):
        return np.asarray(theta, dtype=float)

    def inverse(self, eta):
        return np.asarray(eta, dtype=float)

    def derivative(self, theta):
        return np.ones_like(np.asarray(theta, dtype=float))

    def second_derivative(self, theta):
        return np.zeros_like(np.asarray(theta, dtype=float))


class LogLink(Link):
    """g(x) = log(x) for x > 0."""

    domain_low = 0.0

    def link(self, theta):
        self._check_domain(theta)
        return np.log(theta)

    def inverse(self, eta):
        return _clip_positive(_safe_exp(eta))

    def derivative(self, theta):
        self._check_domain(theta)
        return 1.0 / np.asarray(theta, dtype=float)

    def second_derivative(self, theta):
        self._check_domain(theta)
        return -1.0 / np.square(theta)


class SqrtLink(Link):
    """g(x) = sqrt(x) for x > 0; the inverse squares a floored predictor.

    Negative predictors are floored before squaring: the square root link
    is only used for parameters where near-zero values are legal but zero
    is not, so the inverse must stay strictly positive.
    """

    domain_low = 0.0

    def link(self, theta):
        self._check_domain(theta)
        return np.sqrt(theta)

    def inverse(self, eta):
        return _clip_positive(np.square(np.maximum(eta, INVERSE_FLOOR)))

    def derivative(self, theta):
        self._check_domain(theta)
        return 0.5 / np.sqrt(theta)

    def second_derivative(self, theta):
        self._check_domain(theta)
        return -0.25 * np.asarray(theta, dtype=float) ** -1.5


class LogIdentLink(Link):
    """Piecewise log/identity link: log(x) below 1, x - 1 above.

    Continuous with continuous first derivative, but the second derivative
    jumps at x = 1 (-1 vs 0). Exposed for experimentation; never a default.
    """

    domain_low = 0.0

    def link(self, theta):
        self._check_domain(theta)
        theta = np.asarray(theta, dtype=float)
        return np.where(theta < 1.0, np.log(np.minimum(theta, 1.0)), theta - 1.0)

    def inverse(self, eta):
        eta = np.asarray(eta, dtype=float)
        return _clip_positive(
            np.where(eta < 0.0, _safe_exp(np.minimum(eta, 0.0)), eta + 1.0)
        )

    def derivative(self, theta):
        self._check_domain(theta)
        theta = np.asarray(theta, dtype=float)
        return np.where(theta < 1.0, 1.0 / theta, 1.0)

    def second_derivative(self, theta):
        self._check_domain(theta)
        theta = np.asarray(theta, dtype=float)
        return np.where(theta < 1.0, -1.0 / np.square(theta), 0.0)


class DifferentiableLogIdentLink(Link):
    """Smooth log/identity blend g(x) = (1 - f(x)) log(x) + f(x) (x - 1).

    f is the logistic sigmoid f(x) = 1 / (1 + exp(-k(x - 1))), so the link
    transitions smoothly from log behavior below 1 to identity behavior
    above. Since x - 1 - log(x) >= 0, g'(x) = f'(x)(x - 1 - log x)
    + (1 - f)/x + f > 0 for every k > 0, hence g is strictly increasing.
    The inverse has no closed form and is computed by safeguarded Newton
    iteration.
    """

    domain_low = 0.0

    def __init__(self, k: float = 10.0):
        if k <= 0:
            raise ValueError("sigmoid steepness k must be positive")
        self.k = float(k)

    def _sigmoid(self, theta):
        return 1.0 / (1.0 + _safe_exp(-self.k * (np.asarray(theta, dtype=float) - 1.0)))

    def link(self, theta):
        self._check_domain(theta)
        theta = np.asarray(theta, dtype=float)
        f = self._sigmoid(theta)
        return (1.0 - f) * np.log(theta) + f * (theta - 1.0)

    def derivative(self, theta):
        self._check_domain(theta)
        theta = np.asarray(theta, dtype=float)
        f = self._sigmoid(theta)
        df = self.k * f * (1.0 - f)
        return df * (theta - 1.0 - np.log(theta)) + (1.0 - f) / theta + f

    def second_derivative(self, theta):
        self._check_domain(theta)
        theta = np.asarray(theta, dtype=float)
        f = self._sigmoid(theta)
        df = self.k * f * (1.0 - f)
        d2f = self.k**2 * f * (1.0 - f) * (1.0 - 2.0 * f)
        return (
            d2f * (theta - 1.0 - np.log(theta))
            + 2.0 * df * (1.0 - 1.0 / theta)
            - (1.0 - f) / np.square(theta)
        )

    def inverse(self, eta):
        eta = np.asarray(eta, dtype=float)
        scalar = eta.ndim == 0
        eta = np.atleast_1d(eta).astype(float)
        # log branch below 1, identity branch above: both give good starts.
        theta = np.where(eta < 0.0, _safe_exp(eta), eta + 1.0)
        theta = np.clip(theta, INVERSE_FLOOR, INVERSE_CEIL)
        for _ in range(60):
            g = self.link(theta) - eta
            step = g / self.derivative(theta)
            # keep iterates strictly positive
            theta_new = np.maximum(theta - step, 0.5 * theta)
            if np.max(np.abs(theta_new - theta) / (1.0 + np.abs(theta_new))) < 1e-14:
                theta = theta_new
                break
            theta = theta_new
        theta = _clip_positive(theta)
        return float(theta[0]) if scalar else theta


class InverseSoftPlusLink(Link):
    """g(x) = log(exp(x) - 1) for x > 0; inverse is the softplus.

    Nearly linear for large x and log-like for small x, which avoids the
    explosive inverse of the plain log link. Both directions are evaluated
    in overflow-safe form.
    """

    domain_low = 0.0

    def link(self, theta):
        self._check_domain(theta)
        theta = np.asarray(theta, dtype=float)
        # log(exp(x) - 1) = x + log(1 - exp(-x))
        return theta + np.log(-np.expm1(-theta))

    def inverse(self, eta):
        eta = np.asarray(eta, dtype=float)
        # softplus(x) = max(x, 0) + log1p(exp(-|x|))
        return _clip_positive(np.maximum(eta, 0.0) + np.log1p(_safe_exp(-np.abs(eta))))

    def derivative(self, theta):
        self._check_domain(theta)
        theta = np.asarray(theta, dtype=float)
        return 1.0 / (-np.expm1(-theta))

    def second_derivative(self, theta):
        self._check_domain(theta)
        theta = np.asarray(theta, dtype=float)
        return -np.exp(-theta) / np.square(np.expm1(-theta))


class LogShiftTwoLink(Link):
    """g(x) = log(x - 2) for x > 2; keeps degrees of freedom above 2."""

    domain_low = 2.0

    def link(self, theta):
        self._check_domain(theta)
        return np.log(np.asarray(theta, dtype=float) - 2.0)

    def inverse(self, eta):
        return _clip_positive(2.0 + _safe_exp(eta), shift=2.0)

    def derivative(self, theta):
        self._check_domain(theta)
        return 1.0 / (np.asarray(theta, dtype=float) - 2.0)

    def second_derivative(self, theta):
        self._check_domain(theta)
        return -1.0 / np.square(np.asarray(theta, dtype=float) - 2.0)


LINK_NAMES = {
    "identity": IdentityLink,
    "log": LogLink,
    "sqrt": SqrtLink,
    "logident": LogIdentLink,
    "differentiablelogident": DifferentiableLogIdentLink,
    "inversesoftplus": InverseSoftPlusLink,
    "logshifttwo": LogShiftTwoLink,
}


def link_from_name(name: str, **kwargs) -> Link:
    """Instantiate a link from its configuration tag (case-insensitive)."""
    key = name.strip().lower()
    if key not in LINK_NAMES:
        raise ValueError(f"unknown link {name!r}; known: {sorted(LINK_NAMES)}")
    return LINK_NAMES[key](**kwargs)
