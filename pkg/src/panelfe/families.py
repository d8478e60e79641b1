"""Single-index likelihood families.

Each family defines the conditional log density of the outcome through a
scalar index u (covariate index plus unit and period effects) and exposes
its derivatives up to third order together with the conditional moments the
bias machinery needs.  Derivative notation: g = log f(y, u), g1 = dg/du,
g2 = d2g/du2, g3 = d3g/du3; the expected information weight is
omega(u) = -E[g2 | u].

All methods are vectorized over numpy arrays and every family instance is
an immutable value object, safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Literal

import numpy as np
from scipy import special
from scipy.stats import norm

from .errors import InputError

# Probit weights vanish in the tails; anything below this is numerically of
# no statistical consequence but would blow up ratios.
WEIGHT_FLOOR = 1e-10

EffectMode = Literal["discrete", "marginal"]


@dataclass(frozen=True)
class EffectSpec:
    """A partial-effect request for one covariate.

    ``discrete`` compares the index at x_k = 1 versus x_k = 0 (binary
    covariates only); ``marginal`` is the derivative of the conditional
    mean with respect to x_k (continuous covariates only).
    """

    covariate: int
    mode: EffectMode = "marginal"


class Family:
    """Base class: subclasses fill in the scalar-index density and moments."""

    name: str = ""

    # -- log density and derivatives -------------------------------------
    def loglik(self, y, u):
        raise NotImplementedError

    def score(self, y, u):
        raise NotImplementedError

    def hess(self, y, u):
        raise NotImplementedError

    def third(self, y, u):
        raise NotImplementedError

    def score_and_hess(self, y, u):
        """(g1, g2) sharing intermediates where a subclass can."""
        return self.score(y, u), self.hess(y, u)

    # -- conditional moments given the index ------------------------------
    def weight(self, u):
        """Expected information omega(u) = -E[g2 | u], floored at WEIGHT_FLOOR."""
        raise NotImplementedError

    def weight_deriv(self, u):
        """d omega / du."""
        raise NotImplementedError

    def expected_g3(self, u):
        """E[g3 | u]."""
        raise NotImplementedError

    def cross_g1g2(self, u):
        """E[g1 g2 | u]; satisfies E[g1 g2] = -omega' - E[g3]."""
        return -self.weight_deriv(u) - self.expected_g3(u)

    # -- conditional mean (for partial effects) ---------------------------
    def mean(self, u):
        """E[y | u]."""
        raise NotImplementedError

    def mean_deriv(self, u):
        raise NotImplementedError

    def mean_deriv2(self, u):
        raise NotImplementedError

    # -- simulation / data hooks ------------------------------------------
    def sample(self, u, rng):
        raise NotImplementedError

    def check_outcome(self, y):
        """Raise InputError when any y is outside the support."""

    def start_effect(self, mean, count):
        """Link-inverse of a (clipped) group outcome mean, for starting values."""
        raise NotImplementedError

    def degenerate_groups(self, y_sum, count):
        """Boolean mask of groups whose effect estimate diverges (no variation)."""
        return np.zeros_like(count, dtype=bool)

    @property
    def is_binary(self) -> bool:
        return False

    def __repr__(self):  # families carry no state beyond their parameters
        return f"{type(self).__name__}()"


def index_derivs(family: Family, y, u):
    """Return (g, g1, g2, g3) at (y, u), checking the outcome support."""
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    family.check_outcome(y)
    return (family.loglik(y, u), family.score(y, u),
            family.hess(y, u), family.third(y, u))


def expected_weight(family: Family, u):
    """omega(u), the expected information weight (see Family.weight)."""
    return family.weight(np.asarray(u, dtype=float))


# ---------------------------------------------------------------------------


@dataclass(frozen=True, repr=False)
class LinearFamily(Family):
    """Gaussian linear model y = u + eps, eps ~ N(0, sigma2).

    The index is always fit with unit weights; sigma2 is concentrated out
    afterwards (the fit attaches a copy of the family carrying the residual
    variance, which scales weights and the Hessian).
    """

    sigma2: float = 1.0
    name = "linear"

    def loglik(self, y, u):
        return -0.5 * ((y - u) ** 2 / self.sigma2 + np.log(2 * np.pi * self.sigma2))

    def score(self, y, u):
        return (y - u) / self.sigma2

    def hess(self, y, u):
        return np.full(np.broadcast(y, u).shape, -1.0 / self.sigma2)

    def third(self, y, u):
        return np.zeros(np.broadcast(y, u).shape)

    def weight(self, u):
        return np.full(np.shape(u), 1.0 / self.sigma2)

    def weight_deriv(self, u):
        return np.zeros(np.shape(u))

    def expected_g3(self, u):
        return np.zeros(np.shape(u))

    def mean(self, u):
        return np.asarray(u, dtype=float)

    def mean_deriv(self, u):
        return np.ones(np.shape(u))

    def mean_deriv2(self, u):
        return np.zeros(np.shape(u))

    def sample(self, u, rng):
        return u + np.sqrt(self.sigma2) * rng.standard_normal(np.shape(u))

    def check_outcome(self, y):
        if not np.all(np.isfinite(y)):
            raise InputError("linear outcome contains non-finite values")

    def start_effect(self, mean, count):
        return np.asarray(mean, dtype=float)

    def with_sigma2(self, sigma2: float) -> "LinearFamily":
        return replace(self, sigma2=float(sigma2))


class _BinaryFamily(Family):
    """Shared plumbing for probit/logit."""

    @property
    def is_binary(self) -> bool:
        return True

    def check_outcome(self, y):
        if not np.all((y == 0) | (y == 1)):
            raise InputError(f"{self.name} outcome must be 0/1")

    def sample(self, u, rng):
        return (rng.random(np.shape(u)) < self.mean(u)).astype(float)

    def degenerate_groups(self, y_sum, count):
        return (y_sum <= 0) | (y_sum >= count)

    def start_effect(self, mean, count):
        eps = 1.0 / (2.0 * np.maximum(count, 1) + 2.0)
        p = np.clip(mean, eps, 1.0 - eps)
        return self._link_inverse(p)

    def _link_inverse(self, p):
        raise NotImplementedError


class LogitFamily(_BinaryFamily):
    """Binary response with logistic link; observed equals expected information."""

    name = "logit"

    def loglik(self, y, u):
        # y*log L + (1-y)*log(1-L), stable in both tails
        return y * u - np.logaddexp(0.0, u)

    def score(self, y, u):
        return y - special.expit(u)

    def hess(self, y, u):
        p = special.expit(u)
        return np.broadcast_to(-p * (1 - p), np.broadcast(y, u).shape).copy()

    def third(self, y, u):
        p = special.expit(u)
        return np.broadcast_to(-p * (1 - p) * (1 - 2 * p),
                               np.broadcast(y, u).shape).copy()

    def score_and_hess(self, y, u):
        p = special.expit(u)
        return y - p, -p * (1 - p)

    def weight(self, u):
        p = special.expit(u)
        return np.maximum(p * (1 - p), WEIGHT_FLOOR)

    def weight_deriv(self, u):
        p = special.expit(u)
        return p * (1 - p) * (1 - 2 * p)

    def expected_g3(self, u):
        return -self.weight_deriv(u)

    def cross_g1g2(self, u):
        return np.zeros(np.shape(u))  # g2 does not involve y

    def mean(self, u):
        return special.expit(u)

    def mean_deriv(self, u):
        p = special.expit(u)
        return p * (1 - p)

    def mean_deriv2(self, u):
        p = special.expit(u)
        return p * (1 - p) * (1 - 2 * p)

    def _link_inverse(self, p):
        return special.logit(p)


def _mills(z):
    """phi(z)/Phi(z), stable for very negative z."""
    return np.exp(norm.logpdf(z) - special.log_ndtr(z))


class ProbitFamily(_BinaryFamily):
    """Binary response with standard normal link."""

    name = "probit"

    def loglik(self, y, u):
        q = 2 * y - 1
        return special.log_ndtr(q * u)

    def score(self, y, u):
        q = 2 * y - 1
        return q * _mills(q * u)

    def hess(self, y, u):
        q = 2 * y - 1
        z = q * u
        lam = _mills(z)
        return -lam * (z + lam)

    def score_and_hess(self, y, u):
        q = 2 * y - 1
        z = q * u
        lam = _mills(z)
        return q * lam, -lam * (z + lam)

    def third(self, y, u):
        q = 2 * y - 1
        z = q * u
        lam = _mills(z)
        return q * lam * ((z + lam) ** 2 + lam * (z + lam) - 1.0)

    def weight(self, u):
        # omega = phi^2 / (Phi (1-Phi)) = mills(u) * mills(-u)
        return np.maximum(_mills(u) * _mills(-u), WEIGHT_FLOOR)

    def weight_deriv(self, u):
        w = _mills(u) * _mills(-u)
        return -w * (2 * u + _mills(u) - _mills(-u))

    def expected_g3(self, u):
        w = _mills(u) * _mills(-u)
        return w * (3 * u + 2 * (_mills(u) - _mills(-u)))

    def cross_g1g2(self, u):
        w = _mills(u) * _mills(-u)
        return -w * (u + _mills(u) - _mills(-u))

    def mean(self, u):
        return norm.cdf(u)

    def mean_deriv(self, u):
        return norm.pdf(u)

    def mean_deriv2(self, u):
        return -np.asarray(u) * norm.pdf(u)

    def _link_inverse(self, p):
        return norm.ppf(p)


class PoissonFamily(Family):
    """Count response, y | u ~ Poisson(exp(u))."""

    name = "poisson"

    def loglik(self, y, u):
        return y * u - np.exp(u) - special.gammaln(y + 1.0)

    def score(self, y, u):
        return y - np.exp(u)

    def hess(self, y, u):
        return np.broadcast_to(-np.exp(u), np.broadcast(y, u).shape).copy()

    def score_and_hess(self, y, u):
        lam = np.exp(u)
        return y - lam, -lam

    def third(self, y, u):
        return np.broadcast_to(-np.exp(u), np.broadcast(y, u).shape).copy()

    def weight(self, u):
        return np.maximum(np.exp(u), WEIGHT_FLOOR)

    def weight_deriv(self, u):
        return np.exp(u)

    def expected_g3(self, u):
        return -np.exp(u)

    def cross_g1g2(self, u):
        return np.zeros(np.shape(u))

    def mean(self, u):
        return np.exp(u)

    def mean_deriv(self, u):
        return np.exp(u)

    def mean_deriv2(self, u):
        return np.exp(u)

    def sample(self, u, rng):
        return rng.poisson(np.exp(u)).astype(float)

    def check_outcome(self, y):
        if not np.all((y >= 0) & (y == np.floor(y)) & np.isfinite(y)):
            raise InputError("poisson outcome must be a nonnegative integer")

    def start_effect(self, mean, count):
        eps = 1.0 / (2.0 * np.maximum(count, 1) + 2.0)
        return np.log(np.maximum(mean, eps))

    def degenerate_groups(self, y_sum, count):
        return y_sum <= 0


_FAMILIES = {
    "linear": LinearFamily,
    "probit": ProbitFamily,
    "logit": LogitFamily,
    "poisson": PoissonFamily,
}


def get_family(name: str, **kwargs) -> Family:
    """Look a family up by CLI name."""
    try:
        cls = _FAMILIES[name.lower()]
    except KeyError:
        raise InputError(
            f"unknown family {name!r}; choose from {sorted(_FAMILIES)}"
        ) from None
    return cls(**kwargs)


def simulate_outcome(family: Family, u, rng) -> np.ndarray:
    """Draw y from the family density at index u using a seeded generator."""
    return np.asarray(family.sample(np.asarray(u, dtype=float), rng))
