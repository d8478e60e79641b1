"""Weighted two-way projection (the orthogonalization system).

``two_way_project`` returns xt = x + kappa_i + rho_t where (kappa, rho)
solve the omega-weighted least-squares projection of -x on the span of the
unit and period dummies, computed by alternating Gauss-Seidel sweeps over
the two blocks.  Only the sum kappa_i + rho_t is identified (the projection
is unique up to a constant split between the blocks), and only the residual
xt is returned.  At the solution the weighted orthogonality conditions

    sum_{t in D_i} w_it xt_it = 0   for every unit i,
    sum_{i in D_t} w_it xt_it = 0   for every period t,

hold to ``tol`` (scaled by the magnitude of x).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import ConvergenceError
from .validation import check_connected, check_weights

DEFAULT_TOL = 1e-10
DEFAULT_MAX_SWEEPS = 1000


def two_way_project(values, weights, unit, period, n_units, n_periods, *,
                    tol: float = DEFAULT_TOL, max_sweeps: int = DEFAULT_MAX_SWEEPS,
                    check_connectivity: bool = True,
                    state: dict | None = None) -> np.ndarray:
    """Project columns on the two-way dummy span under the ``weights`` metric.

    Parameters
    ----------
    values : array (n,) or (n, d)
        Column(s) to residualize.
    weights : array (n,)
        Strictly positive observation weights (expected information).
    unit, period : int arrays (n,)
        Dense 0-based group ids.
    state : dict, optional
        Holds ``kappa``/``rho`` across calls for warm starts; mutated in place.

    Returns
    -------
    Residual array with the same shape as ``values``.
    """
    x = np.asarray(values, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    n, d = x.shape
    w = check_weights(weights, n)
    if check_connectivity:
        check_connected(unit, period, n_units, n_periods)

    sw_i = np.bincount(unit, weights=w, minlength=n_units)
    sw_t = np.bincount(period, weights=w, minlength=n_periods)
    if state is not None and "kappa" in state:
        kappa = state["kappa"]
        rho = state["rho"]
    else:
        kappa = np.zeros((n_units, d))
        rho = np.zeros((n_periods, d))

    scale = max(1.0, float(np.abs(x).max()))
    converged = False
    for _ in range(max_sweeps):
        worst = 0.0
        for k in range(d):
            shifted = w * (x[:, k] + rho[period, k])
            kappa[:, k] = -np.bincount(unit, weights=shifted, minlength=n_units) / sw_i
            shifted = w * (x[:, k] + kappa[unit, k])
            rho[:, k] = -np.bincount(period, weights=shifted, minlength=n_periods) / sw_t
            # the period margin is exact right after the rho update; only the
            # unit margin can still be off
            wr = w * (x[:, k] + kappa[unit, k] + rho[period, k])
            worst = max(worst,
                        np.abs(np.bincount(unit, weights=wr, minlength=n_units)).max())
        if worst <= tol * scale:
            converged = True
            break
    if converged:
        # one full certification pass over both margins
        resid = x + kappa[unit] + rho[period]
        for k in range(d):
            wr = w * resid[:, k]
            worst = max(worst,
                        np.abs(np.bincount(unit, weights=wr, minlength=n_units)).max(),
                        np.abs(np.bincount(period, weights=wr, minlength=n_periods)).max())
        converged = worst <= tol * scale
    if not converged:
        raise ConvergenceError(
            f"two-way projection did not reach tolerance {tol:g} in {max_sweeps} sweeps "
            f"(residual {worst:g}); the panel may be near-disconnected"
        )
    if state is not None:
        state["kappa"] = kappa
        state["rho"] = rho
    out = x + kappa[unit] + rho[period]
    return out[:, 0] if squeeze else out


class TwoWayProjector(BaseEstimator, TransformerMixin):
    """sklearn-style transformer wrapping :func:`two_way_project`.

    ``fit`` binds the panel structure (and optional weights); ``transform``
    residualizes any conforming column block.  With no weights the result is
    the classic two-way within transformation.
    """

    def __init__(self, tol: float = DEFAULT_TOL, max_sweeps: int = DEFAULT_MAX_SWEEPS):
        self.tol = tol
        self.max_sweeps = max_sweeps

    def fit(self, data, weights=None):
        self.unit_ = data.unit
        self.period_ = data.period
        self.n_units_ = data.n_units
        self.n_periods_ = data.n_periods
        self.weights_ = (np.ones(data.n_obs) if weights is None
                         else check_weights(weights, data.n_obs))
        check_connected(self.unit_, self.period_, self.n_units_, self.n_periods_)
        return self

    def transform(self, X):
        return two_way_project(
            X, self.weights_, self.unit_, self.period_,
            self.n_units_, self.n_periods_,
            tol=self.tol, max_sweeps=self.max_sweeps, check_connectivity=False,
        )
