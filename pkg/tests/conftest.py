"""Shared fixtures: panel builders and brute-force oracles.

The oracles here deliberately avoid the library's solver paths: the dense
Newton works on the full (d + N + T - 1)-dimensional dummy parametrization,
and the dense projection solves the weighted least-squares normal system
with a generic lstsq.  They are the independent references for the fast
concentrated solver and the alternating projection.
"""

import numpy as np
import pytest

import panelfe as pf


def make_random_panel(rng, family_name, n_units, n_periods, d=1,
                      unbalanced=False, beta=None, sigma_alpha=0.4,
                      sigma_gamma=0.3, corr_alpha=0.3):
    """Simulate a valid panel for the family; returns (data, beta0)."""
    family = pf.get_family(family_name)
    beta0 = np.asarray(beta if beta is not None else np.linspace(0.8, 1.2, d))
    if family_name == "poisson":
        beta0 = beta0 * 0.4
        sigma_alpha, sigma_gamma = 0.3, 0.2
    for attempt in range(300):
        alpha0 = sigma_alpha * rng.standard_normal(n_units)
        gamma0 = sigma_gamma * rng.standard_normal(n_periods)
        iobs = np.repeat(np.arange(n_units), n_periods)
        tobs = np.tile(np.arange(n_periods), n_units)
        x = rng.standard_normal((iobs.size, d)) * (0.8 if family_name == "poisson" else 1.0)
        x += corr_alpha * alpha0[iobs][:, None]
        u = x @ beta0 + alpha0[iobs] + gamma0[tobs]
        y = family.sample(u, rng)
        if unbalanced:
            keep = rng.random(iobs.size) > 0.15
            iobs, tobs, x, y = iobs[keep], tobs[keep], x[keep], y[keep]
        try:
            data = pf.make_panel(iobs, tobs, y, x, tuple(f"x{j+1}" for j in range(d)))
            data = pf.clean(data, family)
            if data.n_units < 2 or data.n_periods < 2:
                continue
            pf.build_index(data)
            n_params = d + data.n_units + data.n_periods
            if data.n_obs < n_params + 3:
                continue
            probe = pf.fit(data, family_name)  # reject quasi-separated draws
            if family_name != "linear" and np.abs(probe.u_hat).max() > 8.0:
                continue
            if family_name in ("probit", "logit") \
                    and probe.loglik / data.n_obs > -0.02:
                continue  # near-perfect fit: likelihood ridge
            return data, beta0
        except pf.PanelFEError:
            continue
    raise RuntimeError("could not draw a valid panel")


def dense_dummy_fit(data, family_name, tol=1e-12, max_iter=200):
    """Full Newton on (beta, alpha_1..N, gamma_1..T-1), gamma_T = 0.

    Returns (beta_hat, u_hat). Normalization-dependent pieces (alpha, gamma
    levels) are not comparable across solvers; beta and the fitted index are.
    """
    family = pf.get_family(family_name)
    if family_name == "linear":
        family = pf.LinearFamily(1.0)
    n, d = data.x.shape
    N, T = data.n_units, data.n_periods
    Z = np.zeros((n, d + N + T - 1))
    Z[:, :d] = data.x
    Z[np.arange(n), d + data.unit] = 1.0
    last = data.period < T - 1
    Z[np.flatnonzero(last), d + N + data.period[last]] = 1.0
    theta = np.zeros(d + N + T - 1)
    # moment-inversion start for the unit effects keeps Newton in the domain
    counts = np.bincount(data.unit, minlength=N)
    ybar = np.bincount(data.unit, weights=data.y, minlength=N) / counts
    theta[d:d + N] = family.start_effect(ybar, counts)
    loglik = -np.inf
    for _ in range(max_iter):
        u = Z @ theta
        g1 = family.score(data.y, u)
        w = family.weight(u)
        grad = Z.T @ g1
        hess = (w[:, None] * Z).T @ Z
        step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        scale = 1.0
        for _ in range(50):
            cand = theta + scale * step
            ll = float(np.sum(family.loglik(data.y, Z @ cand)))
            if ll >= loglik - 1e-12 * max(1.0, abs(ll)):
                break
            scale *= 0.5
        theta = theta + scale * step
        loglik = float(np.sum(family.loglik(data.y, Z @ theta)))
        if np.abs(grad).max() / n < tol:
            break
    return theta[:d], Z @ theta


def dense_weighted_projection(x, w, unit, period, n_units, n_periods):
    """Weighted LS residual of x on the full dummy matrix via lstsq."""
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    n = x.shape[0]
    D = np.zeros((n, n_units + n_periods))
    D[np.arange(n), unit] = 1.0
    D[np.arange(n), n_units + period] = 1.0
    sw = np.sqrt(w)
    coef = np.linalg.lstsq(sw[:, None] * D, sw[:, None] * x, rcond=None)[0]
    resid = x - D @ coef
    return resid[:, 0] if squeeze else resid


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def small_logit_panel(rng):
    data, beta0 = make_random_panel(rng, "logit", 40, 6)
    return data, beta0
