"""Partial effects, average partial effects, and their corrections.

Plug-in effects delta_it are evaluated at the fitted parameters for every
observed cell.  Standard errors depend on the inferential target:

* ``nt``  - the in-sample average; delta method through the coefficient
  variance H^{-1}/n only (the effects/heterogeneity are conditioned on).
* ``pop`` - the population average; adds the two-way cluster variance of
  the per-unit and per-period effect means (the slower max(N,T) rate), as
  recommended for finite samples.
* ``t``   - the mixed target (population units, in-sample periods); the
  period-cluster term only.

Jackknife corrections reuse the same affine combinations as the coefficient
corrections, applied to subpanel APEs, each computed over its own
observation set.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .bias import (hbc_combine, jbc_combine, sbc_combine,
                   _loo_unit_estimates, _loo_period_estimates,
                   _period_half_estimates, _unit_half_estimates, _resolve)
from .data import PanelData, BINARY, CONTINUOUS
from .errors import InputError, ValidationError
from .estimator import FitResult, SolveOptions, vcov_beta
from .families import EffectSpec

TARGETS = ("nt", "pop", "t")


@dataclass(frozen=True)
class APEResult:
    """An average partial effect with its target-specific standard error."""

    estimate: float
    se: float
    target: str
    method: str
    covariate: str
    mode: str
    n_obs: int
    components: Optional[np.ndarray] = None
    fe_estimate: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "estimate": self.estimate, "se": self.se, "target": self.target,
            "method": self.method, "covariate": self.covariate,
            "mode": self.mode, "n_obs": self.n_obs,
        }


def _check_spec(data: PanelData, spec: EffectSpec):
    k = spec.covariate
    if not 0 <= k < data.n_covariates:
        raise InputError(f"covariate index {k} out of range")
    kind = data.covariate_kinds[k]
    if spec.mode == "discrete" and kind != BINARY:
        raise InputError(
            f"discrete effect requested for non-binary covariate {data.covariate_names[k]!r}")
    if spec.mode == "marginal" and kind != CONTINUOUS:
        raise InputError(
            f"marginal effect requested for non-continuous covariate {data.covariate_names[k]!r}")
    return k


def effect_matrix(fit_result: FitResult, data: PanelData, spec: EffectSpec) -> np.ndarray:
    """Per-observation plug-in effects delta_it over the observed cells."""
    k = _check_spec(data, spec)
    fam = fit_result.family
    u = fit_result.u_hat
    beta_k = fit_result.beta[k]
    if spec.mode == "discrete":
        u0 = u - data.x[:, k] * beta_k
        return fam.mean(u0 + beta_k) - fam.mean(u0)
    return beta_k * fam.mean_deriv(u)


def _effect_gradient(fit_result: FitResult, data: PanelData, spec: EffectSpec) -> np.ndarray:
    """d delta_it / d beta, holding the fitted effects fixed; (n, d)."""
    k = spec.covariate
    fam = fit_result.family
    u = fit_result.u_hat
    beta_k = fit_result.beta[k]
    grad = np.empty_like(data.x)
    if spec.mode == "discrete":
        u0 = u - data.x[:, k] * beta_k
        m1, m0 = fam.mean_deriv(u0 + beta_k), fam.mean_deriv(u0)
        grad[:] = data.x * (m1 - m0)[:, None]
        grad[:, k] = m1
    else:
        m1 = fam.mean_deriv(u)
        m2 = fam.mean_deriv2(u)
        grad[:] = data.x * (beta_k * m2)[:, None]
        grad[:, k] = m1 + beta_k * m2 * data.x[:, k]
    return grad


def _cluster_terms(delta: np.ndarray, data: PanelData):
    """(unit-cluster, period-cluster) variance contributions of the mean."""
    n = delta.shape[0]
    dhat = delta.mean()
    out = []
    for ids, n_groups in ((data.unit, data.n_units), (data.period, data.n_periods)):
        counts = np.bincount(ids, minlength=n_groups).astype(float)
        means = np.bincount(ids, weights=delta, minlength=n_groups) / counts
        weights = counts / n
        g = n_groups
        term = np.sum(weights ** 2 * (means - dhat) ** 2) * g / max(g - 1, 1)
        out.append(float(term))
    return out[0], out[1]


def ape(fit_result: FitResult, data: PanelData, spec: EffectSpec,
        target: str = "nt", keep_components: bool = False) -> APEResult:
    """In-sample APE with a standard error for the requested target."""
    if target not in TARGETS:
        raise InputError(f"target must be one of {TARGETS}")
    delta = effect_matrix(fit_result, data, spec)
    if delta.size == 0:
        raise InputError("empty effect set")
    est = float(delta.mean())
    grad = _effect_gradient(fit_result, data, spec).mean(axis=0)
    v_beta = float(grad @ vcov_beta(fit_result) @ grad)
    v_unit, v_period = _cluster_terms(delta, data)
    if target == "nt":
        var = v_beta
    elif target == "pop":
        var = v_beta + v_unit + v_period
    else:
        var = v_period
    return APEResult(
        estimate=est, se=float(np.sqrt(max(var, 0.0))), target=target,
        method="fe", covariate=data.covariate_names[spec.covariate],
        mode=spec.mode, n_obs=data.n_obs,
        components=delta if keep_components else None,
    )


def corrected_ape(data: PanelData, family, spec: EffectSpec,
                  target: str = "nt", method: str = "jbc",
                  num_unit_splits: int = 50, seed: int | None = 0,
                  opts: SolveOptions | None = None, *,
                  drop_degenerate: bool = False,
                  fit_result: FitResult | None = None) -> APEResult:
    """Jackknife-corrected APE; the se is the full-panel target formula."""
    family, opts, full = _resolve(data, family, opts, fit_result)
    base = ape(full, data, spec, target)
    dd = drop_degenerate

    def value(res, sub):  # each subpanel contributes its own plug-in APE
        return float(effect_matrix(res, sub, spec).mean())

    if method == "jbc":
        loo_i = _loo_unit_estimates(data, family, opts, full, value,
                                    drop_degenerate=dd)
        loo_t = _loo_period_estimates(data, family, opts, full, value,
                                      drop_degenerate=dd)
        corrected = jbc_combine(base.estimate, loo_i.mean(), loo_t.mean(),
                                data.n_units, data.n_periods)
    elif method == "sbc":
        if data.n_units < 4 or data.n_periods < 4:
            raise ValidationError("split-panel correction needs N >= 4 and T >= 4")
        rng = np.random.default_rng(seed)
        halves_t = _period_half_estimates(data, family, opts, full, value,
                                          drop_degenerate=dd)
        splits = _unit_half_estimates(data, family, opts, full,
                                      num_unit_splits, rng, value,
                                      drop_degenerate=dd)
        corrected = sbc_combine(base.estimate, splits.mean(), halves_t.mean())
    elif method == "hbc":
        loo_i = _loo_unit_estimates(data, family, opts, full, value,
                                    drop_degenerate=dd)
        halves_t = _period_half_estimates(data, family, opts, full, value,
                                          drop_degenerate=dd)
        corrected = hbc_combine(base.estimate, loo_i.mean(), halves_t.mean(),
                                data.n_units)
    else:
        raise InputError("method must be one of jbc, sbc, hbc")
    return APEResult(
        estimate=float(corrected), se=base.se, target=target, method=method,
        covariate=base.covariate, mode=spec.mode, n_obs=data.n_obs,
        fe_estimate=base.estimate,
    )
