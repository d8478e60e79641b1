"""Incidental-parameter bias estimation and corrected estimators.

``estimate_B``/``estimate_D`` evaluate the plug-in bias components at a fit:
per unit i (resp. period t) a numerator over the expected-information
denominator, averaged and premultiplied by H^{-1}.  With the single-index
composition the ingredients reduce to family derivatives times the
projected covariates: l^a = g1, l^aa = g2, l*^ba = g2*xt, l*^baa = g3*xt.

Contemporaneous pieces use the family's conditional moments E[g1 g2](u),
E[g3](u), E[g2](u) = -omega(u) at the fitted index, so the linear and
Poisson zeros are exact and the probit plug-in reduces to its closed form
identically.  The dynamic cross terms (0 < s - t <= M) use realized scores
g1_it paired with expected weights omega_is; pairs bridging a gap in the
unit's observed periods are skipped.

Corrected estimators: analytical (``abc``, optionally iterated with the
effects re-profiled at the corrected beta), leave-one-out jackknife
(``jbc``), split-panel jackknife (``sbc``), hybrid (``hbc``), and the
profile-score correction (``psbc``).  Unbalanced panels divide the bias
terms by the average counts tbar = n/N and nbar = n/T.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from .data import (PanelData, build_index, clean, leave_period_out,
                   leave_unit_out, period_halves, subpanel, unit_halves)
from .errors import PanelFEError, SingularHessianError, ValidationError
from .estimator import FitResult, SolveOptions, fit, profile, vcov_beta
from .families import Family, ProbitFamily, get_family

PER_PERIOD = "per_period"
PAIRWISE = "pairwise"


@dataclass(frozen=True)
class BiasEstimates:
    """B-hat, D-hat and their pre-H^{-1} numerators b = H B, d = H D."""

    B: np.ndarray
    D: np.ndarray
    b_raw: np.ndarray
    d_raw: np.ndarray
    hessian: np.ndarray
    trim: int
    info_equality_used: bool
    skipped_units: int = 0


@dataclass(frozen=True)
class CorrectedEstimate:
    """A corrected beta with enough metadata to reproduce it."""

    method: str
    beta: np.ndarray
    vcov: np.ndarray
    fe_beta: np.ndarray
    params: dict = field(default_factory=dict)
    bias_B: Optional[np.ndarray] = None
    bias_D: Optional[np.ndarray] = None
    subestimates: Optional[dict] = None
    flags: tuple = ()

    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.vcov))


def _hessian_inverse(hessian):
    try:
        cho = scipy.linalg.cho_factor(hessian)
    except scipy.linalg.LinAlgError:
        raise SingularHessianError("hessian not positive definite in bias plug-in") from None
    return lambda v: scipy.linalg.cho_solve(cho, v)


def _unit_sorted(fit_result: FitResult, data: PanelData):
    order = np.lexsort((data.period, data.unit))
    return order, data.unit[order], data.period[order]


def _cross_terms(fit_result, data, M, lag_average, use_realized):
    """Per-unit averages of sum_{t < s <= t+M} g1_it * (-l*^ba_is), sign-folded.

    Returns the (N, d) array of per-unit cross-term averages entering the
    numerator with a plus sign (see module docstring), already divided by
    |D_i| (per_period) or by the per-lag pair counts (pairwise).
    """
    N = fit_result.n_units
    d = fit_result.beta.shape[0]
    out = np.zeros((N, d))
    if M <= 0:
        return out
    order, iu, pt = _unit_sorted(fit_result, data)
    fam = fit_result.family
    g1 = fam.score(data.y, fit_result.u_hat)[order]
    if use_realized:
        wgt = -fam.hess(data.y, fit_result.u_hat)[order]
    else:
        wgt = fit_result.omega[order]
    xt = fit_result.xtilde[order]
    counts = np.bincount(data.unit, minlength=N).astype(float)
    n = iu.shape[0]
    for j in range(1, M + 1):
        if j >= n:
            break
        same = (iu[:-j] == iu[j:]) & (pt[j:] - pt[:-j] == j)
        if not same.any():
            continue
        ids = iu[:-j][same]
        contrib = (g1[:-j][same] * wgt[j:][same])[:, None] * xt[j:][same]
        sums = np.zeros((N, d))
        for k in range(d):
            sums[:, k] = np.bincount(ids, weights=contrib[:, k], minlength=N)
        if lag_average == PAIRWISE:
            pairs = np.bincount(ids, minlength=N).astype(float)
            nz = pairs > 0
            out[nz] += sums[nz] / pairs[nz, None]
        else:
            out += sums / counts[:, None]
    return out


def _group_mean(values, ids, n_groups, counts):
    """Column-wise group means of an (n, d) array."""
    d = values.shape[1]
    out = np.empty((n_groups, d))
    for k in range(d):
        out[:, k] = np.bincount(ids, weights=values[:, k], minlength=n_groups)
    return out / counts[:, None]


def estimate_B(fit_result: FitResult, data: PanelData, M: int = 0, *,
               lag_average: str = PER_PERIOD,
               use_realized: bool = False) -> np.ndarray:
    """Plug-in estimate of the unit-effect bias component B.

    ``M`` is the trimming lag (0 for strictly exogenous covariates). Units
    with |D_i| <= M are dropped from the cross-sectional average with a
    warning.  ``use_realized`` switches to the conditional-moment-safe form
    that replaces conditional expectations with realized score products (the
    information equality is then not used in the numerator).
    """
    B, _, _ = _estimate_B_raw(fit_result, data, M, lag_average, use_realized)
    return B


def _estimate_B_raw(fit_result, data, M, lag_average, use_realized):
    if M < 0:
        raise ValueError("trimming lag M must be >= 0")
    fam = fit_result.family
    u = fit_result.u_hat
    xt = fit_result.xtilde
    N = fit_result.n_units
    counts = np.bincount(data.unit, minlength=N).astype(float)
    mean_w = np.bincount(data.unit, weights=fit_result.omega, minlength=N) / counts
    if np.any(mean_w <= 0):
        raise ValueError("zero information denominator for some unit")

    eg3 = fam.expected_g3(u)
    if use_realized:
        g1 = fam.score(data.y, u)
        g2 = fam.hess(data.y, u)
        term1 = _group_mean((g1 * g2)[:, None] * xt, data.unit, N, counts)
        term1 += -_cross_terms(fit_result, data, M, lag_average, use_realized)
        mean_g1sq = np.bincount(data.unit, weights=g1 ** 2, minlength=N) / counts
        term2_num = _group_mean(eg3[:, None] * xt, data.unit, N, counts)
        ratio = term1 / mean_w[:, None] \
            + term2_num * (mean_g1sq / (2.0 * mean_w ** 2))[:, None]
    else:
        coef = fam.weight_deriv(u) + 0.5 * eg3
        contemp = _group_mean(coef[:, None] * xt, data.unit, N, counts)
        cross = _cross_terms(fit_result, data, M, lag_average, use_realized)
        ratio = (contemp + cross) / (-mean_w[:, None])

    keep = counts > M
    skipped = int(N - keep.sum())
    if skipped:
        warnings.warn(
            f"estimate_B: {skipped} unit(s) with |D_i| <= M={M} dropped from the average",
            stacklevel=2,
        )
    b_raw = ratio[keep].mean(axis=0)
    B = _hessian_inverse(fit_result.hessian)(b_raw)
    return B, b_raw, skipped


def estimate_D(fit_result: FitResult, data: PanelData, *,
               use_realized: bool = False) -> np.ndarray:
    """Plug-in estimate of the period-effect bias component D (no trimming)."""
    D, _ = _estimate_D_raw(fit_result, data, use_realized)
    return D


def _estimate_D_raw(fit_result, data, use_realized):
    fam = fit_result.family
    u = fit_result.u_hat
    xt = fit_result.xtilde
    T = fit_result.n_periods
    counts = np.bincount(data.period, minlength=T).astype(float)
    mean_w = np.bincount(data.period, weights=fit_result.omega, minlength=T) / counts
    if np.any(mean_w <= 0):
        raise ValueError("zero information denominator for some period")
    eg3 = fam.expected_g3(u)
    if use_realized:
        g1 = fam.score(data.y, u)
        g2 = fam.hess(data.y, u)
        term1 = _group_mean((g1 * g2)[:, None] * xt, data.period, T, counts)
        mean_g1sq = np.bincount(data.period, weights=g1 ** 2, minlength=T) / counts
        term2_num = _group_mean(eg3[:, None] * xt, data.period, T, counts)
        ratio = term1 / mean_w[:, None] \
            + term2_num * (mean_g1sq / (2.0 * mean_w ** 2))[:, None]
    else:
        coef = fam.weight_deriv(u) + 0.5 * eg3
        contemp = _group_mean(coef[:, None] * xt, data.period, T, counts)
        ratio = contemp / (-mean_w[:, None])
    d_raw = ratio.mean(axis=0)
    D = _hessian_inverse(fit_result.hessian)(d_raw)
    return D, d_raw


def estimate_bias(fit_result: FitResult, data: PanelData, M: int = 0, *,
                  lag_average: str = PER_PERIOD,
                  use_realized: bool = False) -> BiasEstimates:
    B, b_raw, skipped = _estimate_B_raw(fit_result, data, M, lag_average, use_realized)
    D, d_raw = _estimate_D_raw(fit_result, data, use_realized)
    return BiasEstimates(B=B, D=D, b_raw=b_raw, d_raw=d_raw,
                         hessian=fit_result.hessian, trim=M,
                         info_equality_used=not use_realized,
                         skipped_units=skipped)


def probit_closed_form_bias(fit_result: FitResult, data: PanelData):
    """Exact probit specializations of B-hat and D-hat (strict exogeneity).

    B = (1/2) H^{-1} E_N { E_{T,i}[w u xt] / E_{T,i} w } and symmetrically
    for D, with w the probit information weight and u the fitted index; the
    textbook x~x~' beta form is the plim of these under the projection
    orthogonality.
    """
    if not isinstance(fit_result.family, ProbitFamily):
        raise ValueError("closed-form bias is specific to the probit family")
    w = fit_result.omega
    u = fit_result.u_hat
    xt = fit_result.xtilde
    hinv = _hessian_inverse(fit_result.hessian)

    def one_margin(ids, n_groups):
        counts = np.bincount(ids, minlength=n_groups).astype(float)
        num = _group_mean((w * u)[:, None] * xt, ids, n_groups, counts)
        den = np.bincount(ids, weights=w, minlength=n_groups) / counts
        return 0.5 * hinv((num / den[:, None]).mean(axis=0))

    B = one_margin(data.unit, fit_result.n_units)
    D = one_margin(data.period, fit_result.n_periods)
    return B, D


# ---------------------------------------------------------------------------
# affine jackknife combinations (pure; array- or scalar-valued estimates)


def jbc_combine(full, loo_unit_mean, loo_period_mean, n_units, n_periods):
    return ((n_units + n_periods - 1) * np.asarray(full)
            - (n_units - 1) * np.asarray(loo_unit_mean)
            - (n_periods - 1) * np.asarray(loo_period_mean))


def sbc_combine(full, unit_half_mean, period_half_mean):
    return 3 * np.asarray(full) - np.asarray(unit_half_mean) - np.asarray(period_half_mean)


def hbc_combine(full, loo_unit_mean, period_half_mean, n_units):
    return ((n_units + 1) * np.asarray(full)
            - (n_units - 1) * np.asarray(loo_unit_mean)
            - np.asarray(period_half_mean))


# ---------------------------------------------------------------------------
# subpanel machinery


def _warm_start(parent_fit: FitResult, unit_pos, period_pos):
    """Map the parent estimates onto a subpanel via retained-index arrays."""
    start = (parent_fit.beta.copy(), parent_fit.alpha[unit_pos].copy(),
             parent_fit.gamma[period_pos].copy())
    proj = None
    if parent_fit.proj_state and "kappa" in parent_fit.proj_state:
        proj = {"kappa": parent_fit.proj_state["kappa"][unit_pos].copy(),
                "rho": parent_fit.proj_state["rho"][period_pos].copy()}
    return start, proj


def _drop_degenerate(sub: PanelData, family, unit_map, period_map):
    """Iteratively remove zero-variation units/periods (no collinearity scan),
    composing the parent index maps along the way."""
    from .data import _restrict
    from .families import LinearFamily

    if isinstance(family, LinearFamily):
        return sub, unit_map, period_map  # no group can be degenerate
    for _ in range(100):
        counts_i = np.bincount(sub.unit, minlength=sub.n_units)
        counts_t = np.bincount(sub.period, minlength=sub.n_periods)
        ysum_i = np.bincount(sub.unit, weights=sub.y, minlength=sub.n_units)
        ysum_t = np.bincount(sub.period, weights=sub.y, minlength=sub.n_periods)
        bad_i = family.degenerate_groups(ysum_i, counts_i)
        bad_t = family.degenerate_groups(ysum_t, counts_t)
        if not bad_i.any() and not bad_t.any():
            return sub, unit_map, period_map
        keep = ~bad_i[sub.unit] & ~bad_t[sub.period]
        if not keep.any():
            raise ValidationError("all groups degenerate in subpanel")
        sub, ou, op = _restrict(sub, keep, return_maps=True)
        unit_map = unit_map[ou]
        period_map = period_map[op]
    raise ValidationError("degenerate-group removal did not stabilize")


def fit_subpanel(data: PanelData, family, scheme, opts: SolveOptions,
                 parent_fit: FitResult | None = None,
                 drop_degenerate: bool = False):
    """Fit on the restriction of ``data`` to ``scheme``, warm-started.

    Returns ``(FitResult, subpanel)``.  Validation or convergence failures
    are re-raised with the subpanel named, because a dropped subpanel would
    silently break the affine combination algebra.

    ``drop_degenerate`` removes zero-variation units/periods inside the
    subpanel before fitting.  Their effect estimates diverge while their
    limiting contribution to the coefficient score vanishes, so the reduced
    fit is the exact profile MLE of the subpanel; binary designs at short T
    produce such groups in half-panels routinely.
    """
    label = scheme.describe(data)
    try:
        sub, unit_map, period_map = subpanel(data, scheme, return_maps=True)
        if drop_degenerate:
            fam_obj = get_family(family) if isinstance(family, str) else family
            sub, unit_map, period_map = _drop_degenerate(sub, fam_obj,
                                                         unit_map, period_map)
    except PanelFEError as err:
        raise ValidationError(f"subpanel {label}: {err}") from err
    start = proj = None
    if parent_fit is not None:
        start, proj = _warm_start(parent_fit, unit_map, period_map)
    try:
        return fit(sub, family, opts, start=start, proj_start=proj), sub
    except PanelFEError as err:
        if start is not None:
            try:  # retry cold before giving up
                return fit(sub, family, opts), sub
            except PanelFEError:
                pass
        raise type(err)(f"subpanel {label}: {err}") from err


def _beta_of(res, sub):
    return res.beta


def _loo_unit_estimates(data, family, opts, full, value=_beta_of,
                        drop_degenerate=False):
    vals = []
    for i in range(data.n_units):
        res, sub = fit_subpanel(data, family, leave_unit_out(i), opts,
                                parent_fit=full, drop_degenerate=drop_degenerate)
        vals.append(value(res, sub))
    return np.array(vals)


def _loo_period_estimates(data, family, opts, full, value=_beta_of,
                          drop_degenerate=False):
    vals = []
    for t in range(data.n_periods):
        res, sub = fit_subpanel(data, family, leave_period_out(t), opts,
                                parent_fit=full, drop_degenerate=drop_degenerate)
        vals.append(value(res, sub))
    return np.array(vals)


def _period_half_estimates(data, family, opts, full, value=_beta_of,
                           drop_degenerate=False):
    out = []
    for scheme in period_halves(data.n_periods):
        res, sub = fit_subpanel(data, family, scheme, opts, parent_fit=full,
                                drop_degenerate=drop_degenerate)
        out.append(value(res, sub))
    return np.array(out)


def _unit_half_estimates(data, family, opts, full, num_splits, rng,
                         value=_beta_of, drop_degenerate=False):
    """Per-split averages of the two half-panel estimates, (num_splits, ...)."""
    out = []
    for _ in range(num_splits):
        h1, h2 = unit_halves(data.n_units, rng)
        r1, s1 = fit_subpanel(data, family, h1, opts, parent_fit=full,
                              drop_degenerate=drop_degenerate)
        r2, s2 = fit_subpanel(data, family, h2, opts, parent_fit=full,
                              drop_degenerate=drop_degenerate)
        out.append(0.5 * (np.asarray(value(r1, s1)) + np.asarray(value(r2, s2))))
    return np.array(out)


def _resolve(data, family, opts, fit_result):
    if isinstance(family, str):
        family = get_family(family)
    opts = opts or SolveOptions()
    full = fit_result if fit_result is not None else fit(data, family, opts)
    return family, opts, full


# ---------------------------------------------------------------------------
# corrected estimators


def abc(data: PanelData, family, M: int = 0, iterations: int = 1,
        opts: SolveOptions | None = None, *, lag_average: str = PER_PERIOD,
        use_realized: bool = False, fit_result: FitResult | None = None
        ) -> CorrectedEstimate:
    """Analytical bias correction: beta - B/tbar - D/nbar.

    ``iterations`` > 1 re-evaluates the plug-ins at the previous corrected
    beta with the effects re-profiled there.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    family, opts, full = _resolve(data, family, opts, fit_result)
    idx = build_index(data)
    be = estimate_bias(full, data, M, lag_average=lag_average,
                       use_realized=use_realized)
    beta_c = full.beta - be.B / idx.tbar - be.D / idx.nbar
    current = full
    for _ in range(iterations - 1):
        current = profile(data, family, beta_c, opts,
                          start=(current.alpha, current.gamma))
        be = estimate_bias(current, data, M, lag_average=lag_average,
                           use_realized=use_realized)
        beta_c = full.beta - be.B / idx.tbar - be.D / idx.nbar
    return CorrectedEstimate(
        method="abc", beta=beta_c, vcov=vcov_beta(full), fe_beta=full.beta,
        params={"trim": M, "iterations": iterations, "lag_average": lag_average,
                "use_realized": use_realized},
        bias_B=be.B, bias_D=be.D,
    )


def jbc(data: PanelData, family, opts: SolveOptions | None = None, *,
        drop_degenerate: bool = False,
        fit_result: FitResult | None = None) -> CorrectedEstimate:
    """Leave-one-out jackknife (requires independence in both dimensions)."""
    family, opts, full = _resolve(data, family, opts, fit_result)
    loo_i = _loo_unit_estimates(data, family, opts, full,
                                drop_degenerate=drop_degenerate)
    loo_t = _loo_period_estimates(data, family, opts, full,
                                  drop_degenerate=drop_degenerate)
    beta_c = jbc_combine(full.beta, loo_i.mean(axis=0), loo_t.mean(axis=0),
                         data.n_units, data.n_periods)
    return CorrectedEstimate(
        method="jbc", beta=beta_c, vcov=vcov_beta(full), fe_beta=full.beta,
        subestimates={"leave_unit_out": loo_i, "leave_period_out": loo_t},
    )


def sbc(data: PanelData, family, num_unit_splits: int = 50,
        seed: int | None = 0, opts: SolveOptions | None = None, *,
        drop_degenerate: bool = False,
        fit_result: FitResult | None = None) -> CorrectedEstimate:
    """Split-panel jackknife: 3 beta - unit-half average - period-half average.

    The unit partition is random; ``seed`` makes the multi-split average
    reproducible and is recorded in the estimate.
    """
    if data.n_units < 4 or data.n_periods < 4:
        raise ValidationError("split-panel correction needs N >= 4 and T >= 4")
    family, opts, full = _resolve(data, family, opts, fit_result)
    rng = np.random.default_rng(seed)
    halves_t = _period_half_estimates(data, family, opts, full,
                                      drop_degenerate=drop_degenerate)
    tilde_t = halves_t.mean(axis=0)
    splits = _unit_half_estimates(data, family, opts, full, num_unit_splits,
                                  rng, drop_degenerate=drop_degenerate)
    tilde_n = splits.mean(axis=0)
    beta_c = sbc_combine(full.beta, tilde_n, tilde_t)
    return CorrectedEstimate(
        method="sbc", beta=beta_c, vcov=vcov_beta(full), fe_beta=full.beta,
        params={"num_unit_splits": num_unit_splits, "seed": seed},
        subestimates={"period_halves": halves_t, "unit_split_averages": splits},
    )


def hbc(data: PanelData, family, opts: SolveOptions | None = None, *,
        drop_degenerate: bool = False,
        fit_result: FitResult | None = None) -> CorrectedEstimate:
    """Hybrid jackknife: leave-one-out over units, split-half over periods."""
    family, opts, full = _resolve(data, family, opts, fit_result)
    loo_i = _loo_unit_estimates(data, family, opts, full,
                                drop_degenerate=drop_degenerate)
    halves_t = _period_half_estimates(data, family, opts, full,
                                      drop_degenerate=drop_degenerate)
    beta_c = hbc_combine(full.beta, loo_i.mean(axis=0), halves_t.mean(axis=0),
                         data.n_units)
    return CorrectedEstimate(
        method="hbc", beta=beta_c, vcov=vcov_beta(full), fe_beta=full.beta,
        subestimates={"leave_unit_out": loo_i, "period_halves": halves_t},
    )


def psbc(data: PanelData, family, M: int = 0, opts: SolveOptions | None = None, *,
         lag_average: str = PER_PERIOD, use_realized: bool = False,
         max_iter: int = 50, tol: float = 1e-10,
         trust_radius: float | None = None,
         fit_result: FitResult | None = None) -> CorrectedEstimate:
    """Profile-score correction: root of dL/dbeta - b/tbar - d/nbar = 0.

    Newton iteration from the FE estimate, with the bias terms re-evaluated
    at each iterate (score-correction variant that estimates parameter and
    bias simultaneously).  The corrected score may have several or no roots;
    the search is local and the estimate is flagged when it leaves a trust
    region around the FE estimate.
    """
    family, opts, full = _resolve(data, family, opts, fit_result)
    idx = build_index(data)
    beta = full.beta.copy()
    current = full
    flags = []
    converged = False
    radius = trust_radius
    for _ in range(max_iter):
        g1 = current.family.score(data.y, current.u_hat)
        score_mean = current.xtilde.T @ g1 / idx.n
        be = estimate_bias(current, data, M, lag_average=lag_average,
                           use_realized=use_realized)
        f_val = score_mean - be.b_raw / idx.tbar - be.d_raw / idx.nbar
        step = _hessian_inverse(current.hessian)(f_val)
        if np.abs(step).max() <= tol * (1.0 + np.abs(beta).max()):
            converged = True
            break
        if radius is None:
            correction = np.abs(be.B / idx.tbar + be.D / idx.nbar).max()
            radius = max(10.0 * correction, 0.25 * (1.0 + np.abs(full.beta).max()))
        beta = beta + step
        if np.abs(beta - full.beta).max() > radius:
            flags.append("left_trust_region")
            scale = radius / np.abs(beta - full.beta).max()
            beta = full.beta + scale * (beta - full.beta)
            break
        current = profile(data, family, beta, opts,
                          start=(current.alpha, current.gamma))
    if not converged and "left_trust_region" not in flags:
        flags.append("no_root_within_max_iter")
    return CorrectedEstimate(
        method="psbc", beta=beta, vcov=vcov_beta(full), fe_beta=full.beta,
        params={"trim": M, "lag_average": lag_average, "use_realized": use_realized},
        bias_B=be.B, bias_D=be.D, flags=tuple(flags),
    )
