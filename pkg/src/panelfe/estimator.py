"""Two-way fixed-effects MLE by concentrated Newton iteration.

The solver alternates two blocks: (i) an inner loop that maximizes over the
unit and period effects at fixed beta (each block update is a simultaneous
scalar Fisher-scoring step, exact because the alpha_i subproblems are
separable given gamma and vice versa; blocks alternate Gauss-Seidel style,
single-threaded and deterministic), and (ii) an outer Newton step on beta
using the partialled-out Hessian sum(w xt xt') built from the weighted
two-way projection, with step-halving on the profile likelihood.  For the
linear family the outer step is the exact within-OLS solution.

The period effects are normalized to observation-count-weighted mean zero;
the global level lives in the unit effects.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.linalg
from sklearn.base import BaseEstimator

from .data import PanelData, PanelIndex, build_index
from .errors import ConvergenceError, SeparationError, SingularHessianError
from .families import Family, LinearFamily, get_family
from .projection import two_way_project
from .validation import check_connected

MAX_HALVINGS = 40


@dataclass(frozen=True)
class SolveOptions:
    """Solver knobs; all tolerances are on count-normalized scores."""

    tol_grad: float = 1e-9
    tol_proj: float = 1e-10
    max_outer: int = 100
    max_inner: int = 500
    separation_bound: float = 30.0
    step_clip: float = 4.0


@dataclass(frozen=True)
class FitResult:
    """Converged fixed-effects MLE and the derived plug-in ingredients.

    ``hessian`` is the observation-average H = E_n[w xt xt'] so that the
    asymptotic variance of beta is hessian^{-1} / n.  ``family`` is the
    post-fit family (for the linear family it carries the concentrated
    residual variance, which scales ``omega`` and ``hessian``).
    """

    beta: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    u_hat: np.ndarray
    omega: np.ndarray
    xtilde: np.ndarray
    hessian: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    family: Family
    n_obs: int
    sigma2: Optional[float] = None
    proj_state: Optional[dict] = None  # kappa/rho warm-start hints

    @property
    def n_units(self) -> int:
        return self.alpha.shape[0]

    @property
    def n_periods(self) -> int:
        return self.gamma.shape[0]


def _start_values(data: PanelData, family: Family, idx: PanelIndex):
    ybar_i = np.bincount(data.unit, weights=data.y, minlength=idx.n_units) / idx.unit_counts
    ybar_t = np.bincount(data.period, weights=data.y, minlength=idx.n_periods) / idx.period_counts
    alpha = np.asarray(family.start_effect(ybar_i, idx.unit_counts), dtype=float)
    gamma = np.asarray(family.start_effect(ybar_t, idx.period_counts), dtype=float)
    gamma = gamma - np.sum(idx.period_counts * gamma) / idx.n
    return alpha, gamma


class _InnerDiverged(ConvergenceError):
    """Private: a trial point drove an effect past the separation bound."""


def _check_degenerate_groups(data: PanelData, family: Family, idx: PanelIndex):
    """True separation for single-index models with free group intercepts:
    a group whose outcome carries no information (the scalar optimum sits at
    infinity), detectable from the data before any iteration."""
    ysum_i = np.bincount(data.unit, weights=data.y, minlength=idx.n_units)
    ysum_t = np.bincount(data.period, weights=data.y, minlength=idx.n_periods)
    bad_i = np.flatnonzero(family.degenerate_groups(ysum_i, idx.unit_counts))
    bad_t = np.flatnonzero(family.degenerate_groups(ysum_t, idx.period_counts))
    if bad_i.size or bad_t.size:
        labels_i = [data.unit_label(i) for i in bad_i[:8]]
        labels_t = [data.period_label(t) for t in bad_t[:8]]
        raise SeparationError(
            f"fixed effect diverges: units {labels_i} / periods {labels_t} have "
            f"no outcome variation (run validate and drop them)"
        )


def _block_step(family, y, offset, ids, counts, effects, bound, clip):
    """One guarded Fisher step per group, in place; returns pre-step scores.

    Each group's subproblem is a strictly concave scalar maximization, so a
    score-direction step with per-group halving against the group likelihood
    never decreases the joint objective.
    """
    n_groups = counts.shape[0]
    u = offset + effects[ids]
    g1, g2 = family.score_and_hess(y, u)
    g = np.bincount(ids, weights=g1, minlength=n_groups)
    # observed information: far better conditioned than the expected weight in
    # the probit tails (elsewhere they coincide); purely a solver choice
    h = np.bincount(ids, weights=-g2, minlength=n_groups)
    step = np.clip(g / np.maximum(h, 1e-300), -clip, clip)
    if isinstance(family, LinearFamily):
        # quadratic subproblems: the (possibly clipped) Newton step is exact
        effects += step
        return g
    if np.abs(step).max() < 1e-3:
        # inside the Newton contraction region for these smooth families;
        # skip the likelihood guard
        effects += step
        return g
    ll0 = np.bincount(ids, weights=family.loglik(y, u), minlength=n_groups)
    slack = 1e-12 * np.maximum(1.0, np.abs(ll0))
    for _ in range(20):
        cand = effects + step
        with np.errstate(over="ignore", invalid="ignore"):
            llc = family.loglik(y, offset + cand[ids])
        llc = np.where(np.isnan(llc), -np.inf, llc)
        ll1 = np.bincount(ids, weights=llc, minlength=n_groups)
        bad = ll1 < ll0 - slack
        if not bad.any():
            effects += step
            break
        step = np.where(bad, 0.5 * step, step)
    else:
        effects += np.where(bad, 0.0, step)
    runaway = (np.abs(effects) > bound) & (np.sign(step) == np.sign(effects)) \
        & (np.abs(step) > 1e-8)
    if runaway.any():
        raise _InnerDiverged(
            f"effect(s) {np.flatnonzero(runaway)[:5].tolist()} diverging beyond "
            f"|{bound}|")
    return g


def _inner_solve(family, y, xb, unit, period, alpha, gamma, idx, opts):
    """Maximize over (alpha, gamma) at fixed beta, in place. Returns residual."""
    cnt_i = idx.unit_counts
    cnt_t = idx.period_counts
    resid = np.inf
    for _ in range(opts.max_inner):
        ga = _block_step(family, y, xb + gamma[period], unit, cnt_i, alpha,
                         opts.separation_bound, opts.step_clip)
        gt = _block_step(family, y, xb + alpha[unit], period, cnt_t, gamma,
                         opts.separation_bound, opts.step_clip)
        resid = max(np.abs(ga / cnt_i).max(), np.abs(gt / cnt_t).max())
        if resid <= opts.tol_grad:
            return resid
    raise ConvergenceError(
        f"inner effect updates stalled at normalized score {resid:g} "
        f"after {opts.max_inner} sweeps"
    )


def _normalize(alpha, gamma, idx):
    """Impose sum_t |D_t| gamma_t = 0 exactly; shift the level into alpha."""
    m = np.sum(idx.period_counts * gamma) / idx.n
    gamma -= m
    alpha += m
    return alpha, gamma


def _solve_direction(h_sum, score_sum):
    try:
        cho = scipy.linalg.cho_factor(h_sum)
        return scipy.linalg.cho_solve(cho, score_sum)
    except scipy.linalg.LinAlgError:
        raise SingularHessianError(
            "partialled-out Hessian is singular; a covariate is collinear with "
            "the unit/period dummies (run validate)"
        ) from None


def fit(data: PanelData, family: Family | str, opts: SolveOptions | None = None,
        start=None, trace: list | None = None,
        proj_start: dict | None = None) -> FitResult:
    """Compute the two-way fixed-effects MLE.

    ``start`` optionally provides (beta, alpha, gamma) warm starts and
    ``proj_start`` a projection-state dict, both used for subpanel refits;
    ``trace``, when a list, collects the profile log-likelihood after each
    outer iteration. Raises ConvergenceError / SeparationError /
    SingularHessianError on failure.
    """
    if isinstance(family, str):
        family = get_family(family)
    opts = opts or SolveOptions()
    family.check_outcome(data.y)
    idx = build_index(data)
    check_connected(data.unit, data.period, idx.n_units, idx.n_periods)

    fit_family = family
    if isinstance(family, LinearFamily):
        # exact within-OLS path: project once, solve once
        return _fit_linear(data, family, idx, opts, start, trace, proj_start)
    _check_degenerate_groups(data, fit_family, idx)

    y, x, unit, period = data.y, data.x, data.unit, data.period
    if start is not None:
        beta = np.array(start[0], dtype=float)
        alpha = np.array(start[1], dtype=float)
        gamma = np.array(start[2], dtype=float)
    else:
        beta = np.zeros(data.n_covariates)
        alpha, gamma = _start_values(data, fit_family, idx)

    proj_state: dict = proj_start if proj_start is not None else {}
    xb = x @ beta
    try:
        _inner_solve(fit_family, y, xb, unit, period, alpha, gamma, idx, opts)
    except _InnerDiverged as err:
        raise SeparationError(f"fitted index diverging from the start: {err}") from err
    u = xb + alpha[unit] + gamma[period]
    loglik = float(np.sum(fit_family.loglik(y, u)))

    converged = False
    iterations = 0
    final_wxt = None
    for outer in range(opts.max_outer):
        iterations = outer + 1
        if trace is not None:
            trace.append(loglik)
        g1 = fit_family.score(y, u)
        w = fit_family.weight(u)
        xt = two_way_project(x, w, unit, period, idx.n_units, idx.n_periods,
                             tol=opts.tol_proj, max_sweeps=opts.max_inner,
                             check_connectivity=False, state=proj_state)
        score_sum = xt.T @ g1
        if np.abs(score_sum).max() / idx.n <= opts.tol_grad:
            converged = True
            final_wxt = (w, xt)
            break
        h_sum = (w[:, None] * xt).T @ xt
        # a covariate inside the dummy span projects to ~0: H is then singular
        # at the level of the projection tolerance, not of cho_factor
        raw_scale = np.einsum("n,nk,nk->k", w, x, x)
        tiny = np.diag(h_sum) <= 1e-10 * np.maximum(raw_scale, 1e-300)
        if np.any(tiny):
            names = [data.covariate_names[k] for k in np.flatnonzero(tiny)]
            raise SingularHessianError(
                f"covariate(s) {names} are collinear with the unit/period dummies")
        direction = _solve_direction(h_sum, score_sum)

        step = 1.0
        accepted = False
        for _ in range(MAX_HALVINGS):
            beta_try = beta + step * direction
            # first-order response of the profiled effects to the beta move
            # (d alpha / d beta = kappa, d gamma / d beta = rho)
            alpha_try = alpha + proj_state["kappa"] @ (step * direction)
            gamma_try = gamma + proj_state["rho"] @ (step * direction)
            xb_try = x @ beta_try
            try:
                _inner_solve(fit_family, y, xb_try, unit, period,
                             alpha_try, gamma_try, idx, opts)
            except _InnerDiverged:
                step *= 0.5  # wild trial point; treat as a rejected step
                continue
            u_try = xb_try + alpha_try[unit] + gamma_try[period]
            loglik_try = float(np.sum(fit_family.loglik(y, u_try)))
            if loglik_try >= loglik - 1e-12 * max(1.0, abs(loglik)):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            raise ConvergenceError("profile-likelihood line search failed to ascend")
        beta, alpha, gamma = beta_try, alpha_try, gamma_try
        xb, u, loglik = xb_try, u_try, loglik_try
        if (fit_family.is_binary or fit_family.name == "poisson") \
                and np.abs(u).max() > opts.separation_bound:
            raise SeparationError(
                f"fitted index beyond |{opts.separation_bound}| (max "
                f"{np.abs(u).max():.1f}); the outcome is quasi-separated by "
                f"the covariates")
    else:
        raise ConvergenceError(
            f"no convergence after {opts.max_outer} outer iterations "
            f"(normalized score {np.abs(score_sum).max() / idx.n:g})"
        )

    _normalize(alpha, gamma, idx)
    # the gamma/alpha shift leaves u and the projection unchanged, so the
    # converged iteration's weights/projection carry over to assembly
    return _assemble(data, family, fit_family, idx, beta, alpha, gamma, opts,
                     proj_state, iterations, converged, precomputed=final_wxt)


def _fit_linear(data: PanelData, family: LinearFamily, idx, opts,
                start, trace, proj_start) -> FitResult:
    """Weighted-dummy maximum likelihood for the Gaussian family reduces to
    within-OLS on the two-way projected variables."""
    y, x, unit, period = data.y, data.x, data.unit, data.period
    d = data.n_covariates
    ones = np.ones(idx.n)
    proj_state: dict = proj_start if proj_start is not None else {}
    stacked = two_way_project(np.column_stack([x, y]), ones, unit, period,
                              idx.n_units, idx.n_periods,
                              tol=opts.tol_proj, max_sweeps=max(opts.max_inner, 2000),
                              check_connectivity=False, state=proj_state)
    xt, yt = stacked[:, :d], stacked[:, d]
    h_sum = xt.T @ xt
    raw_scale = np.einsum("nk,nk->k", x, x)
    tiny = np.diag(h_sum) <= 1e-10 * np.maximum(raw_scale, 1e-300)
    if np.any(tiny):
        names = [data.covariate_names[k] for k in np.flatnonzero(tiny)]
        raise SingularHessianError(
            f"covariate(s) {names} are collinear with the unit/period dummies")
    beta = _solve_direction(h_sum, xt.T @ yt)
    fit_family = LinearFamily(1.0)
    if start is not None:
        alpha = np.array(start[1], dtype=float)
        gamma = np.array(start[2], dtype=float)
        if proj_start is not None:  # first-order effect response to the beta move
            delta = beta - np.asarray(start[0], dtype=float)
            alpha += proj_state["kappa"][:, :d] @ delta
            gamma += proj_state["rho"][:, :d] @ delta
    else:
        alpha, gamma = _start_values(data, fit_family, idx)
    xb = x @ beta
    _inner_solve(fit_family, y, xb, unit, period, alpha, gamma, idx, opts)
    _normalize(alpha, gamma, idx)
    if trace is not None:
        u = xb + alpha[unit] + gamma[period]
        trace.append(float(np.sum(fit_family.loglik(y, u))))
    return _assemble(data, family, fit_family, idx, beta, alpha, gamma, opts,
                     proj_state, 1, True, precomputed=(None, xt))


def profile(data: PanelData, family: Family | str, beta,
            opts: SolveOptions | None = None, start=None) -> FitResult:
    """Re-profile the unit/period effects at a fixed beta.

    Used by iterated analytical corrections and the profile-score solver.
    """
    if isinstance(family, str):
        family = get_family(family)
    opts = opts or SolveOptions()
    idx = build_index(data)
    fit_family = LinearFamily(1.0) if isinstance(family, LinearFamily) else family
    _check_degenerate_groups(data, fit_family, idx)
    beta = np.asarray(beta, dtype=float)
    if start is not None:
        alpha = np.array(start[0], dtype=float)
        gamma = np.array(start[1], dtype=float)
    else:
        alpha, gamma = _start_values(data, fit_family, idx)
    xb = data.x @ beta
    try:
        _inner_solve(fit_family, data.y, xb, data.unit, data.period,
                     alpha, gamma, idx, opts)
    except _InnerDiverged as err:
        raise SeparationError(f"fitted index diverging at beta: {err}") from err
    _normalize(alpha, gamma, idx)
    return _assemble(data, family, fit_family, idx, beta, alpha, gamma, opts,
                     {}, 0, True)


def evaluate_at(data: PanelData, family: Family | str, beta, alpha, gamma,
                opts: SolveOptions | None = None) -> FitResult:
    """Assemble the plug-in ingredients (index, weights, projection, Hessian)
    at an arbitrary parameter point, without optimizing anything."""
    if isinstance(family, str):
        family = get_family(family)
    opts = opts or SolveOptions()
    idx = build_index(data)
    return _assemble(data, family, family, idx,
                     np.asarray(beta, dtype=float),
                     np.asarray(alpha, dtype=float),
                     np.asarray(gamma, dtype=float),
                     opts, {}, 0, False)


def _assemble(data, family, fit_family, idx, beta, alpha, gamma, opts,
              proj_state, iterations, converged, precomputed=None) -> FitResult:
    u = data.x @ beta + alpha[data.unit] + gamma[data.period]
    sigma2 = None
    out_family = family
    if isinstance(family, LinearFamily):
        resid = data.y - u
        sigma2 = float(np.mean(resid ** 2))
        out_family = family.with_sigma2(sigma2)
    if precomputed is not None and not isinstance(family, LinearFamily):
        w, xt = precomputed
    elif precomputed is not None:
        # the projection is invariant to the constant 1/sigma2 weight rescale
        w = out_family.weight(u)
        xt = precomputed[1]
    else:
        w = out_family.weight(u)
        xt = two_way_project(data.x, w, data.unit, data.period,
                             idx.n_units, idx.n_periods,
                             tol=opts.tol_proj, max_sweeps=opts.max_inner,
                             check_connectivity=False, state=proj_state)
    hessian = (w[:, None] * xt).T @ xt / idx.n
    loglik = float(np.sum(out_family.loglik(data.y, u)))
    return FitResult(
        beta=beta, alpha=alpha, gamma=gamma, u_hat=u, omega=w, xtilde=xt,
        hessian=hessian, loglik=loglik, iterations=iterations,
        converged=converged, family=out_family, n_obs=idx.n, sigma2=sigma2,
        proj_state=proj_state,
    )


def vcov_beta(fit_result: FitResult) -> np.ndarray:
    """Asymptotic variance of beta-hat: hessian^{-1} / n."""
    try:
        cho = scipy.linalg.cho_factor(fit_result.hessian)
    except scipy.linalg.LinAlgError:
        raise SingularHessianError("hessian not positive definite") from None
    d = fit_result.beta.shape[0]
    return scipy.linalg.cho_solve(cho, np.eye(d)) / fit_result.n_obs


class PanelFixedEffects(BaseEstimator):
    """sklearn-style front end for the two-way fixed-effects MLE.

    Parameters mirror :class:`SolveOptions`; ``family`` may be a name
    (``linear``, ``probit``, ``logit``, ``poisson``) or a Family instance.

    Attributes (after ``fit``)
    --------------------------
    coef_ : (d,) index coefficients
    alpha_, gamma_ : unit and period effects (gamma count-weighted to zero)
    result_ : the full :class:`FitResult`
    """

    def __init__(self, family="linear", tol_grad: float = 1e-9,
                 tol_proj: float = 1e-10, max_outer: int = 100,
                 max_inner: int = 500, separation_bound: float = 30.0):
        self.family = family
        self.tol_grad = tol_grad
        self.tol_proj = tol_proj
        self.max_outer = max_outer
        self.max_inner = max_inner
        self.separation_bound = separation_bound

    def _options(self) -> SolveOptions:
        return SolveOptions(tol_grad=self.tol_grad, tol_proj=self.tol_proj,
                            max_outer=self.max_outer, max_inner=self.max_inner,
                            separation_bound=self.separation_bound)

    def fit(self, data: PanelData, start=None):
        self.result_ = fit(data, self.family, self._options(), start=start)
        self.coef_ = self.result_.beta
        self.alpha_ = self.result_.alpha
        self.gamma_ = self.result_.gamma
        self.loglik_ = self.result_.loglik
        self.n_iter_ = self.result_.iterations
        self.converged_ = self.result_.converged
        return self

    def vcov(self) -> np.ndarray:
        return vcov_beta(self.result_)

    def predict_index(self, data: PanelData) -> np.ndarray:
        """Fitted index x'beta + alpha_i + gamma_t on the training panel's ids."""
        r = self.result_
        return data.x @ r.beta + r.alpha[data.unit] + r.gamma[data.period]

    def predict(self, data: PanelData) -> np.ndarray:
        """Fitted conditional mean."""
        return self.result_.family.mean(self.predict_index(data))
