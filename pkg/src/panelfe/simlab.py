"""Monte Carlo lab: DGP builders, replication harness, and exact oracles.

Replications use per-replication random substreams derived from
``(seed, rep)``, so a report is a pure function of the design and seed and
does not depend on the worker count.  Failed replications (non-convergence,
separation) are recorded and dropped, fatal only above a 20% failure rate.

The normal-variance oracle section carries the closed-form bias/variance of
the five sample-variance estimators (MLE, analytical, iterated analytical,
leave-one-out jackknife, split-sample jackknife) together with a fully
vectorized Monte Carlo that implements the actual resampling recipes; it is
the end-to-end check that the jackknife arithmetic is coded correctly.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.stats import norm

from .bias import abc, hbc, jbc, psbc, sbc
from .data import clean, derive_lags, make_panel
from .effects import EffectSpec, ape, corrected_ape
from .errors import ConvergenceError, InputError, PanelFEError
from .estimator import SolveOptions, fit, vcov_beta
from .families import get_family

Z95 = norm.ppf(0.975)


# ---------------------------------------------------------------------------
# closed-form oracles


def coverage_theory(shift: float, level: float = 0.95) -> float:
    """Asymptotic coverage of a nominal ``level`` interval under a
    standardized bias ``shift`` = kappa B_k / sqrt(Omega_kk)."""
    if not 0.0 < level < 1.0:
        raise InputError("level must lie in (0, 1)")
    z = norm.ppf((1.0 + level) / 2.0)
    return float(norm.cdf(z - shift) - norm.cdf(-z - shift))


def normal_variance_oracle(n: int, sigma2: float, estimator: str, k: int = 2):
    """Exact (bias, variance) of a sample-variance estimator in N(mu, sigma2).

    ``estimator`` is one of ``mle``, ``abc``, ``abck`` (k-times iterated
    analytical), ``jbc``, ``sbc``.  ``n`` must be at least 4 and even for
    the split-sample estimator.
    """
    if n < 4:
        raise InputError("n must be >= 4")
    var_mle = 2.0 * sigma2 ** 2 * (n - 1) / n ** 2
    est = estimator.lower()
    if est == "mle":
        return -sigma2 / n, var_mle
    if est == "abc":
        return -sigma2 / n ** 2, (n + 1) ** 2 * var_mle / n ** 2
    if est == "abck":
        scale = sum(n ** (-r) for r in range(k + 1))
        return -sigma2 / n ** (k + 1), scale ** 2 * var_mle
    if est == "jbc":
        return 0.0, n ** 2 * var_mle / (n - 1) ** 2
    if est == "sbc":
        if n % 2:
            raise InputError("split-sample estimator needs even n")
        # exact: Var(m2 - zbar1 zbar2) = 2 s^4 / n + 4 s^4 / n^2; the common
        # (n+2)/n shorthand uses the known-mean variance 2 s^4 / n as base
        return 0.0, 2.0 * sigma2 ** 2 * (n + 2) / n ** 2
    raise InputError(f"unknown estimator {estimator!r}")


def _variance_recipes(z: np.ndarray, k: int) -> dict[str, np.ndarray]:
    """Per-draw estimates for an (m, n) block, via the actual recipes."""
    m, n = z.shape
    s = z.sum(axis=1)
    q = (z ** 2).sum(axis=1)
    mle = q / n - (s / n) ** 2
    # analytical: subtract the plug-in bias estimate -sigma2/n, iterated k times
    abc_hat = mle + mle / n
    abck_hat = mle.copy()
    for _ in range(k):
        abck_hat = mle + abck_hat / n
    # leave-one-out: sigma2_(-j) from the sum downdates
    q_loo = (q[:, None] - z ** 2) / (n - 1)
    m_loo = (s[:, None] - z) / (n - 1)
    loo_mean = (q_loo - m_loo ** 2).mean(axis=1)
    jbc_hat = n * mle - (n - 1) * loo_mean
    # split halves
    h = n // 2
    z1, z2 = z[:, :h], z[:, h:]
    v1 = (z1 ** 2).mean(axis=1) - z1.mean(axis=1) ** 2
    v2 = (z2 ** 2).mean(axis=1) - z2.mean(axis=1) ** 2
    sbc_hat = 2 * mle - 0.5 * (v1 + v2)
    return {
        "mle": mle, "abc": abc_hat, "abck": abck_hat,
        "jbc": jbc_hat, "sbc": sbc_hat,
        "jbc_closed": n * mle / (n - 1),
    }


def normal_variance_suite(n: int, sigma2: float, reps: int, seed: int,
                          k: int = 2, chunk: int = 100_000) -> dict:
    """Empirical (bias, variance) of all five estimators on common draws.

    Also reports ``jbc_identity_max_err``, the largest per-draw difference
    between the leave-one-out recipe and its closed form n/(n-1) * mle.
    """
    if n < 4 or n % 2:
        raise InputError("need even n >= 4")
    rng = np.random.default_rng(seed)
    names = ("mle", "abc", "abck", "jbc", "sbc")
    sums = {name: 0.0 for name in names}
    sq = {name: 0.0 for name in names}
    ident = 0.0
    done = 0
    while done < reps:
        m = min(chunk, reps - done)
        z = np.sqrt(sigma2) * rng.standard_normal((m, n))
        est = _variance_recipes(z, k)
        for name in names:
            sums[name] += est[name].sum()
            sq[name] += (est[name] ** 2).sum()
        ident = max(ident, np.abs(est["jbc"] - est["jbc_closed"]).max())
        done += m
    out: dict = {"jbc_identity_max_err": float(ident), "reps": reps, "k": k}
    for name in names:
        mean = sums[name] / reps
        var = sq[name] / reps - mean ** 2
        var *= reps / (reps - 1)
        out[name] = {"bias": float(mean - sigma2), "variance": float(var)}
    return out


def normal_variance_mc(n: int, sigma2: float, estimator: str, reps: int,
                       seed: int, k: int = 2):
    """Empirical (bias, variance) of one estimator (shared-draw suite entry)."""
    suite = normal_variance_suite(n, sigma2, reps, seed, k=k)
    est = estimator.lower()
    if est not in suite:
        raise InputError(f"unknown estimator {estimator!r}")
    return suite[est]["bias"], suite[est]["variance"]


# ---------------------------------------------------------------------------
# designs


@dataclass(frozen=True, eq=False)
class McDesign:
    """A fully seeded Monte Carlo experiment description."""

    generator: str
    family: str
    n_units: int
    n_periods: int
    beta0: tuple
    replications: int
    seed: int
    estimators: tuple = ("fe",)
    params: dict = field(default_factory=dict)
    ape_covariate: Optional[int] = None
    ape_mode: str = "discrete"

    def to_dict(self) -> dict:
        return {
            "generator": self.generator, "family": self.family,
            "N": self.n_units, "T": self.n_periods,
            "beta0": list(self.beta0), "replications": self.replications,
            "seed": self.seed, "estimators": list(self.estimators),
            "params": dict(self.params),
        }


def _ar1_latent(rng, n_units, n_periods, rho, level, burn=25):
    """Stationary AR(1) per unit around a unit-specific level (both (N,))."""
    level = np.asarray(level, dtype=float).reshape(n_units)
    z = np.zeros((n_units, n_periods + burn))
    eps = rng.standard_normal((n_units, n_periods + burn))
    innov = np.sqrt(max(1.0 - rho ** 2, 1e-12))
    z[:, 0] = level + eps[:, 0]
    for s in range(1, n_periods + burn):
        z[:, s] = level * (1 - rho) + rho * z[:, s - 1] + innov * eps[:, s]
    return z[:, burn:]


def _gen_calibrated_logit(design: McDesign, rng):
    """Synthetic stand-in for the survey-calibrated binary design.

    Unit and period effects are iid normal; the covariates are one
    persistent binary process and continuous AR(1) processes, all shifted
    by the unit effect so they correlate with the heterogeneity.
    """
    p = design.params
    N, T = design.n_units, design.n_periods
    d = len(design.beta0)
    sig_a = p.get("sigma_alpha", 0.4)
    sig_g = p.get("sigma_gamma", 0.2)
    rho_x = p.get("rho_x", 0.6)
    corr = p.get("corr_alpha", 0.35)
    x_scale = p.get("x_scale", 0.6)
    alpha0 = sig_a * rng.standard_normal(N)
    gamma0 = sig_g * rng.standard_normal(T)
    gamma0 -= gamma0.mean()
    cols = []
    kinds = []
    latent = _ar1_latent(rng, N, T, rho_x, corr * alpha0 / sig_a)
    cols.append((latent > 0).astype(float))
    kinds.append("binary")
    for _ in range(d - 1):
        cols.append(x_scale * _ar1_latent(rng, N, T, rho_x, corr * alpha0))
        kinds.append("continuous")
    beta0 = np.asarray(design.beta0, dtype=float)
    x = np.stack([c.ravel() for c in cols], axis=1)
    iobs = np.repeat(np.arange(N), T)
    tobs = np.tile(np.arange(T), N)
    u = x @ beta0 + alpha0[iobs] + gamma0[tobs]
    fam = get_family(design.family)
    y = fam.sample(u, rng)
    names = tuple(f"x{j + 1}" for j in range(d))
    data = make_panel(iobs, tobs, y, x, names, tuple(kinds))
    return data, beta0


def _gen_iid_exog(design: McDesign, rng):
    """Strictly exogenous iid-normal covariates with optional alpha shift."""
    p = design.params
    N, T = design.n_units, design.n_periods
    d = len(design.beta0)
    sig_a = p.get("sigma_alpha", 0.5)
    sig_g = p.get("sigma_gamma", 0.25)
    corr = p.get("corr_alpha", 0.3)
    alpha0 = sig_a * rng.standard_normal(N)
    gamma0 = sig_g * rng.standard_normal(T)
    gamma0 -= gamma0.mean()
    iobs = np.repeat(np.arange(N), T)
    tobs = np.tile(np.arange(T), N)
    x = rng.standard_normal((N * T, d)) + corr * alpha0[iobs][:, None]
    beta0 = np.asarray(design.beta0, dtype=float)
    u = x @ beta0 + alpha0[iobs] + gamma0[tobs]
    fam = get_family(design.family)
    y = fam.sample(u, rng)
    names = tuple(f"x{j + 1}" for j in range(d))
    data = make_panel(iobs, tobs, y, x, names, ("continuous",) * d)
    return data, beta0


def _gen_ar1_linear(design: McDesign, rng):
    """Dynamic linear panel y_it = rho y_{i,t-1} + alpha_i + gamma_t + eps."""
    p = design.params
    N, T = design.n_units, design.n_periods
    rho = float(design.beta0[0])
    sig_a = p.get("sigma_alpha", 0.5)
    sig_g = p.get("sigma_gamma", 0.25)
    burn = p.get("burn", 30)
    alpha0 = sig_a * rng.standard_normal(N)
    gamma0 = sig_g * rng.standard_normal(T + 1)
    gamma0 -= gamma0.mean()
    total = T + 1 + burn
    y = np.zeros((N, total))
    eps = rng.standard_normal((N, total))
    y[:, 0] = (alpha0 + eps[:, 0]) / (1 - rho)
    for s in range(1, total):
        g = gamma0[s - burn] if s >= burn else 0.0
        y[:, s] = rho * y[:, s - 1] + alpha0 + g + eps[:, s]
    keep = y[:, burn:]                       # T+1 periods; lag eats the first
    iobs = np.repeat(np.arange(N), T + 1)
    tobs = np.tile(np.arange(T + 1), N)
    base = make_panel(iobs, tobs, keep.ravel(),
                      np.empty((N * (T + 1), 0)), (), ())
    data = derive_lags(base, "y", k=1, name="y_lag1")
    return data, np.array([rho])


_GENERATORS: dict[str, Callable] = {
    "calibrated_logit": _gen_calibrated_logit,
    "iid_exog": _gen_iid_exog,
    "ar1_linear": _gen_ar1_linear,
}


def calibrated_logit_design(n_units: int = 664, n_periods: int = 9,
                            d_beta: int = 3, seed: int = 0,
                            replications: int = 100,
                            estimators=("fe", "abc"), **params) -> McDesign:
    """Table-1-shaped synthetic logit experiment (survey data not shipped)."""
    return McDesign(
        generator="calibrated_logit", family="logit",
        n_units=n_units, n_periods=n_periods,
        beta0=tuple(params.pop("beta0", (1.0,) * d_beta)),
        replications=replications, seed=seed,
        estimators=tuple(estimators), params=params,
    )


# ---------------------------------------------------------------------------
# replication loop


@dataclass(frozen=True)
class SimReport:
    """Per-estimator, per-coefficient bias/SD/RMSE (% of truth) and coverage."""

    design: McDesign
    beta0: np.ndarray
    reps_completed: int
    failures: dict
    table: dict
    ape_table: Optional[dict] = None

    def to_dict(self) -> dict:
        out = {
            "design": self.design.to_dict(),
            "beta0": list(map(float, self.beta0)),
            "reps_completed": self.reps_completed,
            "failures": dict(self.failures),
            "table": {
                est: {stat: list(map(float, vals)) for stat, vals in stats.items()}
                for est, stats in self.table.items()
            },
        }
        if self.ape_table is not None:
            out["ape"] = {est: {k: float(v) for k, v in stats.items()}
                          for est, stats in self.ape_table.items()}
        return out

    def to_text(self) -> str:
        names = [f"beta{j + 1}" for j in range(len(self.beta0))]
        stats_header = "".join(f"{h:>9s}" for h in ("Bias", "SD", "RMSE", "p; 95"))
        ests = list(self.table)
        lines = []
        for a in range(0, len(ests), 2):
            block = ests[a:a + 2]
            lines.append(f"{'':10s}" + "   ".join(f"{e.upper():^36s}" for e in block))
            lines.append(f"{'':10s}" + "   ".join(stats_header for _ in block))
            for j, nm in enumerate(names):
                cells = []
                for e in block:
                    st = self.table[e]
                    cells.append(f"{st['bias_pct'][j]:9.1f}{st['sd_pct'][j]:9.1f}"
                                 f"{st['rmse_pct'][j]:9.1f}{st['coverage'][j]:9.2f}")
                lines.append(f"{nm:10s}" + "   ".join(cells))
            lines.append("")
        lines.append(f"replications: {self.reps_completed}"
                     f" (failures: {sum(self.failures.values())})")
        lines.append("bias, SD and RMSE in percent of the true value")
        return "\n".join(lines)


def _estimator_record(name, data, family, full, options, params, rng_seed):
    if name == "fe":
        return full.beta, np.sqrt(np.diag(vcov_beta(full)))
    if name.startswith("abc_m"):  # trim sensitivity variants: abc_m1 ... abc_m4
        ce = abc(data, family, M=int(name[5:]),
                 iterations=params.get("iterations", 1), opts=options,
                 lag_average=params.get("lag_average", "per_period"),
                 fit_result=full)
    elif name == "abc":
        ce = abc(data, family, M=params.get("trim", 0),
                 iterations=params.get("iterations", 1), opts=options,
                 lag_average=params.get("lag_average", "per_period"),
                 fit_result=full)
    elif name == "jbc":
        ce = jbc(data, family, opts=options, fit_result=full,
                 drop_degenerate=True)
    elif name == "sbc":
        ce = sbc(data, family, num_unit_splits=params.get("splits", 50),
                 seed=rng_seed, opts=options, fit_result=full,
                 drop_degenerate=True)
    elif name == "hbc":
        ce = hbc(data, family, opts=options, fit_result=full,
                 drop_degenerate=True)
    elif name == "psbc":
        ce = psbc(data, family, M=params.get("trim", 0), opts=options,
                  lag_average=params.get("lag_average", "per_period"),
                  fit_result=full)
    else:
        raise InputError(f"unknown estimator {name!r}")
    return ce.beta, ce.se()


def _run_replication(design: McDesign, rep: int) -> dict:
    rng = np.random.default_rng([design.seed, rep])
    family = get_family(design.family)
    options = SolveOptions(**design.params.get("solve_options", {}))
    out: dict = {"estimates": {}, "failures": {}, "ok": True}
    try:
        data, beta0 = _GENERATORS[design.generator](design, rng)
        data = clean(data, family, min_obs=design.params.get("min_obs", 2))
        full = fit(data, family, options)
    except PanelFEError as err:
        out["ok"] = False
        out["failures"]["fit"] = str(err)
        return out
    sbc_seed = int(np.random.default_rng([design.seed, rep, 7919]).integers(2 ** 31))
    for name in design.estimators:
        try:
            beta, se = _estimator_record(name, data, family, full, options,
                                         design.params, sbc_seed)
            out["estimates"][name] = (beta, se)
        except PanelFEError as err:
            out["failures"][name] = str(err)
    if design.ape_covariate is not None:
        spec = EffectSpec(design.ape_covariate, design.ape_mode)
        out["ape"] = {}
        for name in design.estimators:
            try:
                if name == "fe":
                    res = ape(full, data, spec, target="nt")
                elif name in ("jbc", "sbc", "hbc"):
                    res = corrected_ape(data, family, spec, target="nt",
                                        method=name,
                                        num_unit_splits=design.params.get("splits", 50),
                                        seed=sbc_seed, opts=options, fit_result=full,
                                        drop_degenerate=True)
                else:
                    continue
                out["ape"][name] = (res.estimate, res.se)
            except PanelFEError as err:
                out["failures"][f"ape_{name}"] = str(err)
    return out


def run_mc(design: McDesign, workers: int = 1) -> SimReport:
    """Run the experiment; deterministic given (design, seed) for any worker count."""
    reps = design.replications
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_replication, [design] * reps, range(reps),
                                    chunksize=max(1, reps // (8 * workers))))
    else:
        records = [_run_replication(design, rep) for rep in range(reps)]

    beta0 = np.asarray(design.beta0, dtype=float)
    failures: dict = {}
    for rec in records:
        for key, msg in rec["failures"].items():
            failures[key] = failures.get(key, 0) + 1
    ok = [rec for rec in records if rec["ok"]]
    n_failed = reps - len(ok)
    if n_failed > 0.2 * reps:
        raise ConvergenceError(
            f"{n_failed}/{reps} replications failed; check the design")

    table = {}
    for name in design.estimators:
        betas = np.array([r["estimates"][name][0] for r in ok
                          if name in r["estimates"]])
        ses = np.array([r["estimates"][name][1] for r in ok
                        if name in r["estimates"]])
        if betas.size == 0:
            continue
        err = betas - beta0
        bias_pct = 100.0 * err.mean(axis=0) / np.abs(beta0)
        if betas.shape[0] > 1:
            sd_pct = 100.0 * betas.std(axis=0, ddof=1) / np.abs(beta0)
        else:
            sd_pct = np.full(len(beta0), np.nan)
        rmse_pct = np.sqrt(bias_pct ** 2 + sd_pct ** 2)
        cover = (np.abs(err) <= Z95 * ses).mean(axis=0)
        table[name] = {"bias_pct": bias_pct, "sd_pct": sd_pct,
                       "rmse_pct": rmse_pct, "coverage": cover,
                       "reps": np.full(len(beta0), len(betas))}

    ape_table = None
    if design.ape_covariate is not None:
        ape_table = {}
        for name in design.estimators:
            vals = np.array([r["ape"][name][0] for r in ok
                             if "ape" in r and name in r["ape"]])
            if vals.size:
                ape_table[name] = {"mean": vals.mean(), "sd": vals.std(ddof=1)}

    return SimReport(design=design, beta0=beta0, reps_completed=len(ok),
                     failures=failures, table=table, ape_table=ape_table)
