"""Acceptance suite: one test per criterion, printing a PASS/FAIL line each.

Every tolerance is pinned here.  The heavy Monte Carlo experiments run once
per module through session-scoped fixtures and are shared by the per-method
assertions, so a single failing combination shows up red on its own line.
"""

import time

import numpy as np
import pytest
from scipy.stats import norm

import panelfe as pf
from conftest import dense_dummy_fit, dense_weighted_projection, make_random_panel

WORKERS = 2


def _line(criterion, ok, detail):
    print(f"[criterion {criterion}] {'PASS' if ok else 'FAIL'}: {detail}")
    return ok


# =============================================================================
# 1. normal-variance suite (closed-form oracles vs actual resampling recipes)
# =============================================================================

C1_N = 100
C1_SIGMA2 = 1.0
C1_REPS = 10 ** 6


@pytest.fixture(scope="module")
def suite():
    t0 = time.time()
    out = pf.normal_variance_suite(C1_N, C1_SIGMA2, C1_REPS, seed=2024, k=2)
    out["elapsed"] = time.time() - t0
    return out


class TestCriterion1:
    N = C1_N
    SIGMA2 = C1_SIGMA2
    REPS = C1_REPS

    @pytest.mark.parametrize("estimator", ["mle", "abc", "abck", "jbc", "sbc"])
    def test_moments_match_oracle(self, suite, estimator):
        bias_o, var_o = pf.normal_variance_oracle(self.N, self.SIGMA2, estimator,
                                                  k=suite["k"])
        bias_se = np.sqrt(var_o / self.REPS)
        var_se = var_o * np.sqrt(2.0 / (self.REPS - 1))
        emp = suite[estimator]
        ok_b = abs(emp["bias"] - bias_o) < 4 * bias_se
        ok_v = abs(emp["variance"] - var_o) < 4 * var_se
        assert _line("1", ok_b and ok_v,
                     f"{estimator}: bias {emp['bias']:+.2e} vs {bias_o:+.2e} "
                     f"(se {bias_se:.1e}), var {emp['variance']:.6f} vs {var_o:.6f} "
                     f"(se {var_se:.1e})")

    def test_orderings_and_identity(self, suite):
        # variance ordering: the four scalar multiples of the same draws are
        # deterministically ordered; SBC is resolved statistically
        v = {k: suite[k]["variance"] for k in ("mle", "abc", "abck", "jbc", "sbc")}
        ok_var = v["mle"] < v["abc"] < v["abck"] < v["jbc"] < v["sbc"]
        # |bias| ordering: resolve strictly where the oracle separation
        # exceeds 4 MC standard errors, otherwise confirm indistinguishable
        b = {k: suite[k]["bias"] for k in ("mle", "abc", "abck", "jbc", "sbc")}
        se = np.sqrt(v["mle"] / self.REPS)
        ok_bias = abs(b["mle"]) > abs(b["abc"]) + 4 * se     # 1e-2 vs 1e-4
        ok_bias &= abs(b["abc"]) < abs(b["mle"]) * 0.5
        ok_tiny = all(abs(b[k]) < 4 * se for k in ("abck", "jbc", "sbc"))
        ok_ident = suite["jbc_identity_max_err"] < 1e-12
        ok_rt = suite["elapsed"] < 60.0
        assert _line("1", ok_var and ok_bias and ok_tiny and ok_ident and ok_rt,
                     f"var order {ok_var}, |bias| order {ok_bias}, "
                     f"zero-bias trio within noise {ok_tiny}, "
                     f"jbc per-draw identity {suite['jbc_identity_max_err']:.1e}, "
                     f"runtime {suite['elapsed']:.1f}s")


# =============================================================================
# 2. coverage formula
# =============================================================================

def test_criterion2_coverage_formula():
    value = pf.coverage_theory(1.0, 0.95)
    ok = abs(value - 0.8300) <= 1e-4
    assert _line("2", ok, f"coverage_theory(1, 0.95) = {value:.5f} (target 0.8300 +- 1e-4)")


# =============================================================================
# 3. Table-1-shape synthetic logit experiment
# =============================================================================

@pytest.fixture(scope="module")
def table1():
    design = pf.calibrated_logit_design(
        n_units=664, n_periods=9, d_beta=3, seed=20240819, replications=100,
        estimators=("fe", "abc", "sbc", "hbc"), splits=10)
    t0 = time.time()
    report = pf.run_mc(design, workers=WORKERS)
    elapsed = time.time() - t0
    print(f"[criterion 3] experiment: {report.reps_completed} reps, "
          f"failures {report.failures}, {elapsed:.0f}s")
    print(report.to_text())
    return report, elapsed


class TestCriterion3:
    def test_fe_bias_positive(self, table1):
        report, _ = table1
        bias = report.table["fe"]["bias_pct"]
        ok = bool(np.all(bias >= 5.0))
        assert _line("3a", ok, f"FE bias% {np.round(bias, 1)} all >= 5")

    def test_abc_removes_bias(self, table1):
        report, _ = table1
        fe = report.table["fe"]["bias_pct"]
        ab = report.table["abc"]["bias_pct"]
        ratio = np.abs(ab) / np.abs(fe)
        ok = bool(np.all(ratio <= 0.25))
        assert _line("3b", ok, f"|ABC|/|FE| bias ratios {np.round(ratio, 3)} all <= 0.25")

    def test_coverage(self, table1):
        report, _ = table1
        fe_cov = report.table["fe"]["coverage"]
        abc_cov = report.table["abc"]["coverage"]
        ok = bool(np.all(fe_cov <= 0.80)) and bool(
            np.all((abc_cov >= 0.90) & (abc_cov <= 0.99)))
        assert _line("3c", ok, f"FE coverage {np.round(fe_cov, 2)} <= 0.80; "
                               f"ABC coverage {np.round(abc_cov, 2)} in [0.90, 0.99]")

    def test_jackknives_near_zero_with_more_spread(self, table1):
        report, _ = table1
        ok = True
        detail = []
        for method in ("sbc", "hbc"):
            bias = report.table[method]["bias_pct"]
            sd = report.table[method]["sd_pct"]
            abc_sd = report.table["abc"]["sd_pct"]
            ok &= bool(np.all(np.abs(bias) <= 5.0))
            ok &= bool(np.all(sd >= abc_sd))
            detail.append(f"{method} bias% {np.round(bias, 1)} sd% {np.round(sd, 1)}")
        detail.append(f"abc sd% {np.round(report.table['abc']['sd_pct'], 1)}")
        assert _line("3d", ok, "; ".join(detail))

    def test_runtime(self, table1):
        _, elapsed = table1
        assert _line("3", elapsed < 600, f"runtime {elapsed:.0f}s < 600s")


# =============================================================================
# 4. no-incidental-parameter nulls (linear and Poisson, strictly exogenous)
# =============================================================================

class TestCriterion4:
    @pytest.fixture(scope="class")
    @staticmethod
    def nulls():
        t0 = time.time()
        out = {}
        for fam in ("linear", "poisson"):
            design = pf.McDesign(
                "iid_exog", fam, 30, 30, (0.5,), 500, 71 + hash(fam) % 97,
                ("fe",), params={"sigma_alpha": 0.3, "sigma_gamma": 0.2})
            report = pf.run_mc(design, workers=WORKERS)
            # bias plug-ins measured on a fresh stream of fits
            bmax = dmax = 0.0
            for rep in range(25):
                rng = np.random.default_rng([design.seed, rep])
                from panelfe.simlab import _GENERATORS
                data, _ = _GENERATORS["iid_exog"](design, rng)
                data = pf.clean(data, pf.get_family(fam))
                full = pf.fit(data, fam)
                bmax = max(bmax, np.abs(pf.estimate_B(full, data, M=0)).max())
                dmax = max(dmax, np.abs(pf.estimate_D(full, data)).max())
            out[fam] = (report, bmax, dmax)
        out["elapsed"] = time.time() - t0
        return out

    @pytest.mark.parametrize("fam", ["linear", "poisson"])
    def test_fe_bias_statistically_zero(self, nulls, fam):
        report, _, _ = nulls[fam]
        bias = report.table["fe"]["bias_pct"][0]
        sd = report.table["fe"]["sd_pct"][0]
        mc_se = sd / np.sqrt(report.reps_completed)
        ok = abs(bias) < 3 * mc_se
        assert _line("4", ok, f"{fam}: FE bias {bias:+.3f}% vs 3 MC se {3*mc_se:.3f}%")

    def test_bias_plugins_null(self, nulls):
        _, bmax_lin, dmax_lin = nulls["linear"]
        _, bmax_poi, dmax_poi = nulls["poisson"]
        ok = bmax_lin == 0.0 and dmax_lin == 0.0
        ok &= bmax_poi < 1e-6 and dmax_poi < 1e-6
        ok &= nulls["elapsed"] < 300
        assert _line("4", ok,
                     f"linear B,D exactly 0: {bmax_lin == 0.0 and dmax_lin == 0.0}; "
                     f"poisson max|B| {bmax_poi:.1e}, max|D| {dmax_poi:.1e} < 1e-6; "
                     f"runtime {nulls['elapsed']:.0f}s < 300s")


# =============================================================================
# 5. Nickell-bias removal (linear AR(1))
# =============================================================================

@pytest.fixture(scope="module")
def nickell():
    design = pf.McDesign(
        "ar1_linear", "linear", 1000, 10, (0.5,), 300, 20240805,
        ("fe", "abc_m1", "abc_m2", "abc_m3", "abc_m4", "sbc", "hbc"),
        params={"sigma_alpha": 0.5, "sigma_gamma": 0.25, "splits": 10,
                "lag_average": "pairwise"})
    t0 = time.time()
    report = pf.run_mc(design, workers=WORKERS)
    elapsed = time.time() - t0
    fe_bias = report.table["fe"]["bias_pct"][0] / 100 * 0.5
    print(f"[criterion 5] experiment: {report.reps_completed} reps, {elapsed:.0f}s; "
          f"FE bias {fe_bias:+.4f}")
    for name, stats in report.table.items():
        b = stats["bias_pct"][0] / 100 * 0.5
        print(f"    {name:7s} bias {b:+.4f}  ratio-to-FE "
              f"{abs(b / fe_bias):.3f}" if name != "fe" else f"    fe      bias {b:+.4f}")
    return report, elapsed


class TestCriterion5:
    def test_fe_matches_oracle_order(self, nickell):
        report, _ = nickell
        bias = report.table["fe"]["bias_pct"][0] / 100 * 0.5
        # brute-force MC oracle: negative, of order (1+rho)/T = 0.15
        ok = -0.25 < bias < -0.08
        assert _line("5", ok, f"FE Nickell bias {bias:+.4f}, order -(1+rho)/T = -0.15")

    @pytest.mark.parametrize("method", ["abc_m1", "abc_m2", "abc_m3", "abc_m4",
                                        "sbc", "hbc"])
    def test_corrections_remove_bias(self, nickell, method):
        report, _ = nickell
        fe = report.table["fe"]["bias_pct"][0]
        corr = report.table[method]["bias_pct"][0]
        ratio = abs(corr / fe)
        assert _line("5", ratio < 0.30,
                     f"{method}: |corrected bias|/|FE bias| = {ratio:.3f} (< 0.30)")

    def test_runtime(self, nickell):
        _, elapsed = nickell
        assert _line("5", elapsed < 600, f"runtime {elapsed:.0f}s < 600s")


# =============================================================================
# 6. oracle equivalence on small random panels
# =============================================================================

def test_criterion6_oracle_equivalence():
    t0 = time.time()
    rng = np.random.default_rng(606)
    tight = pf.SolveOptions(tol_grad=1e-11, tol_proj=1e-12)
    worst_beta = 0.0
    n_checked = 0
    for family in ("linear", "probit", "logit", "poisson"):
        for k in range(50):
            data, _ = make_random_panel(rng, family, 6, 5, d=2,
                                        unbalanced=(k % 2 == 1))
            result = pf.fit(data, family, tight)
            beta_o, _ = dense_dummy_fit(data, family, tol=1e-13)
            worst_beta = max(worst_beta, np.abs(result.beta - beta_o).max())
            n_checked += 1
    worst_proj = 0.0
    for k in range(50):
        data, _ = make_random_panel(rng, "linear", 6, 6, d=2, unbalanced=(k % 2 == 0))
        idx = pf.build_index(data)
        w = rng.uniform(0.2, 3.0, data.n_obs)
        xt = pf.two_way_project(data.x, w, data.unit, data.period,
                                idx.n_units, idx.n_periods, tol=1e-13)
        oracle = dense_weighted_projection(data.x, w, data.unit, data.period,
                                           idx.n_units, idx.n_periods)
        worst_proj = max(worst_proj, np.abs(xt - oracle).max())
    elapsed = time.time() - t0
    ok = worst_beta < 1e-8 and worst_proj < 1e-10 and elapsed < 60
    assert _line("6", ok, f"{n_checked} fits: max |beta - dense Newton| = "
                          f"{worst_beta:.2e} (< 1e-8); 50 projections: max "
                          f"|xt - dense WLS| = {worst_proj:.2e} (< 1e-10); "
                          f"runtime {elapsed:.0f}s < 60s")


# =============================================================================
# 7. probit plug-in vs closed form
# =============================================================================

def test_criterion7_plugin_vs_closed_form():
    t0 = time.time()
    rng = np.random.default_rng(707)
    worst = 0.0
    for k in range(12):
        data, _ = make_random_panel(rng, "probit", 30, 8, d=2,
                                    unbalanced=(k % 3 == 0))
        full = pf.fit(data, "probit")
        B = pf.estimate_B(full, data, M=0)
        D = pf.estimate_D(full, data)
        B_cf, D_cf = pf.probit_closed_form_bias(full, data)
        worst = max(worst, np.abs(B - B_cf).max(), np.abs(D - D_cf).max())
    # vanishing at beta = 0 with zero effects imposed
    data, _ = make_random_panel(rng, "probit", 15, 6, d=2)
    ev = pf.evaluate_at(data, "probit", np.zeros(2), np.zeros(data.n_units),
                        np.zeros(data.n_periods))
    null_max = max(np.abs(pf.estimate_B(ev, data, M=0)).max(),
                   np.abs(pf.estimate_D(ev, data)).max())
    elapsed = time.time() - t0
    ok = worst < 1e-8 and null_max < 1e-12 and elapsed < 60
    assert _line("7", ok, f"12 fits: max |plug-in - closed form| = {worst:.2e} "
                          f"(< 1e-8); at null point {null_max:.1e}; "
                          f"runtime {elapsed:.0f}s < 60s")


# =============================================================================
# 8. invariant suites (summary re-assertions; full versions in module tests)
# =============================================================================

def test_criterion8_invariant_suites():
    rng = np.random.default_rng(808)
    # family derivative chains vs finite differences
    ok_fd = True
    for name in ("linear", "probit", "logit", "poisson"):
        fam = pf.get_family(name)
        y = np.array([0.0, 1.0]) if name in ("probit", "logit") else np.array([0.0, 2.0])
        u = np.linspace(-2, 2, 9)
        yy, uu = np.meshgrid(y, u)
        yy, uu = yy.ravel(), uu.ravel()
        h = 1e-5
        for f, df in ((fam.loglik, fam.score), (fam.score, fam.hess),
                      (fam.hess, fam.third)):
            fd = (f(yy, uu + h) - f(yy, uu - h)) / (2 * h)
            ok_fd &= bool(np.max(np.abs(fd - df(yy, uu))
                                 / np.maximum(np.abs(df(yy, uu)), 1.0)) < 1e-6)
    # projection orthogonality + idempotence
    data, _ = make_random_panel(rng, "linear", 10, 6, d=2, unbalanced=True)
    idx = pf.build_index(data)
    w = rng.uniform(0.3, 2.0, data.n_obs)
    xt = pf.two_way_project(data.x, w, data.unit, data.period,
                            idx.n_units, idx.n_periods)
    resid = max(np.abs(np.bincount(data.unit, weights=w * xt[:, k],
                                   minlength=idx.n_units)).max() for k in range(2))
    again = pf.two_way_project(xt, w, data.unit, data.period,
                               idx.n_units, idx.n_periods)
    ok_proj = resid < 1e-9 and np.abs(again - xt).max() < 1e-9
    # jackknife affine identities (exact)
    c = np.array([1.7, -0.4])
    ok_affine = (np.allclose(pf.jbc_combine(c, c, c, 9, 7), c, atol=1e-14)
                 and np.allclose(pf.sbc_combine(c, c, c), c, atol=1e-14)
                 and np.allclose(pf.hbc_combine(c, c, c, 9), c, atol=1e-14))
    # balanced/unbalanced degeneration: general machinery == balanced formulas
    data2, _ = make_random_panel(rng, "logit", 14, 6)
    full2 = pf.fit(data2, "logit")
    if data2.is_balanced():
        fam = full2.family
        N2, T2 = data2.n_units, data2.n_periods
        u2 = full2.u_hat.reshape(N2, T2)
        xt2 = full2.xtilde[:, 0].reshape(N2, T2)
        w2 = full2.omega.reshape(N2, T2)
        coef = fam.weight_deriv(u2) + 0.5 * fam.expected_g3(u2)
        b_hand = np.mean((coef * xt2).mean(axis=1) / (-w2.mean(axis=1))) / full2.hessian[0, 0]
        ok_degen = abs(pf.estimate_B(full2, data2, M=0)[0] - b_hand) < 1e-10
    else:
        ok_degen = True  # draw came out unbalanced after cleaning; covered in test_bias
    # run_mc determinism across worker counts
    design = pf.McDesign("iid_exog", "linear", 20, 6, (1.0,), 4, 5, ("fe", "abc"))
    from panelfe._serialize import to_json
    ok_det = to_json(pf.run_mc(design, workers=1).to_dict()) == \
        to_json(pf.run_mc(design, workers=2).to_dict())
    ok = ok_fd and ok_proj and ok_affine and ok_degen and ok_det
    assert _line("8", ok, f"finite differences {ok_fd}, projection {ok_proj}, "
                          f"affine {ok_affine}, degeneration {ok_degen}, "
                          f"worker determinism {ok_det}")


# =============================================================================
# 9. bias-order law and the coverage link
# =============================================================================

@pytest.fixture(scope="module")
def bias_order():
    t0 = time.time()
    cells = {}
    for size, reps in ((20, 1000), (40, 400), (80, 200)):
        design = pf.McDesign(
            "iid_exog", "logit", size, size, (1.0,), reps, 909,
            ("fe",), params={"sigma_alpha": 0.5, "sigma_gamma": 0.3,
                             "corr_alpha": 0.4})
        report = pf.run_mc(design, workers=WORKERS)
        cells[size] = report
    elapsed = time.time() - t0
    print(f"[criterion 9] cells done in {elapsed:.0f}s; biases: " + ", ".join(
        f"T={s}: {cells[s].table['fe']['bias_pct'][0]:+.2f}%" for s in cells))
    return cells, elapsed


class TestCriterion9:
    def test_one_over_t_scaling(self, bias_order):
        cells, elapsed = bias_order
        bias = {s: cells[s].table["fe"]["bias_pct"][0] / 100 for s in cells}
        r1 = bias[20] / bias[40]
        r2 = bias[40] / bias[80]
        ok = (2 / 1.5 <= r1 <= 2 * 1.5) and (2 / 1.5 <= r2 <= 2 * 1.5)
        ok &= elapsed < 600
        assert _line("9", ok, f"bias ratios per doubling: {r1:.2f}, {r2:.2f} "
                              f"(window [1.33, 3.00]); runtime {elapsed:.0f}s < 600s")

    def test_coverage_link(self, bias_order):
        cells, _ = bias_order
        report = cells[20]
        stats = report.table["fe"]
        # measured standardized shift: bias relative to the sampling sd
        shift = abs(stats["bias_pct"][0]) / stats["sd_pct"][0]
        predicted = pf.coverage_theory(shift, 0.95)
        empirical = stats["coverage"][0]
        ok = abs(empirical - predicted) <= 0.04
        assert _line("9", ok, f"coverage link: empirical {empirical:.3f} vs "
                              f"theory at measured shift {shift:.2f}: "
                              f"{predicted:.3f} (within 0.04)")
