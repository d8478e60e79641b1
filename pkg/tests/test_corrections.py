"""Jackknife combinations, subpanel plumbing, profile-score correction."""

import numpy as np
import pytest

import panelfe as pf
from conftest import make_random_panel


# -- affine identities (exact) -------------------------------------------------

@pytest.mark.parametrize("c", [0.0, -1.3, 2.5])
def test_affine_identity_scalars(c):
    assert pf.jbc_combine(c, c, c, 17, 9) == pytest.approx(c, abs=1e-12)
    assert pf.sbc_combine(c, c, c) == pytest.approx(c, abs=1e-12)
    assert pf.hbc_combine(c, c, c, 17) == pytest.approx(c, abs=1e-12)


def test_affine_identity_vectors():
    c = np.array([0.4, -2.2, 8.0])
    assert np.allclose(pf.jbc_combine(c, c, c, 5, 4), c)
    assert np.allclose(pf.sbc_combine(c, c, c), c)
    assert np.allclose(pf.hbc_combine(c, c, c, 5), c)


# -- end-to-end jackknives -------------------------------------------------------

def test_jbc_matches_manual_combination(rng):
    data, _ = make_random_panel(rng, "linear", 8, 6)
    full = pf.fit(data, "linear")
    est = pf.jbc(data, "linear", fit_result=full)
    loo_i = est.subestimates["leave_unit_out"]
    loo_t = est.subestimates["leave_period_out"]
    assert loo_i.shape == (data.n_units, 1)
    assert loo_t.shape == (data.n_periods, 1)
    manual = pf.jbc_combine(full.beta, loo_i.mean(axis=0), loo_t.mean(axis=0),
                            data.n_units, data.n_periods)
    assert np.allclose(est.beta, manual)
    # each leave-one-out estimate equals a direct fit on that subpanel
    sub = pf.subpanel(data, pf.leave_unit_out(3))
    direct = pf.fit(sub, "linear")
    assert np.abs(loo_i[3] - direct.beta).max() < 1e-9


def test_sbc_reproducible_and_seed_sensitive(rng):
    data, _ = make_random_panel(rng, "linear", 12, 8)
    a = pf.sbc(data, "linear", num_unit_splits=4, seed=11)
    b = pf.sbc(data, "linear", num_unit_splits=4, seed=11)
    c = pf.sbc(data, "linear", num_unit_splits=4, seed=12)
    assert np.array_equal(a.beta, b.beta)
    assert not np.array_equal(a.beta, c.beta)
    assert a.params["seed"] == 11


def test_sbc_needs_minimum_size(rng):
    data, _ = make_random_panel(rng, "linear", 3, 8)
    with pytest.raises(pf.ValidationError):
        pf.sbc(data, "linear")


def test_hbc_uses_halves_and_loo(rng):
    data, _ = make_random_panel(rng, "linear", 9, 8)
    full = pf.fit(data, "linear")
    est = pf.hbc(data, "linear", fit_result=full)
    manual = pf.hbc_combine(full.beta,
                            est.subestimates["leave_unit_out"].mean(axis=0),
                            est.subestimates["period_halves"].mean(axis=0),
                            data.n_units)
    assert np.allclose(est.beta, manual)


def test_jackknife_failure_names_subpanel(rng):
    # unit 0 varies only in period 0: leave_period_out(0) creates a
    # no-variation unit and the subpanel fit must fail loudly, not drop;
    # units 1..N-1 alternate outcomes so every other subpanel stays valid
    N, T = 10, 5
    iobs = np.repeat(np.arange(N), T)
    tobs = np.tile(np.arange(T), N)
    y = ((iobs + tobs) % 2).astype(float)
    y[iobs == 0] = 0.0
    y[(iobs == 0) & (tobs == 0)] = 1.0
    x = 0.2 * rng.standard_normal((N * T, 1))
    data = pf.make_panel(iobs, tobs, y, x, ("x",))
    with pytest.raises(pf.PanelFEError, match="leave_period_out"):
        pf.jbc(data, "logit")


def test_vcov_is_full_panel_vcov(rng):
    data, _ = make_random_panel(rng, "linear", 10, 6)
    full = pf.fit(data, "linear")
    for est in (pf.jbc(data, "linear", fit_result=full),
                pf.hbc(data, "linear", fit_result=full)):
        assert np.allclose(est.vcov, pf.vcov_beta(full))
        assert np.array_equal(est.fe_beta, full.beta)


# -- profile-score correction ------------------------------------------------------

def test_psbc_first_step_is_abc(rng):
    # one Newton step of the corrected score from the FE estimate equals the
    # one-shot analytical correction; the full iteration stays close to it
    data, _ = make_random_panel(rng, "logit", 50, 8)
    full = pf.fit(data, "logit")
    a = pf.abc(data, "logit", M=0, fit_result=full)
    p = pf.psbc(data, "logit", M=0, max_iter=1, fit_result=full)
    assert np.abs(p.beta - a.beta).max() < 1e-9
    p_full = pf.psbc(data, "logit", M=0, fit_result=full)
    correction = np.abs(full.beta - a.beta).max()
    assert np.abs(p_full.beta - a.beta).max() < 0.25 * correction + 1e-12


def test_abc_iterations_move_then_stabilize(rng):
    data, _ = make_random_panel(rng, "logit", 50, 8)
    full = pf.fit(data, "logit")
    b1 = pf.abc(data, "logit", iterations=1, fit_result=full).beta
    b2 = pf.abc(data, "logit", iterations=2, fit_result=full).beta
    b5 = pf.abc(data, "logit", iterations=5, fit_result=full).beta
    b6 = pf.abc(data, "logit", iterations=6, fit_result=full).beta
    assert not np.array_equal(b1, b5)
    # contraction toward the fixed point of the iterated correction
    assert np.abs(b6 - b5).max() < 0.5 * np.abs(b2 - b1).max() + 1e-12


def test_abc_unbalanced_uses_average_counts(rng):
    data, _ = make_random_panel(rng, "logit", 40, 8, unbalanced=True)
    full = pf.fit(data, "logit")
    idx = pf.build_index(data)
    be = pf.estimate_bias(full, data, M=0)
    est = pf.abc(data, "logit", M=0, fit_result=full)
    manual = full.beta - be.B / idx.tbar - be.D / idx.nbar
    assert np.allclose(est.beta, manual)


def test_estimator_records_metadata(rng):
    data, _ = make_random_panel(rng, "logit", 30, 8)
    est = pf.abc(data, "logit", M=1, iterations=2, lag_average="pairwise")
    assert est.method == "abc"
    assert est.params["trim"] == 1 and est.params["iterations"] == 2
    assert est.bias_B is not None and est.bias_D is not None
