import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

import oracles
from iptwfe.errors import MaxIterations, NoVariationAnywhere, SeparationDetected, ShapeMismatch
from iptwfe.panel_data import LagSpec, PanelDataset, build_design
from iptwfe.ps_model import (
    PsFit,
    PsSpec,
    _solve_intercepts,
    fe_log_likelihood,
    fit_fixed_effects_mle,
    fit_marginal_model,
    fit_pooled_mle,
    get_link,
    nonparametric_unit_means,
    predict_propensity,
    score_vector,
)

NO_LAGS = LagSpec(treatment_lags=0)


def _panel(rng, n=40, t=15, beta=(0.8, -0.5), a=1.0, link="logit"):
    alpha = rng.uniform(-a, a, n)
    x = rng.standard_normal((n, t, len(beta)))
    eta = alpha[:, None] + x @ np.asarray(beta)
    p = get_link(link).cdf(eta)
    d = (rng.random((n, t)) < p).astype(np.int8)
    return PanelDataset(d, x, np.zeros(n))


def _fit(data, spec=None, lags=NO_LAGS):
    spec = spec or PsSpec(design=lags)
    design = build_design(data, spec.design)
    return design, fit_fixed_effects_mle(design, data.treatment, spec)


# ---------------------------------------------------------------------------
# links


@pytest.mark.parametrize("link", ["logit", "probit"])
def test_zero_predictor_gives_half(link):
    assert get_link(link).cdf(np.array(0.0)) == 0.5


def test_logit_log3():
    assert get_link("logit").cdf(np.array(math.log(3))) == pytest.approx(0.75, abs=1e-15)


def test_probit_matches_erf():
    v = 1.6449
    ref = 0.5 * (1 + math.erf(v / math.sqrt(2)))
    got = float(get_link("probit").cdf(np.array(v)))
    assert abs(got - ref) < 1e-12
    assert abs(got - 0.95) < 1e-4


@pytest.mark.parametrize("link", ["logit", "probit"])
def test_link_score_and_curvature_match_finite_differences(link):
    lk = get_link(link)
    eta = np.linspace(-8, 8, 33)
    for d in (0.0, 1.0):
        dd = np.full_like(eta, d)
        f = lambda e: lk.loglik(e, dd)  # noqa: E731
        h = 1e-5
        fd1 = (f(eta + h) - f(eta - h)) / (2 * h)
        fd2 = (f(eta + h) - 2 * f(eta) + f(eta - h)) / h ** 2
        np.testing.assert_allclose(lk.score(eta, dd), fd1, rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(-lk.curvature(eta, dd), fd2, rtol=1e-3, atol=1e-4)
        assert np.all(lk.curvature(eta, dd) > 0)


@pytest.mark.parametrize("link", ["logit", "probit"])
def test_ppf_inverts_cdf(link):
    p = np.linspace(0.01, 0.99, 21)
    lk = get_link(link)
    np.testing.assert_allclose(lk.cdf(lk.ppf(p)), p, atol=1e-14)


# ---------------------------------------------------------------------------
# fixed-effects MLE


def test_intercept_only_closed_form():
    d = np.array([[1, 1, 0, 1], [0, 1, 0, 0], [1, 0, 1, 0]])
    data = PanelDataset(d, np.zeros((3, 4, 1)), np.zeros(3))
    _, fit = _fit(data, PsSpec(design=NO_LAGS))
    assert fit.alpha[0] == pytest.approx(math.log(3), abs=1e-12)
    np.testing.assert_allclose(fit.alpha, np.log(d.mean(1) / (1 - d.mean(1))), atol=1e-12)
    np.testing.assert_allclose(fit.beta, 0.0, atol=1e-12)


def test_intercept_only_probit_closed_form():
    d = np.array([[1, 1, 0, 1, 1], [0, 1, 0, 0, 0]])
    _, fit = _fit(PanelDataset(d, np.zeros((2, 5, 0)), np.zeros(2)), PsSpec(link="probit", design=NO_LAGS))
    np.testing.assert_allclose(fit.alpha, get_link("probit").ppf(d.mean(1)), atol=1e-12)


def test_degenerate_unit_not_identified(rng):
    data = _panel(rng, n=10, t=8)
    d = np.array(data.treatment)
    d[3] = 1
    d[5] = 0
    data = PanelDataset(d, data.covariates, data.outcome)
    _, fit = _fit(data)
    assert not fit.identified[3] and not fit.identified[5]
    assert np.isnan(fit.alpha[3]) and np.isnan(fit.fitted_probabilities[5]).all()
    assert fit.identified.sum() == 8


def test_no_variation_anywhere():
    d = np.vstack([np.ones(5), np.zeros(5)])
    with pytest.raises(NoVariationAnywhere):
        _fit(PanelDataset(d, np.zeros((2, 5, 1)), np.zeros(2)))


@pytest.mark.parametrize("link", ["logit", "probit"])
def test_fe_mle_matches_generic_optimiser(rng, link):
    data = _panel(rng, n=6, t=25, link=link)
    design, fit = _fit(data, PsSpec(link=link, design=NO_LAGS))
    keep = fit.identified

    def neg(theta):
        alpha = np.full(data.n_units, np.nan)
        alpha[keep] = theta[2:]
        return -fe_log_likelihood(theta[:2], alpha, design, data.treatment, link)

    start = np.zeros(2 + keep.sum())
    res = minimize(neg, start, method="BFGS", options={"gtol": 1e-10})
    np.testing.assert_allclose(fit.beta, res.x[:2], atol=1e-5)
    np.testing.assert_allclose(fit.alpha[keep], res.x[2:], atol=1e-5)
    assert fit.log_likelihood == pytest.approx(-res.fun, abs=1e-8)


def test_score_zero_and_finite_differences(rng):
    data = _panel(rng)
    design, fit = _fit(data)
    assert fit.grad_norm <= 1e-8
    s = score_vector(fit, design, data.treatment)
    assert np.max(np.abs(s)) <= 1e-8
    keep = fit.identified

    def ll(theta):
        alpha = np.full(data.n_units, np.nan)
        alpha[keep] = theta[2:]
        return fe_log_likelihood(theta[:2], alpha, design, data.treatment)

    theta = np.concatenate([fit.beta, fit.alpha[keep]]) + 0.1
    alpha = fit.alpha.copy()
    alpha[keep] = theta[2:]
    analytic = score_vector(replace(fit, beta=theta[:2], alpha=alpha), design, data.treatment)
    fd = oracles.central_difference(ll, theta, h=1e-5)
    np.testing.assert_allclose(analytic, fd, rtol=1e-5, atol=1e-6)


def test_concentration_consistency(rng):
    data = _panel(rng)
    design, fit = _fit(data)
    keep = fit.identified
    x = design.cube()[keep]
    d = data.treatment[keep].astype(float)
    a, _ = _solve_intercepts(x @ fit.beta, d, get_link("logit"), np.zeros(keep.sum()), None, 50, 1e-12, 40)
    np.testing.assert_allclose(a, fit.alpha[keep], atol=1e-9)


def test_monotone_ascent(rng):
    data = _panel(rng, n=200, t=20, a=2.0)
    _, fit = _fit(data, lags=LagSpec(treatment_lags=1))
    h = np.array(fit.history)
    assert len(h) >= 2
    assert np.all(np.diff(h) >= -1e-12 * np.abs(h[:-1]))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    data = _panel(rng, n=15, t=10)
    perm = rng.permutation(data.n_units)
    _, fit = _fit(data)
    _, fit_p = _fit(PanelDataset(data.treatment[perm], data.covariates[perm], data.outcome[perm]))
    np.testing.assert_allclose(fit_p.beta, fit.beta, atol=1e-9)
    np.testing.assert_allclose(fit_p.alpha, fit.alpha[perm], atol=1e-9)
    assert np.all(fit_p.identified == fit.identified[perm])


def test_fitted_probabilities_in_open_unit_interval(rng):
    _, fit = _fit(_panel(rng, a=3.0))
    p = fit.fitted_probabilities[fit.identified]
    assert np.all((p > 0) & (p < 1))


def test_alpha_bounds_are_respected(rng):
    data = _panel(rng, n=30, t=10, a=3.0)
    lo, hi = -0.5, 0.5
    design, fit = _fit(data, PsSpec(design=NO_LAGS, alpha_bounds=(lo, hi)))
    keep = fit.identified
    a = fit.alpha[keep]
    assert np.all((a >= lo) & (a <= hi))
    pinned = fit.alpha_at_bound[keep]
    assert pinned.any()
    assert np.all((a[pinned] == lo) | (a[pinned] == hi))
    # free intercepts satisfy their score equation; pinned ones push outward
    s = score_vector(fit, design, data.treatment)[fit.beta.size:]
    assert np.max(np.abs(s[~pinned])) <= 1e-8
    assert np.all(np.where(a[pinned] == lo, s[pinned] <= 0, s[pinned] >= 0))


def test_max_iterations(rng):
    data = _panel(rng)
    with pytest.raises(MaxIterations):
        _fit(data, PsSpec(design=NO_LAGS, max_iter=1, tol=1e-14))


def test_json_round_trip(rng, tmp_path):
    data = _panel(rng, n=8, t=6)
    d = np.array(data.treatment)
    d[0] = 0
    data = PanelDataset(d, data.covariates, data.outcome)
    design, fit = _fit(data)
    path = tmp_path / "ps.json"
    fit.to_json(path)
    back = PsFit.from_json(path, design)
    np.testing.assert_array_equal(back.beta, fit.beta)
    np.testing.assert_array_equal(back.alpha, fit.alpha)
    np.testing.assert_array_equal(back.fitted_probabilities, fit.fitted_probabilities)


def test_predict_shape_mismatch(rng):
    design, fit = _fit(_panel(rng, n=8, t=6))
    other = build_design(_panel(rng, n=9, t=6), NO_LAGS)
    with pytest.raises(ShapeMismatch):
        predict_propensity(fit, other)


# ---------------------------------------------------------------------------
# pooled and marginal models


def test_pooled_intercept_at_half():
    d = np.tile([0, 1], (10, 5))
    data = PanelDataset(d, np.zeros((10, 10, 1)), np.zeros(10))
    design = build_design(data, NO_LAGS)
    fit = fit_pooled_mle(design, d)
    assert abs(fit.alpha[0]) < 1e-12


def test_pooled_matches_generic_optimiser(rng):
    data = _panel(rng, n=50, t=10, a=0.0)
    design = build_design(data, LagSpec(treatment_lags=1))
    fit = fit_pooled_mle(design, data.treatment)
    x = design.values
    y = data.treatment[:, 1:].reshape(-1)

    def neg(theta):
        eta = theta[0] + x @ theta[1:]
        return -np.sum(y * eta - np.logaddexp(0, eta))

    res = minimize(neg, np.zeros(4), method="BFGS", options={"gtol": 1e-10})
    np.testing.assert_allclose(fit.beta, res.x[1:], atol=1e-5)
    assert fit.alpha[0] == pytest.approx(res.x[0], abs=1e-5)


def test_pooled_and_fe_agree_without_heterogeneity():
    diffs = []
    for r in range(100):
        rng = np.random.default_rng(1000 + r)
        data = _panel(rng, n=60, t=30, a=0.0)
        design = build_design(data, NO_LAGS)
        fe = fit_fixed_effects_mle(design, data.treatment)
        pooled = fit_pooled_mle(design, data.treatment)
        diffs.append(fe.beta - pooled.beta)
    diffs = np.array(diffs)
    se = diffs.std(axis=0, ddof=1) / np.sqrt(len(diffs))
    # FE has an O(1/T) incidental-parameter bias away from zero; allow it.
    assert np.all(np.abs(diffs.mean(axis=0)) < 4 * se + 0.05)


def test_separation_detected():
    d = np.array([[0, 0, 1, 1], [0, 1, 1, 0]])
    x = d[:, :, None].astype(float)
    data = PanelDataset(d, x, np.zeros(2))
    design = build_design(data, NO_LAGS)
    with pytest.raises(SeparationDetected):
        fit_pooled_mle(design, d)


def test_marginal_intercept_only_is_overall_fraction(rng):
    d = (rng.random((20, 7)) < 0.3).astype(np.int8)
    fit = fit_marginal_model(d, lag_count=0)
    np.testing.assert_allclose(fit.fitted_probabilities, d.mean(), atol=1e-12)


def test_marginal_lag_coefficient_vanishes_for_iid_treatment():
    rng = np.random.default_rng(5)
    d = (rng.random((1000, 101)) < 0.3).astype(np.int8)
    fit = fit_marginal_model(d, lag_count=1)
    assert abs(fit.beta[0]) < 0.05


def test_marginal_alternating_treatment_separates():
    d = np.tile([0, 1], (6, 5))
    with pytest.raises(SeparationDetected):
        fit_marginal_model(d, lag_count=1)


def test_marginal_grid_aligns_with_offset(rng):
    d = (rng.random((10, 8)) < 0.5).astype(np.int8)
    fit = fit_marginal_model(d, lag_count=1, t_offset=3)
    assert fit.fitted_probabilities.shape == (10, 5)


@pytest.mark.parametrize("row,mean", [((1, 0, 1, 1), 0.75), ((0, 0, 0), 0.0), ((1, 1, 1, 1, 1), 1.0)])
def test_unit_means(row, mean):
    assert nonparametric_unit_means(np.array([row]))[0] == mean
