import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from iptwfe.errors import (
    DegeneratePropensity,
    KTooLarge,
    NoTreatedAtT,
    NoVariationAnywhere,
    RankDeficient,
    TooFewUnits,
)
from iptwfe.msm import (
    HistoryTerm,
    LinearIdentity,
    MsmSpec,
    fit_iptw_pipeline,
    fit_msm_wls,
    hc0_variance,
    hc2_variance,
    history_features,
    sandwich_variance,
    simple_estimator,
    wls,
)
from iptwfe.panel_data import LagSpec, PanelDataset
from iptwfe.ps_model import PsSpec
from iptwfe.sim import SimConfig, generate_panel
from iptwfe.weights import Trimming, WeightSet, WeightSpec

FINAL = MsmSpec(terms=(HistoryTerm("final", (0,)),))


def _panel(d, y):
    d = np.asarray(d)
    return PanelDataset(d, np.zeros(d.shape + (0,)), np.asarray(y, dtype=float))


def _weights(w):
    w = np.asarray(w, dtype=float)
    return WeightSet(w, np.ones(w.size, bool), {})


def test_perfect_fit_has_zero_variance():
    d = np.array([[0, 1], [1, 0], [0, 1], [1, 1], [0, 0]])
    data = _panel(d, d[:, -1].astype(float))
    fit = fit_msm_wls(data, _weights(np.ones(5)), FINAL)
    np.testing.assert_allclose(fit.gamma_hat, [0.0, 1.0], atol=1e-14)
    np.testing.assert_allclose(fit.vcov, 0.0, atol=1e-28)
    assert fit.ee_residual < 1e-14


def test_four_unit_instance():
    data = _panel([[1], [1], [0], [0]], [2.0, 2.0, 0.0, 0.0])
    fit = fit_msm_wls(data, _weights([1.0, 3.0, 2.0, 0.5]), FINAL)
    assert fit.coef("intercept") == pytest.approx(0.0, abs=1e-14)
    assert fit.coef("final") == pytest.approx(2.0, rel=1e-14)


def test_history_features_sum_lags():
    d = np.array([[1, 0, 1, 1, 0], [0, 1, 1, 0, 1]])
    spec = MsmSpec(terms=(HistoryTerm("final", (0,)), HistoryTerm("cumulative", (1, 2, 3))))
    np.testing.assert_array_equal(history_features(d, spec), [[1, 0, 2], [1, 1, 2]])
    with pytest.raises(KTooLarge):
        history_features(d[:, :3], spec)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 100.0))
def test_wls_and_hc2_against_direct_formulas(seed, scale):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(8, 40))
    h = np.column_stack([np.ones(n), rng.integers(0, 2, n), rng.integers(0, 4, n)]).astype(float)
    if np.linalg.matrix_rank(h) < 3:
        return
    y = rng.standard_normal(n)
    w = rng.uniform(0.2, 5.0, n)
    gamma, _ = wls(h, y, w)
    ref_gamma, ref_v = oracles.hc2_direct(h, y, w)
    if np.linalg.cond(h.T @ h) > 1e8:
        return
    np.testing.assert_allclose(gamma, ref_gamma, rtol=1e-8, atol=1e-10)
    e = y - h @ gamma
    v2 = hc2_variance(h, e, w)
    np.testing.assert_allclose(v2, ref_v, rtol=1e-7, atol=1e-12)
    v0 = hc0_variance(h, e, w)
    np.testing.assert_allclose(v0, oracles.hc0_direct(h, y, w), rtol=1e-7, atol=1e-12)
    assert np.all(np.diag(v2) >= np.diag(v0) - 1e-15)
    np.testing.assert_allclose(sandwich_variance(h, e, w, LinearIdentity(), gamma), v0, rtol=1e-8, atol=1e-14)
    # rescaling the weights changes nothing
    g_s, _ = wls(h, y, scale * w)
    np.testing.assert_allclose(g_s, gamma, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(sandwich_variance(h, e, scale * w), v0, rtol=1e-7, atol=1e-12)


def test_wls_unweighted_matches_normal_equations(rng):
    h = np.column_stack([np.ones(30), rng.standard_normal(30)])
    y = rng.standard_normal(30)
    gamma, _ = wls(h, y, np.ones(30))
    np.testing.assert_allclose(gamma, oracles.ols_normal_equations(h, y), rtol=1e-12)


def test_intercept_only_sandwich_is_sample_variance_over_n(rng):
    y = rng.standard_normal(25)
    h = np.ones((25, 1))
    e = y - y.mean()
    v = sandwich_variance(h, e, np.ones(25))
    assert v[0, 0] == pytest.approx(np.var(y) / 25, rel=1e-12)


def test_permuting_units_leaves_fit_unchanged(rng):
    d = rng.integers(0, 2, (40, 5))
    y = rng.standard_normal(40)
    w = rng.uniform(0.5, 2, 40)
    fit = fit_msm_wls(_panel(d, y), _weights(w))
    perm = rng.permutation(40)
    again = fit_msm_wls(_panel(d[perm], y[perm]), _weights(w[perm]))
    np.testing.assert_allclose(again.gamma_hat, fit.gamma_hat, rtol=1e-10)
    np.testing.assert_allclose(again.vcov, fit.vcov, rtol=1e-9)


def test_variance_flavors_and_ci(rng):
    d = rng.integers(0, 2, (60, 5))
    y = d[:, -1] + rng.standard_normal(60)
    ws = _weights(rng.uniform(0.5, 2, 60))
    hc2 = fit_msm_wls(_panel(d, y), ws, MsmSpec(variance="HC2"))
    hc0 = fit_msm_wls(_panel(d, y), ws, MsmSpec(variance="HC0"))
    sw = fit_msm_wls(_panel(d, y), ws, MsmSpec(variance="sandwich"))
    np.testing.assert_allclose(sw.vcov, hc0.vcov, rtol=1e-9)
    assert np.all(hc2.std_errors >= hc0.std_errors)
    half = (hc2.conf_int[:, 1] - hc2.conf_int[:, 0]) / 2
    np.testing.assert_allclose(half, 1.6448536269514722 * hc2.std_errors, rtol=1e-12)


def test_rank_deficient_and_too_few_units():
    d = np.array([[0, 1], [1, 1], [0, 1], [1, 1]])
    with pytest.raises(RankDeficient):
        fit_msm_wls(_panel(d, np.arange(4.0)), _weights(np.ones(4)), FINAL)
    with pytest.raises(TooFewUnits):
        fit_msm_wls(_panel(d[:2], [0.0, 1.0]), _weights(np.ones(2)), FINAL)


def test_history_term_parse():
    term = HistoryTerm.parse("cumulative:1,2,3")
    assert term == HistoryTerm("cumulative", (1, 2, 3))
    for bad in ("final", ":0", "x:1,1", "x:-1"):
        with pytest.raises(ValueError):
            HistoryTerm.parse(bad)


def test_fit_json_is_finite(tmp_path):
    d = np.array([[0, 1], [1, 0], [0, 1], [1, 1], [0, 0]])
    fit = fit_msm_wls(_panel(d, [0.1, 0.3, 1.2, 0.9, 0.0]), _weights(np.ones(5)), FINAL)
    payload = json.loads(fit.to_json(tmp_path / "fit.json"))
    assert [t["term"] for t in payload["terms"]] == ["intercept", "final"]
    assert payload["n_effective"] == 5


# ---------------------------------------------------------------------------
# simple ratio estimator


def test_simple_estimator_examples():
    d = np.array([[0, 1], [1, 0], [0, 1], [1, 0]])
    data = _panel(d, d[:, -1].astype(float))
    assert simple_estimator(data, np.full(4, 0.5)).tau_hat == pytest.approx(1.0, rel=1e-15)
    const = _panel(d, np.full(4, 3.0))
    est = simple_estimator(const, np.full(4, 0.5))
    assert est.tau_hat == 0.0 and est.std_error == 0.0


def test_simple_estimator_errors():
    d = np.array([[0, 1], [1, 1]])
    with pytest.raises(NoTreatedAtT):
        simple_estimator(_panel(1 - d, [0.0, 1.0]), [0.5, 0.5])
    with pytest.raises(DegeneratePropensity):
        simple_estimator(_panel(d, [0.0, 1.0]), [1.0, 0.5])


def test_simple_estimator_moment_is_zero_by_enumeration():
    """Two units with known propensities; enumerate all 2**6 treatment paths.

    With ``Y_i = D_iT + alpha_i`` the influence function evaluated at the
    population means ``tau1 = 1 + mean(alpha)``, ``tau0 = mean(alpha)`` has
    expectation zero, so the contrast targets ``tau = 1``.
    """
    pi = (0.4, 0.6)
    alpha = (-0.7, 1.3)
    t = 3
    tau1 = 1 + sum(alpha) / 2
    tau0 = sum(alpha) / 2
    total = 0.0
    mass = 0.0
    for paths in itertools.product(oracles.all_paths(t), repeat=2):
        prob = 1.0
        u = 0.0
        for i, path in enumerate(paths):
            prob *= np.prod([pi[i] if v else 1 - pi[i] for v in path])
            d_t = path[-1]
            y = d_t + alpha[i]
            u += d_t / pi[i] * (y - tau1) - (1 - d_t) / (1 - pi[i]) * (y - tau0)
        total += prob * u
        mass += prob
    assert mass == pytest.approx(1.0, abs=1e-14)
    assert abs(total) < 1e-12


# ---------------------------------------------------------------------------
# pipeline


@pytest.fixture(scope="module")
def sim_panel():
    return generate_panel(SimConfig(n=400, rho=20, a=1.0, master_seed=11), rep=0)[0]


def test_pipeline_runs_and_records_provenance(sim_panel):
    fit = fit_iptw_pipeline(sim_panel)
    assert fit.term_names == ("intercept", "final", "cumulative")
    assert fit.provenance["method"] == "fixed_effects"
    assert fit.n_effective == fit.provenance["n_identified"]
    assert fit.ee_residual < 1e-10
    assert np.all(np.isfinite(fit.std_errors))


def test_pipeline_fe_and_pooled_agree_without_heterogeneity():
    data, _ = generate_panel(SimConfig(n=2000, rho=50, a=0.0, master_seed=5), rep=0)
    fe = fit_iptw_pipeline(data, weight_spec=WeightSpec(trimming=_impute()))
    pooled = fit_iptw_pipeline(data, weight_spec=WeightSpec(trimming=_impute()), method="pooled")
    assert abs(fe.coef("final") - pooled.coef("final")) < 3 * pooled.se("final")


def _impute():
    return Trimming.impute_ps(0.01)


def test_pipeline_tags_failing_stage():
    d = np.zeros((6, 5), dtype=np.int8)
    data = PanelDataset(d, np.ones((6, 5, 1)), np.zeros(6))
    with pytest.raises(NoVariationAnywhere) as info:
        fit_iptw_pipeline(data)
    assert info.value.stage == "propensity"
    assert str(info.value).startswith("[propensity]")


def test_pipeline_rejects_msm_lag_beyond_k(sim_panel):
    with pytest.raises(KTooLarge):
        fit_iptw_pipeline(sim_panel, weight_spec=WeightSpec(k=2))


def test_pipeline_with_presample_lag(sim_panel):
    spec = PsSpec(design=LagSpec(treatment_lags=1, presample_treatment=0))
    fit = fit_iptw_pipeline(sim_panel, ps_spec=spec)
    assert fit.provenance["ps_columns"][-1] == "treatment_lag1"
