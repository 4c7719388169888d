import numpy as np
import pytest

from fedlmm.errors import MissingHigherMoments, ResponseNotFound, SchemaMismatch, SingularDesign
from fedlmm.pseudogen import GeneratorConfig, generate_dataset
from fedlmm.regression import (
    INTERCEPT,
    cross_products_from_rows,
    cross_products_from_summary,
    fit_ols,
    pool_cross_products,
    robust_sandwich,
)
from fedlmm.summaries import ProviderSummary, pool_summaries, summarize_matrix

from _sim import hc0_raw


def raw_summary(x, y, pid="p", moments=False):
    data = np.column_stack([y, x])
    names = ["y", *[f"x{j + 1}" for j in range(x.shape[1])]]
    return summarize_matrix(pid, data, names, with_higher_moments=moments)


def test_two_point_yty():
    s = ProviderSummary("p", 2, ["y"], [1.0], [[2.0]])
    cp = cross_products_from_summary(s, "y")
    assert cp.yty == pytest.approx(4.0, abs=1e-15)
    assert cp.xtx[0, 0] == 2 and cp.xty[0] == pytest.approx(2.0)


def test_zero_mean_zero_covariance_summary():
    s = ProviderSummary("p", 6, ["y", "a", "b"], [0.0, 0.0, 0.0], np.diag([1.0, 3.0, 5.0]))
    cp = cross_products_from_summary(s, "y")
    np.testing.assert_allclose(cp.xtx, np.diag([6.0, 15.0, 25.0]), atol=1e-14)
    assert cp.names == [INTERCEPT, "a", "b"]


def test_cross_products_match_direct_products():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(9, 2)) * [2.0, 0.3] + [5.0, -1.0]
    y = rng.normal(size=9) + 3.0
    cp = cross_products_from_summary(raw_summary(x, y), "y")
    design = np.column_stack([np.ones(9), x])
    np.testing.assert_allclose(cp.xtx, design.T @ design, rtol=1e-12)
    np.testing.assert_allclose(cp.xty, design.T @ y, rtol=1e-12)
    assert cp.yty == pytest.approx(y @ y, rel=1e-12)


def test_predictor_subset_and_missing_response():
    rng = np.random.default_rng(2)
    s = raw_summary(rng.normal(size=(8, 3)), rng.normal(size=8))
    cp = cross_products_from_summary(s, "y", ["x3", "x1"])
    assert cp.names == [INTERCEPT, "x3", "x1"]
    with pytest.raises(ResponseNotFound):
        cross_products_from_summary(s, "nope")


def test_pool_cross_products():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(30, 2))
    y = rng.normal(size=30)
    parts = [(0, 7), (7, 19), (19, 30)]
    cps = [cross_products_from_summary(raw_summary(x[a:b], y[a:b], str(a)), "y") for a, b in parts]
    pooled = pool_cross_products(cps)
    whole = cross_products_from_rows(x, y, ["x1", "x2"])
    np.testing.assert_allclose(pooled.xtx, whole.xtx, rtol=1e-12)
    np.testing.assert_allclose(pooled.xty, whole.xty, rtol=1e-12, atol=1e-13)
    assert pooled.yty == pytest.approx(whole.yty, rel=1e-12)
    assert pooled.n == 30
    one = pool_cross_products(cps[:1])
    np.testing.assert_array_equal(one.xtx, cps[0].xtx)
    two = pool_cross_products([cps[0], cps[0]])
    np.testing.assert_array_equal(two.xtx, 2 * cps[0].xtx)
    other = cross_products_from_summary(raw_summary(x[:5, :1], y[:5]), "y")
    with pytest.raises(SchemaMismatch):
        pool_cross_products([cps[0], other])


def test_perfect_two_point_fit():
    cp = cross_products_from_rows([[0.0], [1.0]], [0.0, 1.0], ["x"])
    f = fit_ols(cp)
    np.testing.assert_allclose(f.beta, [0.0, 1.0], atol=1e-14)
    assert f.sigma2_mle == 0.0
    assert "TooFewObservations" in f.flags and np.isnan(f.sigma2_ols)


def test_intercept_only_closed_form():
    y = np.array([2.0, 3.0, 7.0, 1.0, 5.0])
    s = ProviderSummary("p", 5, ["y"], [y.mean()], [[y.var(ddof=1)]])
    f = fit_ols(cross_products_from_summary(s, "y"))
    assert f.beta[0] == pytest.approx(y.mean(), rel=1e-14)
    assert f.sigma2_mle == pytest.approx(y.var(ddof=1) * 4 / 5, rel=1e-12)
    assert f.sigma2_ols == pytest.approx(y.var(ddof=1), rel=1e-12)


def test_fit_matches_raw_least_squares():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(50, 3)) * [1.0, 10.0, 0.1]
    y = 1.0 + x @ [0.5, -0.2, 3.0] + rng.normal(size=50)
    f = fit_ols(cross_products_from_summary(raw_summary(x, y), "y"))
    design = np.column_stack([np.ones(50), x])
    beta, rss, *_ = np.linalg.lstsq(design, y, rcond=None)
    np.testing.assert_allclose(f.beta, beta, rtol=1e-10)
    assert f.sigma2_mle == pytest.approx(rss[0] / 50, rel=1e-10)
    assert f.sigma2_ols == pytest.approx(rss[0] / 46, rel=1e-10)
    assert f.sigma2_ols * (50 - 4) == pytest.approx(f.sigma2_mle * 50, rel=1e-15)
    np.testing.assert_allclose(f.classical_cov, f.sigma2_ols * np.linalg.inv(design.T @ design), rtol=1e-9)


def test_singular_design():
    x = np.column_stack([np.arange(6.0), 2 * np.arange(6.0)])
    with pytest.raises(SingularDesign):
        fit_ols(cross_products_from_rows(x, np.arange(6.0), ["a", "b"]))


def test_pseudo_data_gives_same_ols_fit():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(40, 3))
    y = x @ [1.0, 2.0, -1.0] + rng.normal(size=40)
    s = raw_summary(x, y)
    pseudo = generate_dataset(s, GeneratorConfig(seed=17))
    f_sum = fit_ols(cross_products_from_summary(s, "y"))
    f_pseudo = fit_ols(cross_products_from_rows(pseudo.data[:, 1:], pseudo.data[:, 0], s.names[1:]))
    np.testing.assert_allclose(f_pseudo.beta, f_sum.beta, rtol=1e-10, atol=1e-12)
    assert f_pseudo.sigma2_mle == pytest.approx(f_sum.sigma2_mle, rel=1e-10)


# -- robust covariance --------------------------------------------------------

def test_sandwich_requires_higher_moments():
    rng = np.random.default_rng(6)
    s = raw_summary(rng.normal(size=(10, 1)), rng.normal(size=10))
    f = fit_ols(cross_products_from_summary(s, "y"))
    with pytest.raises(MissingHigherMoments):
        robust_sandwich(s, f, "y")


def test_sandwich_intercept_only():
    y = np.array([1.0, 4.0, 2.0, 8.0, 5.0, 3.0])
    s = summarize_matrix("p", y[:, None], ["y"], with_higher_moments=True)
    f = fit_ols(cross_products_from_summary(s, "y"))
    v = robust_sandwich(s, f, "y")
    m2 = np.mean((y - y.mean()) ** 2)
    assert v[0, 0] == pytest.approx(m2 / 6, rel=1e-12)


def test_sandwich_constant_squared_residual():
    # x in {0, 1}, residuals +-c chosen so every e_i^2 = c^2
    x = np.array([0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0])
    e = 0.5 * np.array([1, -1, 1, -1, -1, 1, -1, 1])
    y = 2.0 + 3.0 * x + e
    s = raw_summary(x[:, None], y, moments=True)
    f = fit_ols(cross_products_from_summary(s, "y"))
    np.testing.assert_allclose(f.beta, [2.0, 3.0], atol=1e-13)
    design = np.column_stack([np.ones(8), x])
    v = robust_sandwich(s, f, "y")
    np.testing.assert_allclose(v, 0.25 * np.linalg.inv(design.T @ design), rtol=1e-10)


def test_sandwich_matches_raw_hc0_heteroscedastic():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(80, 2)) + [1.0, 3.0]
    y = 0.5 + x @ [1.0, -2.0] + np.abs(x[:, 0]) * rng.normal(size=80)
    s = raw_summary(x, y, moments=True)
    f = fit_ols(cross_products_from_summary(s, "y"))
    design = np.column_stack([np.ones(80), x])
    oracle = hc0_raw(design, y)
    v = robust_sandwich(s, f, "y")
    assert np.max(np.abs(v - oracle)) <= 1e-8 * np.abs(oracle).max()
    assert np.array_equal(v, v.T)
    assert np.linalg.eigvalsh(v).min() >= -1e-10 * np.abs(v).max()
    hc1 = robust_sandwich(s, f, "y", hc1=True)
    np.testing.assert_allclose(hc1, v * 80 / 77, rtol=1e-14)


def test_sandwich_from_pooled_provider_summaries():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(90, 2))
    y = x @ [1.0, 1.0] + (1 + x[:, 1] ** 2) * rng.normal(size=90)
    sums = [raw_summary(x[a:b], y[a:b], str(a), moments=True) for a, b in [(0, 25), (25, 60), (60, 90)]]
    pooled = pool_summaries(sums)
    f = fit_ols(cross_products_from_summary(pooled, "y"))
    oracle = hc0_raw(np.column_stack([np.ones(90), x]), y)
    v = robust_sandwich(pooled, f, "y")
    assert np.max(np.abs(v - oracle)) <= 1e-8 * np.abs(oracle).max()
