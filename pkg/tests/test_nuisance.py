from __future__ import annotations

import numpy as np
import pytest
import statsmodels.api as sm
from hypothesis import given
from hypothesis import strategies as st

from scaledeffects.mathkit import seeded_rng
from scaledeffects.model import Dataset
from scaledeffects.nuisance import (
    ModelSpec,
    NuisanceConfig,
    Oracle,
    default_grid,
    default_specs,
    fit_cdf_surface,
    fit_linear,
    fit_logistic,
    fit_nuisances,
)

from conftest import RCT_SPECS, confounded_dataset, linear_specs


def _design(n=200, q=3, seed=0):
    rng = seeded_rng(seed, 0)
    return rng.standard_normal((n, q)), rng


def test_fit_linear_matches_statsmodels_wls():
    x, rng = _design()
    y = 1.0 + x @ [0.5, -2.0, 0.1] + rng.standard_normal(200)
    w = rng.uniform(0.5, 2.0, 200)
    ref = sm.WLS(y, sm.add_constant(x), weights=w).fit().params
    fit = fit_linear(x, y, w)
    np.testing.assert_allclose(fit.coefficients, ref, rtol=1e-10, atol=1e-12)
    assert fit.converged and not fit.ridge


def test_fit_linear_multi_response():
    x, rng = _design()
    y = rng.standard_normal((200, 3))
    multi = fit_linear(x, y).coefficients
    for j in range(3):
        np.testing.assert_allclose(multi[:, j], fit_linear(x, y[:, j]).coefficients, atol=1e-12)


@given(st.floats(0.1, 100.0), st.floats(-50.0, 50.0))
def test_fit_linear_response_equivariance(c, d):
    x, rng = _design(60, 2, seed=3)
    y = x @ [1.0, -1.0] + rng.standard_normal(60)
    base = fit_linear(x, y).coefficients
    moved = fit_linear(x, c * y + d).coefficients
    expect = c * base
    expect[0] += d
    np.testing.assert_allclose(moved, expect, rtol=1e-9, atol=1e-9 * (1 + abs(d)))


def test_fit_linear_collinear_ridge():
    x, rng = _design(100, 2)
    design = np.column_stack([x, x[:, 0] + x[:, 1]])
    y = design @ [1.0, 1.0, 0.0] + 0.1 * rng.standard_normal(100)
    fit = fit_linear(design, y)
    assert fit.ridge
    assert set(fit.collinear) == {0, 1, 2}
    np.testing.assert_allclose(fit.predict(design), sm.OLS(y, sm.add_constant(design)).fit().fittedvalues, atol=1e-6)


def test_fit_linear_constant_column():
    x, rng = _design(50, 1)
    design = np.column_stack([x, np.full(50, 3.0)])
    fit = fit_linear(design, x[:, 0] * 2 + 1)
    assert fit.ridge and fit.collinear == (1,)
    # the 1e-8 ridge penalty shrinks slopes by about that relative amount
    np.testing.assert_allclose(fit.predict(design), x[:, 0] * 2 + 1, atol=1e-6)


def test_fit_linear_rejects_bad_input():
    with pytest.raises(ValueError):
        fit_linear(np.ones((3, 1)), np.ones(4))
    with pytest.raises(ValueError):
        fit_linear(np.ones((3, 1)), np.ones(3), weights=[-1, 1, 1])


def test_fit_logistic_matches_statsmodels():
    x, rng = _design(500)
    y = (rng.random(500) < 1 / (1 + np.exp(-(0.3 + x @ [1.0, -0.5, 0.2])))).astype(float)
    ref = sm.Logit(y, sm.add_constant(x)).fit(disp=0, tol=1e-12).params
    fit = fit_logistic(x, y)
    assert fit.converged
    np.testing.assert_allclose(fit.coefficients, ref, rtol=1e-7, atol=1e-9)


@given(st.floats(0.01, 100.0))
def test_fit_logistic_covariate_rescaling(c):
    x, rng = _design(300, 2, seed=7)
    y = (rng.random(300) < 1 / (1 + np.exp(-x @ [1.0, -1.0]))).astype(float)
    base = fit_logistic(x, y)
    scaled = fit_logistic(x * c, y)
    np.testing.assert_allclose(scaled.coefficients[1:] * c, base.coefficients[1:], rtol=1e-6)
    np.testing.assert_allclose(scaled.predict_proba(x * c), base.predict_proba(x), atol=1e-9)


def test_fit_logistic_intercept_only_closed_form():
    y = np.array([1.0, 0.0, 0.0, 1.0, 1.0])
    fit = fit_logistic(np.empty((5, 0)), y)
    assert fit.predict_proba(np.empty((2, 0))) == pytest.approx([0.6, 0.6])


def test_fit_logistic_separation_not_converged():
    x = np.linspace(-1, 1, 40)[:, None]
    y = (x[:, 0] > 0).astype(float)
    fit = fit_logistic(x, y)
    assert not fit.converged
    assert fit.iterations == 100


def test_fit_logistic_single_class():
    with pytest.raises(ValueError, match="single class"):
        fit_logistic(np.ones((4, 1)), np.zeros(4))


def test_default_specs_families():
    specs = default_specs(["x1"], eta_features=["x1", "x1sq"])
    by_target = {s.target: s for s in specs}
    assert by_target["propensity"].family == "logistic"
    assert by_target["mean"].family == "linear"
    assert by_target["second_moment"].features == ("x1", "x1sq")


def test_fit_nuisances_rct_closed_form():
    ds = Dataset.from_arrays(
        np.zeros((6, 0)), [0, 0, 0, 1, 1, 1], [[1.0], [2.0], [6.0], [3.0], [5.0], [10.0]]
    )
    fits = fit_nuisances(ds, RCT_SPECS)
    np.testing.assert_allclose(fits.propensity, 0.5)
    np.testing.assert_allclose(fits.mean0, 3.0)
    np.testing.assert_allclose(fits.mean1, 6.0)
    np.testing.assert_allclose(fits.second_moment, (1 + 4 + 36) / 3)


def test_fit_nuisances_matches_direct_fits():
    ds = confounded_dataset(n=300, K=2)
    fits = fit_nuisances(ds, linear_specs(ds.covariate_names), clip=0.0)
    x = ds.covariates
    np.testing.assert_allclose(fits.propensity, fit_logistic(x, ds.treatment).predict_proba(x))
    t = ds.treatment == 1
    np.testing.assert_allclose(fits.mean1[:, 1], fit_linear(x[t], ds.outcomes[t, 1]).predict(x))
    c = ~t
    np.testing.assert_allclose(fits.second_moment[:, 0], fit_linear(x[c], ds.outcomes[c, 0] ** 2).predict(x))


def test_leave_one_out_cross_fitting():
    ds = confounded_dataset(n=30, K=1, p=1, seed=4)
    specs = linear_specs(ds.covariate_names)
    fits = fit_nuisances(ds, specs, cross_fit_folds=ds.n, clip=0.0)
    for i in (0, 7, 29):
        keep = np.arange(ds.n) != i
        ref = fit_nuisances(ds.take(np.nonzero(keep)[0]), specs, clip=0.0)
        x = ds.covariates
        # predictions for unit i come from the fit that excluded it
        p_ref = fit_logistic(x[keep], ds.treatment[keep]).predict_proba(x[i : i + 1])[0]
        assert fits.propensity[i] == pytest.approx(p_ref, rel=1e-10)
        t = keep & (ds.treatment == 1)
        assert fits.mean1[i, 0] == pytest.approx(fit_linear(x[t], ds.outcomes[t, 0]).predict(x[i : i + 1])[0])
        assert ref.propensity.shape == (ds.n - 1,)


def test_cross_fit_empty_arm():
    ds = Dataset.from_arrays(np.arange(4.0), [1, 0, 0, 0], [1.0, 2.0, 3.0, 4.0])
    with pytest.raises(ValueError, match="leaves arm"):
        fit_nuisances(ds, RCT_SPECS, cross_fit_folds=4)


def test_oracle_replaces_fits():
    ds = confounded_dataset(n=50, K=2)
    oracle = Oracle(
        propensity=lambda d: np.full(d.n, 0.3),
        mean=lambda d, a: np.full((d.n, d.K), float(a)),
        second_moment=lambda d: np.full((d.n, d.K), 2.0),
    )
    fits = fit_nuisances(ds, (), oracle=oracle)
    assert np.all(fits.propensity == 0.3)
    assert np.all(fits.mean1 == 1.0) and np.all(fits.mean0 == 0.0)
    assert np.all(fits.second_moment == 2.0)


def test_cdf_surface_monotone_and_bounded():
    ds = confounded_dataset(n=300, K=1)
    grid = default_grid(ds.outcomes[:, 0], 21)
    surf = fit_cdf_surface(ds, 0, grid, 1, ModelSpec("cdf", ds.covariate_names))
    assert surf.shape == (300, grid.size)
    assert np.all(np.diff(surf, axis=1) >= 0)
    assert np.all(surf[:, -1] == 1.0)


def test_cdf_surface_rct_is_empirical_cdf():
    rng = seeded_rng(2, 0)
    y = rng.standard_normal(80)
    a = np.tile([0.0, 1.0], 40)
    ds = Dataset.from_arrays(np.zeros((80, 0)), a, y)
    grid = default_grid(y, 11)
    surf = fit_cdf_surface(ds, 0, grid, 0, ModelSpec("cdf", ()))
    ecdf = [(y[a == 0] <= g).mean() for g in grid]
    np.testing.assert_allclose(surf[0], ecdf, atol=1e-12)


def test_nuisance_config_fit_with_cdf():
    ds = confounded_dataset(n=200, K=2)
    fits = NuisanceConfig(linear_specs(ds.covariate_names), grid_size=15).fit(ds, cdf=True)
    assert len(fits.cdf_grids) == 2
    assert fits.cdf(1, 0).shape == (200, fits.cdf_grids[1].size)
