from __future__ import annotations

import math

import numpy as np
import pytest

from scaledeffects import sim
from scaledeffects.mathkit import seeded_rng
from scaledeffects.sim import (
    QUAD_FEATURES,
    SimScenario,
    build_features,
    generate_dataset,
    misspecify_covariates,
    run_replications,
    summarize,
    true_mean,
    true_propensity,
    true_psi,
)


def test_true_values():
    np.testing.assert_allclose(true_psi(2.0), [-1.0, 0.0, 1 / 3, 0.5])
    np.testing.assert_allclose(true_psi(0.0), [1.0, 1.0, 1.0, 1.0])


def test_mean_sign_pattern():
    x = np.eye(4)
    mu = true_mean(x, 0.0, 2.0)
    # row j = unit vector e_j; column k = mu_k
    expect = np.array([[0, 1, -1, 1], [1, 0, 1, -1], [-1, 1, 0, 1], [1, -1, 1, 0]]).T * np.arange(1, 5)
    np.testing.assert_allclose(mu, expect)
    np.testing.assert_allclose(true_mean(np.zeros((1, 4)), 1.0, 2.0), [[-2.0, 0.0, 2.0, 4.0]])


def test_potential_outcome_moments_monte_carlo():
    rng = seeded_rng(123, 0)
    n = 1_000_000
    x = rng.standard_normal((n, 4))
    ks = np.arange(1, 5)
    y0 = true_mean(x, 0.0) + rng.standard_normal((n, 4)) * ks
    y1 = true_mean(x, 1.0) + rng.standard_normal((n, 4)) * ks
    diff = y1 - y0
    se_diff = diff.std(0) / math.sqrt(n)
    assert np.all(np.abs(diff.mean(0) - 2 * (ks - 2)) < 3 * se_diff)
    sd0 = y0.std(0)
    # SE of a sample SD from normal data is about sd / sqrt(2n)
    assert np.all(np.abs(sd0 - 2 * ks) < 3 * sd0 / math.sqrt(2 * n))


def test_arm_share():
    # the propensity index is symmetric about 0, so P(A = 1) = 1/2 exactly
    n = 1_000_000
    ds = generate_dataset(n, rng=seeded_rng(7, 0))
    assert abs(ds.treatment.mean() - 0.5) < 3 * math.sqrt(0.25 / n)
    np.testing.assert_allclose(true_propensity(np.zeros((1, 4))), [0.5])


def test_misspecify_examples():
    np.testing.assert_allclose(misspecify_covariates(np.zeros((1, 4))), [[1.0, 10.0, 0.216, 400.0]])
    np.testing.assert_allclose(misspecify_covariates([[2.0, 0, 0, 0]]), [[math.e, 10.0, 0.216, 400.0]])
    rows = np.tile([[0.3, -1.0, 2.0, 0.5]], (3, 1))
    out = misspecify_covariates(rows)
    assert np.all(out == out[0])


def test_build_features_blocks():
    x = seeded_rng(1, 0).standard_normal((5, 4))
    xm = misspecify_covariates(x)
    prop, mean, quad = build_features(x, xm, "both")
    assert prop is x and mean is x
    assert quad.shape == (5, 14)
    np.testing.assert_allclose(quad[:, 4:8], x**2)
    np.testing.assert_allclose(quad[:, 8], x[:, 0] * x[:, 1])
    prop, mean, _ = build_features(x, xm, "none")
    assert prop is xm and mean is xm
    prop, mean, _ = build_features(x, xm, "trt")
    assert prop is x and mean is xm
    with pytest.raises(ValueError):
        build_features(x, xm, "neither")


def test_scenario_rejects_bad_label():
    with pytest.raises(ValueError):
        SimScenario(100, correct="partial")


def test_sim_specs_eta_columns():
    assert len(sim.sim_specs()[2].features) == 10
    assert sim.sim_specs(eta_linear_terms=True)[2].features == QUAD_FEATURES


def test_replications_deterministic_across_workers():
    sc = SimScenario(200, n_sim=6, master_seed=3)
    a = run_replications(sc, workers=1)
    b = run_replications(sc, workers=2)
    np.testing.assert_array_equal(a.estimates, b.estimates)
    np.testing.assert_array_equal(a.p_values, b.p_values)
    c = run_replications(sc, workers=1)
    assert a.as_dict() == c.as_dict()


def test_single_replicate_record():
    sc = SimScenario(300, n_sim=1, master_seed=9)
    s = run_replications(sc)
    assert s.n_ok == 1 and s.n_failed == 0
    assert s.estimates.shape == (1, 4)
    np.testing.assert_array_equal(s.sd, np.zeros(4))


def test_summarize_arithmetic():
    sc = SimScenario(100, n_sim=2, lam=2.0)
    truth = true_psi(2.0)
    est = np.vstack([truth + 0.1, truth - 0.3])
    se = np.full((2, 4), 0.1)
    s = summarize(sc, est, se, np.array([0.01, 0.5]))
    np.testing.assert_allclose(s.bias, -0.1)
    np.testing.assert_allclose(s.rmse, math.sqrt(100 * (0.01 + 0.09) / 2))
    # +0.1 lies inside +-0.196, -0.3 does not
    np.testing.assert_allclose(s.coverage, 0.5)
    assert s.rejection_rate == 0.5
    np.testing.assert_allclose(s.sd, np.std([0.1, -0.3], ddof=1))


def test_failure_rate_guard(monkeypatch):
    real = sim.run_replicate

    def flaky(scenario, index):
        if index % 2 == 0:
            nan = np.full(4, np.nan)
            return nan, nan, np.nan
        return real(scenario, index)

    monkeypatch.setattr(sim, "run_replicate", flaky)
    with pytest.raises(RuntimeError, match="replicates failed"):
        run_replications(SimScenario(200, n_sim=4))
    s = run_replications(SimScenario(200, n_sim=4), max_failure_rate=0.6)
    assert s.n_failed == 2 and s.n_ok == 2


def test_rmse_stable_across_n():
    small = run_replications(SimScenario(200, n_sim=200, master_seed=5))
    large = run_replications(SimScenario(1000, n_sim=200, master_seed=5))
    assert np.all(np.abs(small.rmse / large.rmse - 1) < 0.35)


def test_null_scenario_truth_is_one():
    s = run_replications(SimScenario(500, n_sim=5, lam=0.0))
    np.testing.assert_allclose(s.truth, 1.0)
    assert 0.0 <= s.rejection_rate <= 1.0
    assert np.all((s.coverage >= 0) & (s.coverage <= 1))
