from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, special, stats

from scaledeffects.mathkit import (
    chisq_upper_tail,
    empirical_covariance,
    normal_cdf,
    normal_quantile,
    pseudo_inverse,
    seeded_rng,
    solve_spd,
    symmetric,
    upper_incomplete_gamma,
)


def chisq_tail_by_quadrature(x, df):
    dens = lambda t: stats.chi2.pdf(t, df)
    val, _ = integrate.quad(dens, x, np.inf, epsabs=1e-15, epsrel=1e-13, limit=200)
    return val


def test_chisq_df3_critical_value():
    assert chisq_upper_tail(7.815, 3) == pytest.approx(chisq_tail_by_quadrature(7.815, 3), abs=1e-10)
    assert chisq_upper_tail(7.815, 3) == pytest.approx(0.05, abs=1e-4)


@pytest.mark.parametrize("x", [0.0, 0.01, 0.5, 1.0, 2.5, 3.841, 10.0, 30.0])
def test_chisq_df1_matches_normal_tail(x):
    # P(chi^2_1 > x) = 2 P(Z > sqrt x) = erfc(sqrt(x / 2))
    assert chisq_upper_tail(x, 1) == pytest.approx(math.erfc(math.sqrt(x / 2)), abs=1e-9)


def test_chisq_df2_closed_form():
    for x in (0.1, 1.0, 5.0, 50.0):
        assert chisq_upper_tail(x, 2) == pytest.approx(math.exp(-x / 2), rel=1e-12)


def test_chisq_boundaries():
    assert chisq_upper_tail(0.0, 4) == 1.0
    assert chisq_upper_tail(1e4, 3) < 1e-300 or chisq_upper_tail(1e4, 3) == 0.0
    with pytest.raises(ValueError):
        chisq_upper_tail(-1.0, 2)
    with pytest.raises(ValueError):
        chisq_upper_tail(1.0, 0)


@given(st.floats(0.5, 60), st.floats(0.0, 150))
def test_upper_gamma_against_scipy(a, x):
    assert upper_incomplete_gamma(a, x) == pytest.approx(special.gammaincc(a, x), rel=1e-11, abs=1e-300)


def test_upper_gamma_monotone_in_x():
    xs = np.linspace(0, 40, 400)
    q = [upper_incomplete_gamma(3.5, x) for x in xs]
    assert np.all(np.diff(q) <= 0)


@pytest.mark.parametrize("p", [1e-10, 1e-4, 0.01, 0.025, 0.3, 0.5, 0.77, 0.975, 1 - 1e-7])
def test_normal_quantile_against_scipy(p):
    assert normal_quantile(p) == pytest.approx(special.ndtri(p), abs=1e-12)


def test_normal_quantile_known_value():
    assert normal_quantile(0.975) == pytest.approx(1.959963984540054, abs=1e-12)
    assert normal_quantile(0.5) == 0.0


@given(st.floats(1e-12, 1 - 1e-12))
def test_normal_quantile_inverts_cdf(p):
    x = normal_quantile(p)
    assert normal_cdf(x) == pytest.approx(p, rel=1e-9, abs=1e-15)


def test_normal_quantile_symmetry_and_domain():
    ps = np.linspace(0.001, 0.499, 50)
    np.testing.assert_allclose(normal_quantile(ps), -normal_quantile(1 - ps), atol=1e-12)
    for bad in (0.0, 1.0, -0.1, float("nan")):
        with pytest.raises(ValueError):
            normal_quantile(bad)


def test_symmetric_accepts_rounding_and_rejects_asymmetry():
    a = np.array([[2.0, 1.0], [1.0 + 1e-14, 3.0]])
    s = symmetric(a)
    assert np.array_equal(s, s.T)
    with pytest.raises(ValueError, match="not symmetric"):
        symmetric(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        symmetric(np.ones((2, 3)))


def test_pseudo_inverse_full_rank_is_inverse():
    a = np.array([[4.0, 1.0], [1.0, 3.0]])
    inv, rank = pseudo_inverse(a)
    assert rank == 2
    np.testing.assert_allclose(inv @ a, np.eye(2), atol=1e-12)


def test_pseudo_inverse_singular():
    v = np.array([1.0, 2.0, -1.0])
    a = np.outer(v, v)
    inv, rank = pseudo_inverse(a)
    assert rank == 1
    np.testing.assert_allclose(a @ inv @ a, a, atol=1e-12)


def test_pseudo_inverse_rejects_indefinite():
    with pytest.raises(ValueError, match="indefinite"):
        pseudo_inverse(np.array([[1.0, 0.0], [0.0, -1.0]]))


def test_solve_spd():
    rng = seeded_rng(1, 0)
    m = rng.standard_normal((5, 5))
    a = m @ m.T + np.eye(5)
    b = rng.standard_normal(5)
    np.testing.assert_allclose(a @ solve_spd(a, b), b, atol=1e-10)


def test_empirical_covariance_divisor_n():
    m = np.array([[1.0, 2.0], [3.0, 6.0], [5.0, 1.0]])
    np.testing.assert_allclose(empirical_covariance(m), np.cov(m.T, bias=True))


def test_seeded_rng_streams():
    a = seeded_rng(5, 0).random(4)
    assert np.array_equal(a, seeded_rng(5, 0).random(4))
    assert not np.array_equal(a, seeded_rng(5, 1).random(4))
    assert not np.array_equal(a, seeded_rng(6, 0).random(4))
