from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from scaledeffects.mathkit import seeded_rng
from scaledeffects.model import Dataset
from scaledeffects.nuisance import ModelSpec

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def expit(z):
    return 1.0 / (1.0 + np.exp(-z))


def confounded_dataset(n=400, K=3, seed=0, p=2):
    """Linear-Gaussian outcomes with a logistic propensity in p covariates."""
    rng = seeded_rng(seed, 0)
    x = rng.standard_normal((n, p))
    a = (rng.random(n) < expit(x @ np.linspace(0.8, -0.4, p))).astype(float)
    coef = rng.standard_normal((p, K))
    y = x @ coef + a[:, None] * np.arange(1, K + 1) * 0.3 + rng.standard_normal((n, K)) * (1 + 0.2 * a[:, None])
    return Dataset(x, a, y, tuple(f"x{j}" for j in range(1, p + 1)), tuple(f"y{k}" for k in range(1, K + 1)))


def linear_specs(features):
    features = tuple(features)
    return (
        ModelSpec("propensity", features),
        ModelSpec("mean", features),
        ModelSpec("second_moment", features),
        ModelSpec("cdf", features),
    )


RCT_SPECS = linear_specs(())


# ---------------------------------------------------------------------------
# fully discrete design with closed-form truths


@dataclass(frozen=True)
class DiscreteDGP:
    """Binary confounder X, binary modifier V, binary A and three-point outcomes.

    P(X=1) = 0.4, P(V=1 | X) = 0.3 + 0.4 X, P(A=1 | X, V) = expit(-0.5 + X + 0.5 V).
    Outcome k takes the values ``support[k]`` with cell-specific probabilities.
    """

    support: tuple = ((0.0, 1.0, 2.0), (-1.0, 0.0, 3.0))

    def probs(self, k, x, v, a):
        base = np.array([0.5, 0.3, 0.2]) if k == 0 else np.array([0.3, 0.5, 0.2])
        shift = 0.1 * x - 0.05 * v + (0.15 if k == 0 else 0.05) * a + 0.05 * a * v
        p = base + np.array([-shift, 0.0, shift])
        return p / p.sum()

    @staticmethod
    def p_x(x):
        return 0.4 if x else 0.6

    @staticmethod
    def p_v(v, x):
        q = 0.3 + 0.4 * x
        return q if v else 1 - q

    @staticmethod
    def pi(x, v):
        return float(expit(-0.5 + x + 0.5 * v))

    def _moments(self, k, a, v=None):
        """E(Y_k^a), E{(Y_k^a)^2}, optionally conditional on V = v."""
        s = np.asarray(self.support[k])
        m1 = m2 = mass = 0.0
        for x, vv in itertools.product((0, 1), (0, 1)):
            if v is not None and vv != v:
                continue
            w = self.p_x(x) * self.p_v(vv, x)
            p = self.probs(k, x, vv, a)
            m1 += w * p @ s
            m2 += w * p @ s**2
            mass += w
        return m1 / mass, m2 / mass

    def psi(self, k, v=None):
        e1, _ = self._moments(k, 1, v)
        e0, s0 = self._moments(k, 0, v)
        return (e1 - e0) / np.sqrt(s0 - e0**2)

    def p_stratum(self, v):
        return sum(self.p_x(x) * self.p_v(v, x) for x in (0, 1))

    def psi_star(self, weights):
        """weights[v][k]"""
        return sum(self.p_stratum(v) * sum(weights[v][k] * self.psi(k, v) for k in range(2)) for v in (0, 1))

    def sample(self, n, seed):
        rng = seeded_rng(seed, 0)
        x = (rng.random(n) < 0.4).astype(float)
        v = (rng.random(n) < 0.3 + 0.4 * x).astype(float)
        a = (rng.random(n) < expit(-0.5 + x + 0.5 * v)).astype(float)
        y = np.empty((n, 2))
        for k in range(2):
            s = np.asarray(self.support[k])
            u = rng.random(n)
            for cell in itertools.product((0, 1), (0, 1), (0, 1)):
                rows = (x == cell[0]) & (v == cell[1]) & (a == cell[2])
                cum = np.cumsum(self.probs(k, *cell))
                y[rows, k] = s[np.searchsorted(cum, u[rows], side="right").clip(0, 2)]
        cov = np.column_stack([x, v, x * v])
        return Dataset(cov, a, y, ("x", "v", "xv"), ("y1", "y2"))


DISCRETE_SPECS = linear_specs(("x", "v", "xv"))


@pytest.fixture
def small_dataset():
    return confounded_dataset()


def scaled_effect(b):
    return (b[1] - b[0]) / np.sqrt(b[2] - b[0] ** 2)


def richardson_gradient(f, b, h):
    """Central differences with one Richardson step; error O(h^4)."""
    b = np.asarray(b, dtype=float)
    out = np.empty(b.size)
    for j in range(b.size):
        e = np.zeros(b.size)
        e[j] = 1.0
        d1 = (f(b + h * e) - f(b - h * e)) / (2 * h)
        d2 = (f(b + h / 2 * e) - f(b - h / 2 * e)) / h
        out[j] = (4 * d2 - d1) / 3
    return out


def fd_step(b):
    """Step small relative to the control variance, which sets the curvature scale."""
    var = b[2] - b[0] ** 2
    return 1e-3 * var / (1.0 + abs(b[0]))
