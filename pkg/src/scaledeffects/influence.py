"""Per-unit influence-function components and assembled efficient influence functions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Dataset, DegenerateVarianceError, InfluenceMatrix, MomentEstimates, NuisanceFits

# control variances at or below this are treated as degenerate
VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class IfComponents:
    """n x K evaluations of the arm-mean and control second-moment pseudo-outcomes."""

    phi0: np.ndarray
    phi1: np.ndarray
    phi2: np.ndarray

    def moments(self) -> MomentEstimates:
        return MomentEstimates(self.phi0.mean(axis=0), self.phi1.mean(axis=0), self.phi2.mean(axis=0))


def _indicator(dataset: Dataset, a: int) -> np.ndarray:
    return (dataset.treatment == a).astype(np.float64)


def phi_a(dataset: Dataset, fits: NuisanceFits, k: int | slice, a: int) -> np.ndarray:
    """AIPW pseudo-outcome for E(Y_k^a).

    ``1(A=a) / pi(a|X) * (Y_k - mu_k(X, a)) + mu_k(X, a)``
    """
    w = _indicator(dataset, a) / fits.arm_probability(a)
    mu = fits.mean(a)[:, k]
    y = dataset.outcomes[:, k]
    if np.ndim(mu) == 2:
        w = w[:, None]
    return w * (y - mu) + mu


def phi_2(dataset: Dataset, fits: NuisanceFits, k: int | slice) -> np.ndarray:
    """AIPW pseudo-outcome for E{(Y_k^0)^2}."""
    w = _indicator(dataset, 0) / fits.arm_probability(0)
    eta = fits.second_moment[:, k]
    y = dataset.outcomes[:, k]
    if np.ndim(eta) == 2:
        w = w[:, None]
    return w * (y**2 - eta) + eta


def phi_cdf(dataset: Dataset, fits: NuisanceFits, k: int, a: int, y) -> np.ndarray:
    """AIPW pseudo-outcome for P(Y_k^a <= y), for every grid threshold.

    ``y`` must be a value (or array of values) on the fitted CDF grid of
    outcome ``k``. Returns an n-vector for a scalar threshold and n x m for m
    thresholds.
    """
    grid = fits.cdf_grids[k]
    ys = np.atleast_1d(np.asarray(y, dtype=float))
    idx = np.searchsorted(grid, ys)
    idx_ok = np.clip(idx, 0, grid.size - 1)
    if np.any(idx >= grid.size) or np.any(grid[idx_ok] != ys):
        raise ValueError("thresholds must lie on the fitted CDF grid")
    nu = fits.cdf(k, a)[:, idx]
    w = (_indicator(dataset, a) / fits.arm_probability(a))[:, None]
    ind = (dataset.outcomes[:, k][:, None] <= ys[None, :]).astype(np.float64)
    out = w * (ind - nu) + nu
    return out[:, 0] if np.ndim(y) == 0 else out


def if_components(dataset: Dataset, fits: NuisanceFits) -> IfComponents:
    everything = slice(None)
    return IfComponents(
        phi_a(dataset, fits, everything, 0),
        phi_a(dataset, fits, everything, 1),
        phi_2(dataset, fits, everything),
    )


def grad_g(beta) -> np.ndarray:
    """Gradient of g(b0, b1, b2) = (b1 - b0) / sqrt(b2 - b0^2).

    ``(1/sd) * (psi b0 / sd - 1, 1, -psi / (2 sd))``, so the last entry is
    ``-psi / (2 sd^2)`` overall.

    Raises:
        DegenerateVarianceError: if b2 - b0^2 is not positive.
    """
    b0, b1, b2 = (float(v) for v in beta)
    var = b2 - b0 * b0
    if not var > 0:
        raise DegenerateVarianceError("degenerate control variance")
    sd = np.sqrt(var)
    psi = (b1 - b0) / sd
    return np.array([psi * b0 / sd - 1.0, 1.0, -psi / (2.0 * sd)]) / sd


def check_variance(beta: MomentEstimates, names=None) -> None:
    var = beta.variance0
    bad = np.nonzero(~(var > VARIANCE_FLOOR))[0]
    if bad.size:
        label = [names[i] if names else str(i) for i in bad]
        raise DegenerateVarianceError(f"degenerate control variance for outcome(s) {', '.join(label)}")


def eif_scaled(components: IfComponents, beta: MomentEstimates, psi) -> InfluenceMatrix:
    """Efficient influence function of the scaled mean effect, per unit and outcome.

    ``(phi1 - phi0) / sd - psi * (phi2 + beta2 - 2 beta0 phi0) / (2 sd^2)``

    When ``beta`` and ``psi`` are the sample means used for the estimate, every
    column averages to zero up to rounding.
    """
    check_variance(beta)
    var = beta.variance0
    sd = np.sqrt(var)
    psi = np.asarray(psi, dtype=float)
    c = components
    vals = (c.phi1 - c.phi0) / sd - psi * (c.phi2 + beta.beta2 - 2.0 * beta.beta0 * c.phi0) / (2.0 * var)
    return InfluenceMatrix(vals, "scaled-mean")


def eif_quantile(phi_grid, xi, density_at_xi, psi_q: float) -> np.ndarray:
    """Influence function of the median difference scaled by the control IQR.

    Args:
        phi_grid: n x 4 CDF pseudo-outcomes evaluated at, in order, the treated
            median, control median, control 75th and control 25th percentiles.
        xi: those four quantiles.
        density_at_xi: outcome densities at the four quantiles.
        psi_q: the scaled quantile effect.
    """
    phi_grid = np.asarray(phi_grid, dtype=float)
    xi = np.asarray(xi, dtype=float)
    f = np.asarray(density_at_xi, dtype=float)
    iqr = xi[2] - xi[3]
    if not iqr > 0:
        raise DegenerateVarianceError("zero control interquartile range")
    if np.any(~(f > 0)):
        raise ValueError("density estimates must be positive")
    levels = np.array([0.5, 0.5, 0.75, 0.25])
    phi_q = -(phi_grid - levels) / f
    return ((phi_q[:, 0] - phi_q[:, 1]) - psi_q * (phi_q[:, 2] - phi_q[:, 3])) / iqr


def eif_weighted(labels, strata, stratum_eifs, proportions, gamma, weights, psi_star: float) -> np.ndarray:
    """Influence function of the weighted summary of stratum-specific effects.

    Args:
        labels: n-vector of stratum labels V_i.
        strata: the S distinct stratum values, in the row order of ``gamma``.
        stratum_eifs: S matrices (n x K), the influence functions of the
            stratum effects, each carrying the 1(V=v) / P(V=v) factor.
        proportions: S-vector of P_n(V = v).
        gamma: S x K stratum effects.
        weights: S x K weights w_k(v).
        psi_star: the weighted summary estimate.

    Per unit: ``sum_k w_k(V) * {P(V) * IF_k^(V) + gamma_k(V)} - psi_star``.
    Multiplying the stratum influence function by P(V=v) removes its
    normalization, which is what the pathwise derivative of the
    P(V=v)-weighted sum produces.
    """
    labels = np.asarray(labels)
    gamma = np.asarray(gamma, dtype=float)
    weights = np.asarray(weights, dtype=float)
    out = np.full(labels.shape[0], -float(psi_star))
    for s, v in enumerate(strata):
        rows = labels == v
        if not rows.any():
            if np.any(weights[s] != 0):
                raise ValueError(f"weights reference empty stratum {v!r}")
            continue
        eif = np.asarray(stratum_eifs[s], dtype=float)[rows]
        out[rows] += (proportions[s] * eif + gamma[s]) @ weights[s]
    return out
