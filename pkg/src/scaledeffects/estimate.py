"""Point estimates and Wald/bootstrap inference for the scaled effect estimands.

Four estimands are covered: the mean/SD scaled effect per outcome, the
median/IQR scaled effect, stratum-specific effects (effect modification) and
weighted summaries of stratum effects across outcomes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import influence as inf
from .mathkit import empirical_covariance, normal_quantile, seeded_rng
from .model import (
    Dataset,
    DegenerateVarianceError,
    EffectTable,
    InfluenceMatrix,
    MomentEstimates,
    NuisanceFits,
    monotone_cdf,
)
from .nuisance import NuisanceConfig, fit_linear


def _wald(names, estimates, eif: np.ndarray, alpha: float, n: int, kind: str) -> EffectTable:
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    sigma = empirical_covariance(eif)
    se = np.sqrt(np.diag(sigma) / n)
    z = normal_quantile(1.0 - alpha / 2.0)
    est = np.asarray(estimates, dtype=float)
    return EffectTable(
        names=tuple(names),
        estimates=est,
        std_errors=se,
        ci_lower=est - z * se,
        ci_upper=est + z * se,
        covariance=sigma,
        alpha=alpha,
        n=n,
        influence=InfluenceMatrix(eif, kind),
    )


def estimate_moments(dataset: Dataset, fits: NuisanceFits) -> MomentEstimates:
    """Sample means of the three pseudo-outcomes for every outcome.

    Raises:
        DegenerateVarianceError: naming each outcome whose estimated control
            variance is not positive.
    """
    beta = inf.if_components(dataset, fits).moments()
    inf.check_variance(beta, dataset.outcome_names)
    return beta


def estimate_scaled_effects(dataset: Dataset, fits: NuisanceFits, alpha: float = 0.05) -> EffectTable:
    """Doubly robust scaled mean effects with influence-function Wald intervals.

    The returned covariance is the empirical covariance (divisor n) of the
    estimated efficient influence function; standard errors are sqrt(diag / n).
    """
    comps = inf.if_components(dataset, fits)
    beta = comps.moments()
    inf.check_variance(beta, dataset.outcome_names)
    psi = beta.psi
    eif = inf.eif_scaled(comps, beta, psi).values
    return _wald(dataset.outcome_names, psi, eif, alpha, dataset.n, "scaled-mean")


# ---------------------------------------------------------------------------
# quantile effects


@dataclass(frozen=True)
class CdfEstimate:
    """Doubly robust estimate of P(Y_k^a <= y) on a threshold grid."""

    grid: np.ndarray
    values: np.ndarray
    arm: int
    outcome: int


def estimate_cdf(dataset: Dataset, fits: NuisanceFits, k: int, a: int) -> CdfEstimate:
    grid = fits.cdf_grids[k]
    raw = inf.phi_cdf(dataset, fits, k, a, grid).mean(axis=0)
    return CdfEstimate(grid, monotone_cdf(raw), a, k)


def invert_cdf(cdf: CdfEstimate, q: float) -> float:
    """Smallest grid value y with F(y) >= q."""
    hit = np.nonzero(cdf.values >= q)[0]
    if hit.size == 0:
        raise ValueError("grid does not bracket quantile")
    return float(cdf.grid[hit[0]])


_LEVELS = ((1, 0.5), (0, 0.5), (0, 0.75), (0, 0.25))


@dataclass(frozen=True)
class QuantileEffect:
    outcome: str
    estimate: float
    std_error: float
    ci_lower: float
    ci_upper: float
    quantiles: tuple[float, float, float, float]
    method: str
    replicates: int = 0


def _quantile_point(dataset: Dataset, fits: NuisanceFits, k: int):
    cdfs = {a: estimate_cdf(dataset, fits, k, a) for a in (0, 1)}
    xi = tuple(invert_cdf(cdfs[a], q) for a, q in _LEVELS)
    iqr = xi[2] - xi[3]
    if not iqr > 0:
        raise DegenerateVarianceError(f"zero control interquartile range for outcome {dataset.outcome_names[k]}")
    return (xi[0] - xi[1]) / iqr, xi


def weighted_density(dataset: Dataset, fits: NuisanceFits, k: int, a: int, at: float) -> float:
    """Inverse-propensity weighted Gaussian kernel density of Y_k^a at ``at``.

    Bandwidth is Silverman's rule computed on the arm-``a`` outcomes.
    """
    rows = dataset.treatment == a
    y = dataset.outcomes[rows, k]
    w = 1.0 / fits.arm_probability(a)[rows]
    w = w / w.sum()
    q75, q25 = np.quantile(y, [0.75, 0.25])
    spread = min(np.std(y), (q75 - q25) / 1.349) if q75 > q25 else np.std(y)
    h = 0.9 * spread * y.size ** (-0.2)
    if not h > 0:
        raise ValueError("cannot choose a kernel bandwidth for a constant outcome")
    u = (y - at) / h
    return float(w @ np.exp(-0.5 * u * u) / (h * math.sqrt(2.0 * math.pi)))


def estimate_quantile_effect(
    dataset: Dataset,
    fits: NuisanceFits,
    k: int,
    alpha: float = 0.05,
    bootstrap_B: int = 1000,
    config: NuisanceConfig | None = None,
    seed: int = 0,
    method: str = "bootstrap",
) -> QuantileEffect:
    """Median difference over the control IQR, with bootstrap or closed-form CI.

    ``method="bootstrap"`` resamples rows and refits every nuisance with
    ``config`` (reusing the fitted threshold grids). ``method="closed-form"``
    uses the influence function with weighted kernel density estimates.
    """
    psi_q, xi = _quantile_point(dataset, fits, k)
    z = normal_quantile(1.0 - alpha / 2.0)
    if method == "bootstrap":
        if config is None:
            raise ValueError("bootstrap inference needs a NuisanceConfig to refit nuisances")
        grids = fits.cdf_grids

        def stat(ds: Dataset) -> np.ndarray:
            f = config.fit(ds, cdf=True, grids=grids)
            return np.array([_quantile_point(ds, f, k)[0]])

        var = bootstrap_covariance(dataset, stat, bootstrap_B, seed)[0, 0]
        se = math.sqrt(var / dataset.n)
        reps = bootstrap_B
    elif method == "closed-form":
        phis = np.column_stack([inf.phi_cdf(dataset, fits, k, a, x) for (a, _), x in zip(_LEVELS, xi)])
        dens = [weighted_density(dataset, fits, k, a, x) for (a, _), x in zip(_LEVELS, xi)]
        eif = inf.eif_quantile(phis, xi, dens, psi_q)
        se = math.sqrt(float(np.mean((eif - eif.mean()) ** 2)) / dataset.n)
        reps = 0
    else:
        raise ValueError(f"unknown quantile inference method {method!r}")
    return QuantileEffect(dataset.outcome_names[k], psi_q, se, psi_q - z * se, psi_q + z * se, xi, method, reps)


# ---------------------------------------------------------------------------
# effect modification


def _stratum_labels(dataset: Dataset, stratum) -> np.ndarray:
    if isinstance(stratum, str):
        return dataset.column(stratum)
    labels = np.asarray(stratum)
    if labels.shape != (dataset.n,):
        raise ValueError("stratum labels must be an n-vector")
    return labels


@dataclass(frozen=True)
class StratumEffects:
    """Stratum-specific scaled effects gamma_k(v), one EffectTable per stratum."""

    strata: tuple
    proportions: np.ndarray
    tables: tuple[EffectTable, ...]
    marginal_sd: bool
    labels: np.ndarray = field(repr=False)

    @property
    def gamma(self) -> np.ndarray:
        return np.vstack([t.estimates for t in self.tables])

    def table(self, v) -> EffectTable:
        return self.tables[self.strata.index(v)]


def estimate_effect_modification(
    dataset: Dataset, fits: NuisanceFits, stratum, alpha: float = 0.05, marginal_sd: bool = False
) -> StratumEffects:
    """Scaled effects within each level of a discrete covariate V.

    Each stratum reuses the pseudo-outcomes reweighted by 1(V=v) / P_n(V=v).
    With ``marginal_sd`` the denominator is the overall control SD instead of
    the stratum-specific one.

    Raises:
        ValueError: if a stratum lacks treated or control units.
    """
    labels = _stratum_labels(dataset, stratum)
    strata = tuple(np.unique(labels).tolist())
    comps = inf.if_components(dataset, fits)
    overall = comps.moments()
    if marginal_sd:
        inf.check_variance(overall, dataset.outcome_names)
    tables, props = [], []
    n = dataset.n
    for v in strata:
        ind = labels == v
        for arm, word in ((1, "treated"), (0, "control")):
            if not np.any(ind & (dataset.treatment == arm)):
                raise ValueError(f"stratum {v!r} has no {word} units")
        p = ind.mean()
        scale = ind[:, None] / p
        b0 = (comps.phi0 * scale).mean(axis=0)
        b1 = (comps.phi1 * scale).mean(axis=0)
        b2 = (comps.phi2 * scale).mean(axis=0)
        if marginal_sd:
            var = overall.variance0
            sd = np.sqrt(var)
            gamma = (b1 - b0) / sd
            centered = scale * ((comps.phi1 - comps.phi0) - (b1 - b0))
            spread = comps.phi2 - overall.beta2 - 2.0 * overall.beta0 * (comps.phi0 - overall.beta0)
            eif = centered / sd - gamma * spread / (2.0 * var)
        else:
            local = MomentEstimates(b0, b1, b2)
            try:
                inf.check_variance(local, dataset.outcome_names)
            except DegenerateVarianceError as exc:
                raise DegenerateVarianceError(f"stratum {v!r}: {exc}") from None
            gamma = local.psi
            var = local.variance0
            bracket = (comps.phi1 - comps.phi0) / np.sqrt(var) - gamma * (
                comps.phi2 + b2 - 2.0 * b0 * comps.phi0
            ) / (2.0 * var)
            eif = scale * bracket
        tables.append(_wald(dataset.outcome_names, gamma, eif, alpha, n, "stratum"))
        props.append(p)
    return StratumEffects(strata, np.array(props), tuple(tables), marginal_sd, labels)


@dataclass(frozen=True)
class EffectSurface:
    """Regression-based gamma_k(v) and its optional linear projection.

    Attributes:
        points: m x q evaluation points.
        gamma: m x K surface values at ``points``.
        first_stage: 3 x (1 + q) x K coefficients for E(Y^0|V), E(Y^1|V), E{(Y^0)^2|V}.
        fitted: n x K surface values at the observed V.
        theta: (1 + q) x K coefficients of the least-squares projection of
            ``fitted`` on [1, V] (None when not requested).
        theta_se: delta-method standard errors of ``theta``.
        residuals: n x K projection residuals.
    """

    points: np.ndarray
    gamma: np.ndarray
    first_stage: np.ndarray
    fitted: np.ndarray
    theta: np.ndarray | None
    theta_se: np.ndarray | None
    residuals: np.ndarray | None


def _surface(design: np.ndarray, coefs: np.ndarray, points_label) -> np.ndarray:
    m0, m1, m2 = (design @ coefs[j] for j in range(3))
    var = m2 - m0**2
    bad = np.nonzero(~(var > inf.VARIANCE_FLOOR))
    if bad[0].size:
        raise DegenerateVarianceError(
            f"degenerate fitted control variance at v = {points_label[bad[0][0]]!r}"
        )
    return (m1 - m0) / np.sqrt(var)


def estimate_effect_modification_regression(
    dataset: Dataset, fits: NuisanceFits, v_columns, at=None, project: bool = True
) -> EffectSurface:
    """Effect modification by continuous V via linear regressions of the pseudo-outcomes.

    The three pseudo-outcomes are regressed on V, their predictions combined
    into the ratio gamma_k(v), and (optionally) the fitted ratio at the
    observed V projected onto a linear model in v by least squares.
    """
    if isinstance(v_columns, str):
        v_columns = [v_columns]
    v = dataset.columns(v_columns)
    n, q = v.shape
    design = np.column_stack([np.ones(n), v])
    comps = inf.if_components(dataset, fits)
    coefs = np.stack(
        [fit_linear(v, c).coefficients for c in (comps.phi0, comps.phi1, comps.phi2)]
    )  # 3 x (1+q) x K
    fitted = _surface(design, coefs, [tuple(r) for r in v])
    if at is None:
        points = v
        gamma = fitted
    else:
        points = np.asarray(at, dtype=float).reshape(-1, q)
        gamma = _surface(np.column_stack([np.ones(len(points)), points]), coefs, [tuple(r) for r in points])

    theta = theta_se = resid = None
    if project:
        proj = np.linalg.lstsq(design, fitted, rcond=None)[0]
        theta = proj
        resid = fitted - design @ proj
        theta_se = _projection_se(design, comps, coefs)
    return EffectSurface(points, gamma, coefs, fitted, theta, theta_se, resid)


def _projection_se(design: np.ndarray, comps, coefs: np.ndarray) -> np.ndarray:
    """Delta-method SEs of the projected coefficients, first-stage uncertainty only."""
    n, d = design.shape
    gram_inv = np.linalg.inv(design.T @ design / n)
    proj = np.linalg.solve(design.T @ design, design.T)  # d x n
    K = coefs.shape[2]
    se = np.empty((d, K))
    pseudo = (comps.phi0, comps.phi1, comps.phi2)
    for k in range(K):
        m = [design @ coefs[j, :, k] for j in range(3)]
        var = m[2] - m[0] ** 2
        sd = np.sqrt(var)
        g = (m[1] - m[0]) / sd
        grads = (-1.0 / sd + g * m[0] / var, 1.0 / sd, -g / (2.0 * var))
        # per-unit influence of each first-stage coefficient vector: n x d
        ifs = [(design * (pseudo[j][:, k] - m[j])[:, None]) @ gram_inv for j in range(3)]
        # Jacobian of theta wrt first-stage coefficients j: d x d
        jac = [proj @ (design * grads[j][:, None]) for j in range(3)]
        theta_if = sum(ifs[j] @ jac[j].T for j in range(3))
        se[:, k] = np.sqrt(np.diag(empirical_covariance(theta_if)) / n)
    return se


# ---------------------------------------------------------------------------
# weighted summaries


@dataclass(frozen=True)
class WeightFunction:
    """Nonnegative weights w_k(v), keyed by (outcome name, stratum value).

    Pairs missing from ``table`` get ``default``.
    """

    table: Mapping = field(default_factory=dict)
    default: float = 0.0

    def __post_init__(self):
        for key, w in self.table.items():
            if not (math.isfinite(w) and w >= 0):
                raise ValueError(f"weight for {key!r} must be finite and nonnegative, got {w}")
        if not (math.isfinite(self.default) and self.default >= 0):
            raise ValueError("default weight must be finite and nonnegative")

    @classmethod
    def uniform(cls, value: float = 1.0) -> "WeightFunction":
        return cls({}, value)

    @classmethod
    def selected_outcome(cls, outcome_names, strata) -> "WeightFunction":
        """w_k(v) = 1(v = k): stratum ``strata[k]`` selects outcome ``outcome_names[k]``."""
        return cls({(name, v): 1.0 for name, v in zip(outcome_names, strata)}, 0.0)

    def matrix(self, outcome_names, strata) -> np.ndarray:
        known = set(strata)
        for (name, v), w in self.table.items():
            if name not in outcome_names:
                raise ValueError(f"weights reference unknown outcome {name!r}")
            if v not in known and w > 0:
                raise ValueError(f"weights reference empty stratum {v!r}")
        return np.array(
            [[self.table.get((name, v), self.default) for name in outcome_names] for v in strata],
            dtype=float,
        )


@dataclass(frozen=True)
class SummaryEstimate:
    estimate: float
    std_error: float
    ci_lower: float
    ci_upper: float
    alpha: float
    influence: np.ndarray = field(repr=False)


def estimate_weighted_summary(
    dataset: Dataset,
    fits: NuisanceFits,
    stratum,
    weights: WeightFunction,
    alpha: float = 0.05,
) -> SummaryEstimate:
    """Weighted average over outcomes and strata of the stratum effects.

    The estimate is ``sum_v P_n(V=v) sum_k w_k(v) gamma_k(v)``.
    """
    mod = estimate_effect_modification(dataset, fits, stratum, alpha)
    w = weights.matrix(dataset.outcome_names, mod.strata)
    gamma = mod.gamma
    psi_star = float(mod.proportions @ np.sum(w * gamma, axis=1))
    eif = inf.eif_weighted(
        mod.labels,
        mod.strata,
        [t.influence.values for t in mod.tables],
        mod.proportions,
        gamma,
        w,
        psi_star,
    )
    se = math.sqrt(float(np.mean((eif - eif.mean()) ** 2)) / dataset.n)
    z = normal_quantile(1.0 - alpha / 2.0)
    return SummaryEstimate(psi_star, se, psi_star - z * se, psi_star + z * se, alpha, eif)


# ---------------------------------------------------------------------------
# bootstrap


def scaled_effect_statistic(config: NuisanceConfig) -> Callable[[Dataset], np.ndarray]:
    """Refit nuisances with ``config`` and return the scaled mean effects."""

    def stat(ds: Dataset) -> np.ndarray:
        fits = config.fit(ds)
        return estimate_moments(ds, fits).psi

    return stat


def bootstrap_replicates(dataset: Dataset, statistic: Callable[[Dataset], np.ndarray], B: int, seed: int) -> np.ndarray:
    """B x d matrix of the statistic over pairs-bootstrap resamples.

    Replicate b uses its own stream ``seeded_rng(seed, b)``; resamples with an
    empty arm are redrawn from the same stream, at most 10 times.
    """
    n = dataset.n
    out = []
    for b in range(B):
        rng = seeded_rng(seed, b)
        for _ in range(10):
            rows = rng.integers(0, n, size=n)
            a = dataset.treatment[rows]
            if a.min() == 0 and a.max() == 1:
                break
        else:
            raise RuntimeError(f"bootstrap replicate {b} drew an empty arm 10 times")
        out.append(np.atleast_1d(statistic(dataset.take(rows))))
    return np.vstack(out)


def bootstrap_covariance(dataset: Dataset, statistic, B: int = 1000, seed: int = 0, config: NuisanceConfig | None = None) -> np.ndarray:
    """n-scaled covariance of a statistic across pairs-bootstrap resamples.

    ``statistic`` is either a callable ``Dataset -> array`` (responsible for
    refitting its own nuisances) or the name ``"scaled-mean"`` together with a
    ``config``.
    """
    if B < 100:
        raise ValueError("bootstrap needs at least 100 replicates")
    if isinstance(statistic, str):
        if statistic != "scaled-mean":
            raise ValueError(f"unknown bootstrap statistic {statistic!r}")
        if config is None:
            raise ValueError("the named statistic needs a NuisanceConfig")
        statistic = scaled_effect_statistic(config)
    reps = bootstrap_replicates(dataset, statistic, B, seed)
    c = reps - reps.mean(axis=0)
    return dataset.n * (c.T @ c) / B
