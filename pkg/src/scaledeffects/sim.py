"""Simulation study: the four-outcome DGP, Kang-Schafer misspecification and replication summaries."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .estimate import estimate_scaled_effects
from .mathkit import seeded_rng
from .model import Dataset, DegenerateVarianceError
from .nuisance import ModelSpec, Oracle, fit_nuisances
from .testing import homogeneity_test

log = logging.getLogger(__name__)

K = 4
SCENARIOS = ("both", "trt", "out", "none")

# row k-1 gives the coefficients of x1..x4 in mu_k(x, a) / k
_SIGNS = np.array(
    [
        [0.0, 1.0, -1.0, 1.0],
        [1.0, 0.0, 1.0, -1.0],
        [-1.0, 1.0, 0.0, 1.0],
        [1.0, -1.0, 1.0, 0.0],
    ]
)
_PS_COEF = np.array([2.0, -4.0, 2.0, -1.0]) / 4.0
_KS = np.arange(1, K + 1, dtype=float)


def expit(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def true_propensity(x) -> np.ndarray:
    return expit(np.asarray(x) @ _PS_COEF)


def true_mean(x, a, lam: float = 2.0) -> np.ndarray:
    """n x 4 matrix of mu_k(x, a)."""
    x = np.asarray(x, dtype=float)
    a = np.broadcast_to(np.asarray(a, dtype=float), (x.shape[0],))
    return (x @ _SIGNS.T) * _KS + 2.0 * (_KS - lam) * a[:, None]


def true_second_moment(x, a, lam: float = 2.0) -> np.ndarray:
    return true_mean(x, a, lam) ** 2 + _KS**2


def true_psi(lam: float = 2.0) -> np.ndarray:
    """Scaled effects implied by the DGP: 2(k - lam) / (2k)."""
    return (_KS - lam) / _KS


def generate_dataset(n: int, lam: float = 2.0, rng: np.random.Generator | int = 0) -> Dataset:
    """Draw n units: X ~ N(0, I_4), A | X logistic, Y_k | X, A ~ N(mu_k, k^2)."""
    if not isinstance(rng, np.random.Generator):
        rng = seeded_rng(int(rng), 0)
    x = rng.standard_normal((n, 4))
    a = (rng.random(n) < true_propensity(x)).astype(float)
    y = true_mean(x, a, lam) + rng.standard_normal((n, K)) * _KS
    return Dataset(x, a, y, ("x1", "x2", "x3", "x4"), tuple(f"y{k}" for k in range(1, K + 1)))


def misspecify_covariates(x) -> np.ndarray:
    """Kang-Schafer transforms of the four covariates."""
    x = np.asarray(x, dtype=float)
    x1, x2, x3, x4 = x.T
    return np.column_stack(
        [
            np.exp(x1 / 2.0),
            10.0 + x2 / (1.0 + np.exp(x1)),
            (0.6 + x1 * x3 / 25.0) ** 3,
            (x2 + x4 + 20.0) ** 2,
        ]
    )


def build_features(x_true, x_miss, correct: str):
    """Propensity, outcome-mean and second-moment feature blocks for a scenario.

    The second-moment block is the outcome block plus its squares and pairwise
    products (14 columns).
    """
    if correct not in SCENARIOS:
        raise ValueError(f"correct must be one of {SCENARIOS}, got {correct!r}")
    prop = x_true if correct in ("both", "trt") else x_miss
    mean = x_true if correct in ("both", "out") else x_miss
    prods = [mean[:, i] * mean[:, j] for i in range(4) for j in range(i + 1, 4)]
    quad = np.column_stack([mean, mean**2, *prods])
    return prop, mean, quad


PS_FEATURES = tuple(f"gx{j}" for j in range(1, 5))
MEAN_FEATURES = tuple(f"qx{j}" for j in range(1, 5))
SQUARE_FEATURES = tuple(f"q2x{j}" for j in range(1, 11))
QUAD_FEATURES = MEAN_FEATURES + SQUARE_FEATURES


def sim_specs(eta_linear_terms: bool = False) -> tuple[ModelSpec, ...]:
    """Working models for the simulation.

    The second-moment model uses the 10 squares and pairwise products; with
    ``eta_linear_terms`` the 4 linear terms are added as well.
    """
    return (
        ModelSpec("propensity", PS_FEATURES),
        ModelSpec("mean", MEAN_FEATURES),
        ModelSpec("second_moment", QUAD_FEATURES if eta_linear_terms else SQUARE_FEATURES),
    )


def scenario_dataset(data: Dataset, correct: str) -> Dataset:
    """Replace the covariates by the scenario's working-model features (see :func:`sim_specs`)."""
    x = data.covariates
    prop, mean, quad = build_features(x, misspecify_covariates(x), correct)
    feats = np.column_stack([prop, mean, quad[:, 4:]])
    return Dataset(feats, data.treatment, data.outcomes, PS_FEATURES + QUAD_FEATURES, data.outcome_names)


def oracle(lam: float = 2.0) -> Oracle:
    """True nuisance functions, evaluated on a dataset carrying columns x1..x4."""

    def _x(ds: Dataset):
        return ds.columns(("x1", "x2", "x3", "x4"))

    return Oracle(
        propensity=lambda ds: true_propensity(_x(ds)),
        mean=lambda ds, a: true_mean(_x(ds), a, lam),
        second_moment=lambda ds: true_second_moment(_x(ds), 0.0, lam),
    )


@dataclass(frozen=True)
class SimScenario:
    n: int
    n_sim: int = 1000
    lam: float = 2.0
    correct: str = "both"
    master_seed: int = 0
    clip: float = 0.01
    alpha: float = 0.05
    eta_linear_terms: bool = False

    def __post_init__(self):
        if self.correct not in SCENARIOS:
            raise ValueError(f"correct must be one of {SCENARIOS}, got {self.correct!r}")
        if self.n < 10 or self.n_sim < 1:
            raise ValueError("need n >= 10 and n_sim >= 1")


@dataclass(frozen=True)
class SimSummary:
    """Per-outcome accuracy summaries across replicates.

    ``rmse`` is scaled by sqrt(n); ``coverage`` and ``rejection_rate`` are
    proportions in [0, 1].
    """

    scenario: SimScenario
    truth: np.ndarray
    bias: np.ndarray
    sd: np.ndarray
    median_se: np.ndarray
    rmse: np.ndarray
    coverage: np.ndarray
    rejection_rate: float
    n_ok: int
    n_failed: int
    estimates: np.ndarray = field(repr=False)
    std_errors: np.ndarray = field(repr=False)
    p_values: np.ndarray = field(repr=False)

    def as_dict(self) -> dict:
        return {
            "scenario": asdict(self.scenario),
            "truth": self.truth.tolist(),
            "bias": self.bias.tolist(),
            "sd": self.sd.tolist(),
            "median_se": self.median_se.tolist(),
            "rmse": self.rmse.tolist(),
            "coverage": self.coverage.tolist(),
            "rejection_rate": self.rejection_rate,
            "n_ok": self.n_ok,
            "n_failed": self.n_failed,
        }


def run_replicate(scenario: SimScenario, index: int):
    """One replicate: estimates, SEs and homogeneity p-value (NaNs on failure)."""
    rng = seeded_rng(scenario.master_seed, index)
    data = generate_dataset(scenario.n, scenario.lam, rng)
    ds = scenario_dataset(data, scenario.correct)
    try:
        fits = fit_nuisances(ds, sim_specs(scenario.eta_linear_terms), clip=scenario.clip)
        table = estimate_scaled_effects(ds, fits, scenario.alpha)
        test = homogeneity_test(table.estimates, table.covariance, ds.n)
    except (DegenerateVarianceError, np.linalg.LinAlgError, ValueError) as exc:
        log.debug("replicate %d failed: %s", index, exc)
        nan = np.full(K, np.nan)
        return nan, nan, np.nan
    return table.estimates, table.std_errors, test.p_value


def _run_chunk(args):
    scenario, indices = args
    return [run_replicate(scenario, i) for i in indices]


def run_replications(scenario: SimScenario, workers: int = 1, max_failure_rate: float = 0.01) -> SimSummary:
    """Run ``scenario.n_sim`` replicates and summarize them.

    Replicate i always uses stream i of the master seed, so the summary does
    not depend on ``workers``. Failed replicates are dropped and counted; more
    than ``max_failure_rate`` of them raises RuntimeError.
    """
    idx = list(range(scenario.n_sim))
    if workers > 1:
        chunks = [(scenario, idx[w::workers]) for w in range(workers)]
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_run_chunk, chunks))
        results = [None] * scenario.n_sim
        for w, part in enumerate(parts):
            for i, r in zip(idx[w::workers], part):
                results[i] = r
    else:
        results = [run_replicate(scenario, i) for i in idx]

    est = np.vstack([r[0] for r in results])
    se = np.vstack([r[1] for r in results])
    pv = np.array([r[2] for r in results])
    ok = np.all(np.isfinite(est), axis=1) & np.all(np.isfinite(se), axis=1) & np.isfinite(pv)
    n_failed = int((~ok).sum())
    if n_failed > max_failure_rate * scenario.n_sim:
        raise RuntimeError(f"{n_failed} of {scenario.n_sim} replicates failed")
    return summarize(scenario, est[ok], se[ok], pv[ok], n_failed)


def summarize(scenario: SimScenario, est, se, pv, n_failed: int = 0) -> SimSummary:
    """Bias, SD, median SE, sqrt(n)-scaled RMSE, Wald coverage and rejection rate."""
    truth = true_psi(scenario.lam)
    err = est - truth
    z = 1.96
    covered = (est - z * se < truth) & (est + z * se > truth)
    return SimSummary(
        scenario=scenario,
        truth=truth,
        bias=err.mean(axis=0),
        sd=est.std(axis=0, ddof=1) if len(est) > 1 else np.zeros(K),
        median_se=np.median(se, axis=0),
        rmse=np.sqrt(scenario.n * np.mean(err**2, axis=0)),
        coverage=covered.mean(axis=0),
        rejection_rate=float(np.mean(pv <= scenario.alpha)),
        n_ok=int(len(est)),
        n_failed=n_failed,
        estimates=est,
        std_errors=se,
        p_values=pv,
    )
