"""Core data containers and input validation.

All containers are frozen dataclasses holding float64 numpy arrays. Arrays are
marked read-only on construction so instances can be shared between workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

Array = NDArray[np.float64]


class ValidationError(ValueError):
    """Raised when a dataset violates one or more input invariants.

    ``problems`` lists each violation as a human-readable string with the
    offending row/column location (rows are 1-based).
    """

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DegenerateVarianceError(ArithmeticError):
    """Estimated control-arm variance is not positive."""


def _frozen(a, dtype=np.float64, ndim: int | None = None) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Dataset:
    """n observations of covariates X, binary treatment A and K outcomes Y."""

    covariates: Array
    treatment: Array
    outcomes: Array
    covariate_names: tuple[str, ...]
    outcome_names: tuple[str, ...]

    def __post_init__(self):
        cov = np.asarray(self.covariates, dtype=np.float64)
        if cov.ndim == 1:
            cov = cov.reshape(-1, 0) if cov.size == 0 else cov[:, None]
        out = np.asarray(self.outcomes, dtype=np.float64)
        if out.ndim == 1:
            out = out[:, None]
        object.__setattr__(self, "covariates", _frozen(cov, ndim=2))
        object.__setattr__(self, "treatment", _frozen(self.treatment, ndim=1))
        object.__setattr__(self, "outcomes", _frozen(out, ndim=2))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        object.__setattr__(self, "outcome_names", tuple(self.outcome_names))
        n = self.treatment.shape[0]
        if self.covariates.shape[0] != n or self.outcomes.shape[0] != n:
            raise ValueError(
                f"row counts disagree: covariates {self.covariates.shape[0]}, "
                f"treatment {n}, outcomes {self.outcomes.shape[0]}"
            )
        if len(self.covariate_names) != self.covariates.shape[1]:
            raise ValueError("covariate_names length does not match covariate columns")
        if len(self.outcome_names) != self.outcomes.shape[1]:
            raise ValueError("outcome_names length does not match outcome columns")

    @classmethod
    def from_arrays(cls, covariates, treatment, outcomes, covariate_names=None, outcome_names=None):
        cov = np.asarray(covariates, dtype=np.float64)
        if cov.ndim == 1:
            cov = cov[:, None]
        out = np.asarray(outcomes, dtype=np.float64)
        if out.ndim == 1:
            out = out[:, None]
        if covariate_names is None:
            covariate_names = [f"x{j + 1}" for j in range(cov.shape[1])]
        if outcome_names is None:
            outcome_names = [f"y{k + 1}" for k in range(out.shape[1])]
        return cls(cov, np.asarray(treatment, dtype=np.float64), out, covariate_names, outcome_names)

    @property
    def n(self) -> int:
        return self.treatment.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def K(self) -> int:
        return self.outcomes.shape[1]

    def column(self, name: str) -> Array:
        """Return a covariate column by name."""
        try:
            return self.covariates[:, self.covariate_names.index(name)]
        except ValueError:
            raise KeyError(f"unknown covariate column {name!r}") from None

    def columns(self, names: Sequence[str]) -> Array:
        if not names:
            return np.empty((self.n, 0))
        idx = []
        for name in names:
            if name not in self.covariate_names:
                raise KeyError(f"unknown covariate column {name!r}")
            idx.append(self.covariate_names.index(name))
        return self.covariates[:, idx]

    def take(self, rows) -> "Dataset":
        """Row subset (or resample, with repeated indices)."""
        rows = np.asarray(rows)
        return Dataset(
            self.covariates[rows],
            self.treatment[rows],
            self.outcomes[rows],
            self.covariate_names,
            self.outcome_names,
        )

    def with_outcomes(self, outcomes, outcome_names=None) -> "Dataset":
        return Dataset(
            self.covariates,
            self.treatment,
            outcomes,
            self.covariate_names,
            self.outcome_names if outcome_names is None else outcome_names,
        )


def validate(dataset: Dataset) -> Dataset:
    """Check every dataset invariant and return the dataset unchanged.

    Raises:
        ValidationError: listing every violated invariant, not just the first.
    """
    problems: list[str] = []

    for block, names in (("covariate", dataset.covariate_names), ("outcome", dataset.outcome_names)):
        seen = set()
        for name in names:
            if name in seen:
                problems.append(f"duplicate {block} column name {name!r}")
            seen.add(name)

    a = dataset.treatment
    for block, mat, names in (
        ("covariate", dataset.covariates, dataset.covariate_names),
        ("outcome", dataset.outcomes, dataset.outcome_names),
    ):
        bad_r, bad_c = np.nonzero(~np.isfinite(mat))
        for r, c in zip(bad_r[:20], bad_c[:20]):
            kind = "missing" if np.isnan(mat[r, c]) else "non-finite"
            problems.append(f"{kind} {block} value at row {r + 1}, column {names[c]!r}")
        if bad_r.size > 20:
            problems.append(f"... {bad_r.size - 20} more non-finite {block} entries")

    bad_a = np.nonzero(~np.isfinite(a))[0]
    for r in bad_a[:20]:
        problems.append(f"missing treatment at row {r + 1}")
    non_binary = np.nonzero(np.isfinite(a) & (a != 0) & (a != 1))[0]
    for r in non_binary[:20]:
        problems.append(f"non-binary treatment at row {r + 1}")

    if dataset.n == 0:
        problems.append("empty dataset")
    else:
        if not np.any(a == 1):
            problems.append("empty treated arm")
        if not np.any(a == 0):
            problems.append("empty control arm")

    if problems:
        raise ValidationError(problems)
    return dataset


@dataclass(frozen=True)
class NuisanceFits:
    """Per-unit nuisance predictions.

    Attributes:
        propensity: pi(1 | X_i), already clipped to [clip, 1 - clip].
        mean0, mean1: n x K outcome regressions mu_k(X_i, a) for a = 0, 1.
        second_moment: n x K control-arm second moments eta_k(X_i, 0).
        cdf_grids: per-outcome sorted threshold grids (optional).
        cdf0, cdf1: per-outcome n x G conditional CDF surfaces nu_k(y | X_i, a).
    """

    propensity: Array
    mean0: Array
    mean1: Array
    second_moment: Array
    clip: float = 0.01
    cdf_grids: tuple | None = None
    cdf0: tuple | None = None
    cdf1: tuple | None = None

    def __post_init__(self):
        if not 0.0 <= self.clip < 0.5:
            raise ValueError("clip must lie in [0, 0.5)")
        pi = np.clip(np.asarray(self.propensity, dtype=np.float64), self.clip, 1.0 - self.clip)
        object.__setattr__(self, "propensity", _frozen(pi, ndim=1))
        for name in ("mean0", "mean1", "second_moment"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim == 1:
                arr = arr[:, None]
            object.__setattr__(self, name, _frozen(arr, ndim=2))
        if self.cdf_grids is not None:
            grids, c0, c1 = [], [], []
            for g, s0, s1 in zip(self.cdf_grids, self.cdf0, self.cdf1):
                grids.append(_frozen(g, ndim=1))
                c0.append(_frozen(monotone_cdf(s0), ndim=2))
                c1.append(_frozen(monotone_cdf(s1), ndim=2))
            object.__setattr__(self, "cdf_grids", tuple(grids))
            object.__setattr__(self, "cdf0", tuple(c0))
            object.__setattr__(self, "cdf1", tuple(c1))

    def arm_probability(self, a: int) -> Array:
        return self.propensity if a == 1 else 1.0 - self.propensity

    def mean(self, a: int) -> Array:
        return self.mean1 if a == 1 else self.mean0

    def cdf(self, k: int, a: int) -> Array:
        if self.cdf_grids is None:
            raise ValueError("no conditional CDF surface was fitted")
        return self.cdf1[k] if a == 1 else self.cdf0[k]


def monotone_cdf(values) -> Array:
    """Clamp to [0, 1] and take the running maximum along the last axis."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.maximum.accumulate(v, axis=-1)


@dataclass(frozen=True)
class MomentEstimates:
    """Doubly robust estimates of E(Y^0), E(Y^1) and E{(Y^0)^2}, one entry per outcome."""

    beta0: Array
    beta1: Array
    beta2: Array

    @property
    def variance0(self) -> Array:
        return self.beta2 - self.beta0**2

    @property
    def sd0(self) -> Array:
        return np.sqrt(self.variance0)

    @property
    def psi(self) -> Array:
        return (self.beta1 - self.beta0) / self.sd0


@dataclass(frozen=True)
class InfluenceMatrix:
    """n x K estimated influence-function values."""

    values: Array
    kind: str = "scaled-mean"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        object.__setattr__(self, "values", _frozen(v, ndim=2))


@dataclass(frozen=True)
class EffectTable:
    """Point estimates with Wald inference built from an influence matrix."""

    names: tuple[str, ...]
    estimates: Array
    std_errors: Array
    ci_lower: Array
    ci_upper: Array
    covariance: Array
    alpha: float
    n: int
    influence: InfluenceMatrix | None = field(default=None, repr=False)

    def rows(self):
        for i, name in enumerate(self.names):
            yield name, self.estimates[i], self.std_errors[i], self.ci_lower[i], self.ci_upper[i]
