"""Nuisance regressions: propensity, outcome means, second moments and CDF surfaces.

The built-in engines are ordinary/weighted least squares and logistic
regression by IRLS. Callers can bypass fitting with plug-in oracle functions,
and can request K-fold cross-fitting.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .mathkit import seeded_rng
from .model import Dataset, NuisanceFits

log = logging.getLogger(__name__)

TARGETS = ("propensity", "mean", "second_moment", "cdf")
_DEFAULT_FAMILY = {"propensity": "logistic", "cdf": "logistic", "mean": "linear", "second_moment": "linear"}


@dataclass(frozen=True)
class FitResult:
    """Coefficients (intercept first) and convergence diagnostics of one fit."""

    coefficients: np.ndarray
    converged: bool
    iterations: int
    deviance: float
    ridge: bool = False
    collinear: tuple[int, ...] = ()

    def predict(self, design) -> np.ndarray:
        x = _as_design(design)
        return self.coefficients[0] + x @ self.coefficients[1:]

    def predict_proba(self, design) -> np.ndarray:
        return _expit(self.predict(design))


def _as_design(design) -> np.ndarray:
    x = np.asarray(design, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return x


def _expit(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def fit_linear(design, response, weights=None) -> FitResult:
    """Weighted least squares with an intercept.

    ``response`` may be an n-vector or an n x m matrix (m responses fitted at
    once; coefficients are then (1 + q) x m). Rank-deficient designs fall back
    to a ridge penalty of 1e-8 on the standardized non-intercept columns.
    """
    x = _as_design(design)
    y = np.asarray(response, dtype=np.float64)
    n, q = x.shape
    if y.shape[0] != n:
        raise ValueError(f"design has {n} rows but response has {y.shape[0]}")
    if n == 0:
        raise ValueError("cannot fit a regression on zero rows")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")

    # center and scale columns so the rank check is scale-free
    sw = w.sum()
    center = (w @ x) / sw if q else np.zeros(0)
    xc = x - center
    scale = np.sqrt((w @ xc**2) / sw) if q else np.zeros(0)
    const_cols = np.nonzero(scale <= 1e-12 * (1.0 + np.abs(center)))[0]
    safe_scale = np.where(scale > 0, scale, 1.0)
    xs = xc / safe_scale
    root_w = np.sqrt(w)
    a = np.column_stack([np.ones(n), xs]) * root_w[:, None]
    yw = (y.T * root_w).T

    ridge = False
    collinear: tuple[int, ...] = ()
    gram = a.T @ a
    sv = np.linalg.svd(a, compute_uv=False) if q else np.array([1.0])
    if n <= q or sv[-1] <= 1e-10 * sv[0] or const_cols.size:
        ridge = True
        collinear = _collinear_columns(xs, const_cols)
        penalty = np.full(q + 1, 1e-8 * sw)
        penalty[0] = 0.0
        coef_s = np.linalg.solve(gram + np.diag(penalty), a.T @ yw)
        if collinear:
            log.debug("ridge fallback for collinear design columns %s", collinear)
    else:
        coef_s = np.linalg.lstsq(a, yw, rcond=None)[0]
    if not np.all(np.isfinite(coef_s)):
        raise np.linalg.LinAlgError(f"linear fit failed; collinear columns {collinear}")

    slopes = (coef_s[1:].T / safe_scale).T
    intercept = coef_s[0] - center @ slopes
    coef = np.concatenate([np.atleast_1d(intercept)[None, ...], slopes]) if y.ndim > 1 else np.concatenate([[intercept], slopes])
    resid = y - (coef[0] + x @ coef[1:])
    rss = float(np.sum((resid.T**2) @ w)) if y.ndim > 1 else float(w @ resid**2)
    return FitResult(coef, True, 1, rss, ridge, collinear)


def _collinear_columns(xs: np.ndarray, const_cols) -> tuple[int, ...]:
    if xs.shape[1] == 0:
        return ()
    bad = set(int(c) for c in const_cols)
    _, s, vt = np.linalg.svd(xs, full_matrices=False)
    null = vt[s <= 1e-10 * max(s[0], 1e-300)]
    for row in null:
        bad.update(int(j) for j in np.nonzero(np.abs(row) > 1e-6)[0])
    return tuple(sorted(bad))


def fit_logistic(design, response, weights=None, max_iter: int = 100, tol: float = 1e-8) -> FitResult:
    """Logistic regression by iteratively reweighted least squares.

    Iterates Newton steps until the largest absolute score component is below
    ``tol`` (and the step has settled), or ``max_iter`` is reached. Complete
    or quasi-complete separation ends at the cap with ``converged=False``.

    Raises:
        ValueError: if the response does not contain both classes.
    """
    x = _as_design(design)
    y = np.asarray(response, dtype=np.float64)
    n, q = x.shape
    if y.shape != (n,):
        raise ValueError("response must be an n-vector")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("logistic response must be 0/1")
    w0 = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    ybar = float(w0 @ y / w0.sum())
    if ybar <= 0.0 or ybar >= 1.0:
        raise ValueError("logistic response contains a single class")

    if q == 0:
        b = math.log(ybar / (1.0 - ybar))
        dev = -2.0 * float(w0 @ (y * math.log(ybar) + (1 - y) * math.log1p(-ybar)))
        return FitResult(np.array([b]), True, 0, dev)

    center = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 1e-12 * (1.0 + np.abs(center)), scale, 1.0)
    a = np.column_stack([np.ones(n), (x - center) / scale])
    beta = np.zeros(q + 1)
    beta[0] = math.log(ybar / (1.0 - ybar))
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = a @ beta
        p = _expit(eta)
        r = y - p
        raw_score = np.concatenate([[w0 @ r], (w0 * r) @ x])
        var = np.maximum(p * (1.0 - p), 1e-12) * w0
        hess = (a.T * var) @ a
        step = np.linalg.lstsq(hess, a.T @ (w0 * r), rcond=None)[0]
        beta = beta + step
        if np.max(np.abs(raw_score)) < tol and np.max(np.abs(step)) < 1e-6 * (1.0 + np.max(np.abs(beta))):
            converged = True
            break

    slopes = beta[1:] / scale
    coef = np.concatenate([[beta[0] - center @ slopes], slopes])
    p = np.clip(_expit(a @ beta), 1e-300, 1 - 1e-16)
    dev = -2.0 * float(w0 @ (y * np.log(p) + (1 - y) * np.log1p(-p)))
    if not converged:
        log.debug("IRLS did not converge in %d iterations (possible separation)", max_iter)
    return FitResult(coef, converged, it, dev)


@dataclass(frozen=True)
class ModelSpec:
    """Working model for one nuisance target.

    ``outcome=None`` makes the spec apply to every outcome without a more
    specific entry. ``features`` are covariate column names of the dataset.
    """

    target: str
    features: tuple[str, ...] = ()
    family: str | None = None
    outcome: str | None = None

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"unknown nuisance target {self.target!r}")
        object.__setattr__(self, "features", tuple(self.features))
        if self.family is None:
            object.__setattr__(self, "family", _DEFAULT_FAMILY[self.target])
        if self.family not in ("linear", "logistic"):
            raise ValueError(f"unknown model family {self.family!r}")


def default_specs(features: Sequence[str], eta_features: Sequence[str] | None = None) -> list[ModelSpec]:
    """Same feature list for every target; second moments may use their own."""
    feats = tuple(features)
    return [
        ModelSpec("propensity", feats),
        ModelSpec("mean", feats),
        ModelSpec("second_moment", feats if eta_features is None else tuple(eta_features)),
        ModelSpec("cdf", feats),
    ]


def _resolve(specs: Sequence[ModelSpec], target: str, outcome: str | None) -> ModelSpec:
    generic = None
    for s in specs:
        if s.target != target:
            continue
        if outcome is not None and s.outcome == outcome:
            return s
        if s.outcome is None:
            generic = s
    if generic is None:
        where = f" for outcome {outcome!r}" if outcome else ""
        raise ValueError(f"no {target} model specified{where}")
    return generic


@dataclass(frozen=True)
class Oracle:
    """Plug-in nuisance functions evaluated on a dataset.

    Any callable left as None is fitted instead.

    Signatures:
        propensity(ds) -> n-vector of pi(1 | X)
        mean(ds, a) -> n x K matrix of mu_k(X, a)
        second_moment(ds) -> n x K matrix of eta_k(X, 0)
        cdf(ds, k, a, grid) -> n x G matrix of nu_k(y | X, a)
    """

    propensity: Callable | None = None
    mean: Callable | None = None
    second_moment: Callable | None = None
    cdf: Callable | None = None


def default_grid(y, size: int = 101) -> np.ndarray:
    """Sorted unique empirical quantiles of ``y`` at ``size`` equally spaced levels."""
    levels = np.linspace(0.0, 1.0, size)
    return np.unique(np.quantile(np.asarray(y, dtype=float), levels, method="inverted_cdf"))


def fit_cdf_surface(dataset: Dataset, k: int, grid, a: int, spec: ModelSpec,
                    train: np.ndarray | None = None, predict_on: Dataset | None = None) -> np.ndarray:
    """Distribution regression of 1(Y_k <= y) within arm ``a``, one logistic fit per grid point.

    Returns an n x G matrix monotonized along the grid. Grid points where the
    indicator is constant in the training arm short-circuit to 0 or 1.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("grid must be a nonempty 1-d array")
    if np.any(np.diff(grid) < 0):
        raise ValueError("grid must be sorted ascending")
    target = dataset if predict_on is None else predict_on
    rows = (dataset.treatment == a) if train is None else train & (dataset.treatment == a)
    x_tr = dataset.columns(spec.features)[rows]
    y_tr = dataset.outcomes[rows, k]
    if y_tr.size == 0:
        raise ValueError(f"arm {a} has no units to fit the CDF surface")
    x_pr = target.columns(spec.features)
    out = np.empty((target.n, grid.size))
    ys = np.sort(y_tr)
    counts = np.searchsorted(ys, grid, side="right")
    for g, y in enumerate(grid):
        if counts[g] == 0:
            out[:, g] = 0.0
        elif counts[g] == ys.size:
            out[:, g] = 1.0
        else:
            fit = fit_logistic(x_tr, (y_tr <= y).astype(float))
            out[:, g] = fit.predict_proba(x_pr)
    return np.maximum.accumulate(np.clip(out, 0.0, 1.0), axis=1)


def _fit_block(dataset: Dataset, specs, train: np.ndarray, predict: Dataset, want_cdf: bool, grids):
    """Fit every nuisance on the ``train`` rows of ``dataset`` and predict on ``predict``."""
    a = dataset.treatment
    names = dataset.outcome_names
    K = dataset.K
    m = predict.n

    ps = _resolve(specs, "propensity", None)
    x_ps = dataset.columns(ps.features)[train]
    if ps.family == "logistic":
        fit = fit_logistic(x_ps, a[train])
        prop = fit.predict_proba(predict.columns(ps.features))
    else:
        prop = fit_linear(x_ps, a[train]).predict(predict.columns(ps.features))

    means = {0: np.empty((m, K)), 1: np.empty((m, K))}
    eta = np.empty((m, K))
    for target in ("mean", "second_moment"):
        arms = (0, 1) if target == "mean" else (0,)
        groups: dict[tuple, list[int]] = {}
        for k, name in enumerate(names):
            s = _resolve(specs, target, name)
            groups.setdefault((s.features, s.family), []).append(k)
        for (feats, family), ks in groups.items():
            x_all = dataset.columns(feats)
            x_new = predict.columns(feats)
            for arm in arms:
                rows = train & (a == arm)
                if not rows.any():
                    raise ValueError(f"training fold has an empty arm {arm}")
                yy = dataset.outcomes[np.ix_(rows, ks)]
                if target == "second_moment":
                    yy = yy**2
                if family == "linear":
                    fit = fit_linear(x_all[rows], yy)
                    pred = fit.coefficients[0] + x_new @ fit.coefficients[1:]
                else:
                    pred = np.column_stack(
                        [fit_logistic(x_all[rows], yy[:, j]).predict_proba(x_new) for j in range(len(ks))]
                    )
                if target == "mean":
                    means[arm][:, ks] = pred
                else:
                    eta[:, ks] = pred

    cdf0 = cdf1 = None
    if want_cdf:
        cdf0, cdf1 = [], []
        for k, name in enumerate(names):
            s = _resolve(specs, "cdf", name)
            cdf0.append(fit_cdf_surface(dataset, k, grids[k], 0, s, train=train, predict_on=predict))
            cdf1.append(fit_cdf_surface(dataset, k, grids[k], 1, s, train=train, predict_on=predict))
    return prop, means[0], means[1], eta, cdf0, cdf1


def fit_nuisances(
    dataset: Dataset,
    specs: Sequence[ModelSpec] = (),
    clip: float = 0.01,
    cross_fit_folds: int | None = None,
    oracle: Oracle | None = None,
    cdf: bool = False,
    grid_size: int = 101,
    grids: Sequence | None = None,
    seed: int = 0,
) -> NuisanceFits:
    """Fit (or plug in) all nuisance functions and return per-unit predictions.

    Outcome means are fitted separately within each arm and predicted for all
    units; second moments are fitted to Y_k^2 on the control arm. With
    ``cross_fit_folds`` each unit is predicted from models trained on the other
    folds. Oracle callables, when given, replace the corresponding fits.
    """
    n, K = dataset.n, dataset.K
    if cdf and grids is None:
        grids = [default_grid(dataset.outcomes[:, k], grid_size) for k in range(K)]
    oracle = oracle or Oracle()
    need_fit = (
        oracle.propensity is None
        or oracle.mean is None
        or oracle.second_moment is None
        or (cdf and oracle.cdf is None)
    )

    if need_fit:
        if cross_fit_folds is None:
            parts = [(np.ones(n, bool), np.arange(n))]
        else:
            folds = int(cross_fit_folds)
            if folds < 2 or folds > n:
                raise ValueError("cross_fit_folds must lie in [2, n]")
            perm = seeded_rng(seed, 0).permutation(n)
            label = np.empty(n, int)
            label[perm] = np.arange(n) % folds
            parts = [(label != f, np.nonzero(label == f)[0]) for f in range(folds)]
        prop = np.empty(n)
        m0, m1, eta = np.empty((n, K)), np.empty((n, K)), np.empty((n, K))
        c0 = [np.empty((n, len(g))) for g in grids] if cdf else None
        c1 = [np.empty((n, len(g))) for g in grids] if cdf else None
        for train, test in parts:
            for arm in (0, 1):
                if not np.any(train & (dataset.treatment == arm)):
                    raise ValueError(f"a cross-fitting fold leaves arm {arm} empty")
            block = _fit_block(dataset, specs, train, dataset.take(test), cdf and oracle.cdf is None, grids)
            prop[test], m0[test], m1[test], eta[test] = block[:4]
            if cdf and oracle.cdf is None:
                for k in range(K):
                    c0[k][test] = block[4][k]
                    c1[k][test] = block[5][k]
    else:
        prop = m0 = m1 = eta = c0 = c1 = None

    if oracle.propensity is not None:
        prop = np.asarray(oracle.propensity(dataset), dtype=float)
    if oracle.mean is not None:
        m0 = np.asarray(oracle.mean(dataset, 0), dtype=float)
        m1 = np.asarray(oracle.mean(dataset, 1), dtype=float)
    if oracle.second_moment is not None:
        eta = np.asarray(oracle.second_moment(dataset), dtype=float)
    if cdf and oracle.cdf is not None:
        c0 = [np.asarray(oracle.cdf(dataset, k, 0, grids[k]), dtype=float) for k in range(K)]
        c1 = [np.asarray(oracle.cdf(dataset, k, 1, grids[k]), dtype=float) for k in range(K)]

    return NuisanceFits(
        propensity=prop,
        mean0=m0,
        mean1=m1,
        second_moment=eta,
        clip=clip,
        cdf_grids=tuple(grids) if cdf else None,
        cdf0=tuple(c0) if cdf else None,
        cdf1=tuple(c1) if cdf else None,
    )


@dataclass(frozen=True)
class NuisanceConfig:
    """Everything needed to refit nuisances on a new (e.g. resampled) dataset."""

    specs: tuple[ModelSpec, ...] = field(default_factory=tuple)
    clip: float = 0.01
    folds: int | None = None
    oracle: Oracle | None = None
    grid_size: int = 101
    seed: int = 0

    def fit(self, dataset: Dataset, cdf: bool = False, grids=None) -> NuisanceFits:
        return fit_nuisances(
            dataset,
            self.specs,
            clip=self.clip,
            cross_fit_folds=self.folds,
            oracle=self.oracle,
            cdf=cdf,
            grid_size=self.grid_size,
            grids=grids,
            seed=self.seed,
        )
