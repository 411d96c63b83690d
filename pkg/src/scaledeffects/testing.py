"""Homogeneity test across outcomes and pairwise comparisons with multiplicity control."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .mathkit import chisq_upper_tail, pseudo_inverse, symmetric

log = logging.getLogger(__name__)


def contrast_matrix(K: int) -> np.ndarray:
    """(K-1) x K banded matrix of adjacent differences, C_ij = 1(i=j) - 1(i=j-1)."""
    if K < 2:
        raise ValueError("contrast matrix needs K >= 2")
    c = np.zeros((K - 1, K))
    idx = np.arange(K - 1)
    c[idx, idx] = 1.0
    c[idx, idx + 1] = -1.0
    return c


@dataclass(frozen=True)
class TestResult:
    statistic: float
    df: int
    p_value: float
    covariance_source: str = "closed-form"
    pseudo_inverse: bool = False

    __test__ = False  # not a pytest class


def homogeneity_test(psi_hat, sigma_hat, n: int, contrast=None, covariance_source: str = "closed-form") -> TestResult:
    """Wald test that all K scaled effects are equal.

    ``T_n = n (C psi)' (C Sigma C')^{-1} (C psi)``, referred to chi^2 with
    K - 1 degrees of freedom. If ``C Sigma C'`` is numerically singular an
    eigenvalue-thresholded pseudo-inverse is used, the degrees of freedom drop
    to its rank and ``pseudo_inverse`` is set on the result.
    """
    psi = np.asarray(psi_hat, dtype=float)
    K = psi.size
    c = contrast_matrix(K) if contrast is None else np.asarray(contrast, dtype=float)
    sigma = symmetric(sigma_hat)
    cpsi = c @ psi
    middle = symmetric(c @ sigma @ c.T, tol=1e-9)
    inv, rank = pseudo_inverse(middle)
    flagged = rank < c.shape[0]
    if rank == 0:
        # identical outcomes: no contrast varies, so only exact equality is testable
        if np.all(np.abs(cpsi) <= 1e-12 * max(1.0, float(np.max(np.abs(psi))))):
            log.warning("contrast covariance is zero and all effects coincide; T_n = 0")
            return TestResult(0.0, 0, 1.0, covariance_source, True)
        raise np.linalg.LinAlgError("contrast covariance is zero; homogeneity test undefined")
    if flagged:
        log.warning("contrast covariance is singular; using pseudo-inverse with df=%d", rank)
    stat = float(n * cpsi @ inv @ cpsi)
    stat = max(stat, 0.0)
    return TestResult(stat, rank, chisq_upper_tail(stat, rank), covariance_source, flagged)


def bonferroni(p_values) -> np.ndarray:
    p = np.asarray(p_values, dtype=float)
    return np.minimum(p * p.size, 1.0)


def benjamini_hochberg(p_values) -> np.ndarray:
    """Step-up adjusted p-values; reject where adjusted p <= alpha."""
    p = np.asarray(p_values, dtype=float)
    m = p.size
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adj_sorted = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(adj_sorted, 1.0)
    return out


@dataclass(frozen=True)
class PairwiseResult:
    pairs: tuple[tuple[int, int], ...]
    statistics: np.ndarray
    p_values: np.ndarray
    adjusted: np.ndarray
    reject: np.ndarray
    correction: str
    alpha: float


def pairwise_tests(psi_hat, sigma_hat, n: int, correction: str = "bonferroni", alpha: float = 0.05) -> PairwiseResult:
    """Wald tests of psi_j = psi_k for every pair j < k, with multiplicity adjustment."""
    psi = np.asarray(psi_hat, dtype=float)
    sigma = symmetric(sigma_hat)
    K = psi.size
    if K < 2:
        raise ValueError("pairwise tests need K >= 2")
    pairs = tuple((j, k) for j in range(K) for k in range(j + 1, K))
    stats, pvals = [], []
    for j, k in pairs:
        var = sigma[j, j] + sigma[k, k] - 2.0 * sigma[j, k]
        diff = psi[j] - psi[k]
        if not var > 1e-14 * max(1.0, sigma[j, j] + sigma[k, k]):
            if diff == 0.0:
                stats.append(0.0)
                pvals.append(1.0)
                continue
            raise ValueError(f"zero contrast variance for pair ({j}, {k})")
        t = n * diff * diff / var
        stats.append(t)
        pvals.append(chisq_upper_tail(t, 1))
    pvals = np.array(pvals)
    key = correction.lower().replace("_", "-")
    if key == "bonferroni":
        adj = bonferroni(pvals)
    elif key in ("bh", "benjamini-hochberg", "fdr"):
        adj = benjamini_hochberg(pvals)
        key = "benjamini-hochberg"
    else:
        raise ValueError(f"unknown correction {correction!r}")
    return PairwiseResult(pairs, np.array(stats), pvals, adj, adj <= alpha, key, alpha)
