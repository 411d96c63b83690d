"""Distribution functions, small dense linear algebra and seeded random streams."""

from __future__ import annotations

import math

import numpy as np

_SQRT2 = math.sqrt(2.0)
_EPS = 1e-16
_TINY = 1e-300


def normal_cdf(x):
    """Standard normal CDF, accurate to double precision via erfc."""
    if np.ndim(x) == 0:
        return 0.5 * math.erfc(-float(x) / _SQRT2)
    return 0.5 * np.vectorize(math.erfc, otypes=[float])(-np.asarray(x, dtype=float) / _SQRT2)


# Acklam's rational approximation, refined below by Halley steps.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)


def _quantile_scalar(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError(f"normal_quantile requires p in (0, 1), got {p}")
    lo = 0.02425
    if p < lo:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    elif p > 1.0 - lo:
        q = math.sqrt(-2.0 * math.log1p(-p))
        x = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    else:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / (
            ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)
    for _ in range(2):
        # residual computed on the tail that keeps precision
        if x < 0:
            e = 0.5 * math.erfc(-x / _SQRT2) - p
        else:
            e = (1.0 - p) - 0.5 * math.erfc(x / _SQRT2)
        u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
        x = x - u / (1.0 + 0.5 * x * u)
    return x


def normal_quantile(p):
    """Inverse of :func:`normal_cdf`."""
    if np.ndim(p) == 0:
        return _quantile_scalar(float(p))
    return np.vectorize(_quantile_scalar, otypes=[float])(np.asarray(p, dtype=float))


def _gamma_series(a: float, x: float) -> float:
    # lower regularized P(a, x)
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(10000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_continued_fraction(a: float, x: float) -> float:
    # upper regularized Q(a, x), modified Lentz
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, 10000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def upper_incomplete_gamma(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x)."""
    if a <= 0 or x < 0:
        raise ValueError("upper_incomplete_gamma requires a > 0 and x >= 0")
    if x == 0.0:
        return 1.0
    if math.isinf(x):
        return 0.0
    if x < a + 1.0:
        return 1.0 - _gamma_series(a, x)
    return _gamma_continued_fraction(a, x)


def chisq_upper_tail(x: float, df: float) -> float:
    """P(chi^2_df >= x)."""
    if df < 1 or not math.isfinite(df):
        raise ValueError(f"df must be >= 1, got {df}")
    if x < 0 or math.isnan(x):
        raise ValueError(f"x must be >= 0, got {x}")
    return upper_incomplete_gamma(0.5 * df, 0.5 * x)


def symmetric(a, tol: float = 1e-12) -> np.ndarray:
    """Validate near-symmetry and return the symmetrized copy.

    Asymmetry is measured relative to max(1, max|a|).
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if asym > tol * scale:
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3g})")
    return 0.5 * (a + a.T)


def pseudo_inverse(a, rel_tol: float = 1e-10) -> tuple[np.ndarray, int]:
    """Eigenvalue-thresholded inverse of a PSD matrix.

    Returns the pseudo-inverse and the numerical rank. Eigenvalues below
    ``rel_tol * max_eigenvalue`` are dropped.

    Raises:
        ValueError: if the matrix has a materially negative eigenvalue.
    """
    a = symmetric(a)
    w, v = np.linalg.eigh(a)
    top = float(w.max()) if w.size else 0.0
    if top <= 0.0:
        return np.zeros_like(a), 0
    cut = rel_tol * top
    if float(w.min()) < -max(cut, 1e-12 * top):
        raise ValueError("matrix is indefinite")
    keep = w > cut
    inv = (v[:, keep] / w[keep]) @ v[:, keep].T
    return inv, int(keep.sum())


def solve_spd(a, b) -> np.ndarray:
    """Solve ``a x = b`` for symmetric PSD ``a``.

    Cholesky when positive definite; falls back to :func:`pseudo_inverse`.
    """
    a = symmetric(a)
    b = np.asarray(b, dtype=np.float64)
    try:
        low = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        inv, _ = pseudo_inverse(a)
        return inv @ b
    y = np.linalg.solve(low, b)
    return np.linalg.solve(low.T, y)


def empirical_covariance(m) -> np.ndarray:
    """Covariance of the columns of ``m`` with divisor n (not n - 1)."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    n = m.shape[0]
    if n < 2:
        raise ValueError("empirical_covariance needs at least 2 rows")
    c = m - m.mean(axis=0)
    return symmetric(c.T @ c / n)


def seeded_rng(master_seed: int, stream_index: int = 0) -> np.random.Generator:
    """Independent, reproducible generator for ``(master_seed, stream_index)``.

    Streams are derived with numpy's SeedSequence spawn keys, so distinct
    indices give statistically independent PCG64 streams.
    """
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(stream_index),))
    return np.random.Generator(np.random.PCG64(seq))
