"""Gaussian helpers for the E-step: region masses, categorical draws, densities."""
from __future__ import annotations

import math

import numpy as np
from scipy import linalg
from scipy.special import ndtr

LOG_2PI = math.log(2.0 * math.pi)


def normal_cdf(x):
    """Standard normal CDF, ``0.5 * erfc(-x / sqrt(2))``.

    Accurate to double precision in both tails (no ``1 - erf`` cancellation).
    Accepts scalars or arrays.
    """
    if np.ndim(x) == 0:
        return 0.5 * math.erfc(-float(x) / math.sqrt(2.0))
    return ndtr(np.asarray(x, dtype=float))


def _interval_mass(lo, hi):
    # P(lo < Z <= hi); evaluate in whichever tail keeps both CDF values small
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    right = lo > 0
    upper = np.where(right, ndtr(-lo), ndtr(hi))
    lower = np.where(right, ndtr(-hi), ndtr(lo))
    return upper - lower


def region_posterior(y_eta, variance, boundaries) -> np.ndarray:
    """Probability of each region under ``N(eta; y_eta, variance)``.

    The outer regions are extended to -inf and +inf so the weights form a
    proper categorical distribution.  ``y_eta`` may be an array of
    measurements, in which case the result has shape ``y_eta.shape + (N_r,)``.
    """
    if not variance > 0:
        raise ValueError(f"variance must be positive, got {variance}")
    l = np.asarray(boundaries, dtype=float)
    if l.ndim != 1 or l.size < 2 or not np.all(np.diff(l) > 0):
        raise ValueError(f"boundaries must be strictly increasing: {l}")
    edges = np.concatenate(([-np.inf], l[1:-1], [np.inf]))
    z = (edges - np.asarray(y_eta, dtype=float)[..., None]) / math.sqrt(variance)
    w = _interval_mass(z[..., :-1], z[..., 1:])
    return w / w.sum(axis=-1, keepdims=True)


def sample_categorical(weights, rng: np.random.Generator) -> int:
    """One inverse-CDF draw from ``weights`` (0-based index)."""
    return int(sample_categorical_batch(np.asarray(weights)[None, :], rng.random(1))[0])


def sample_categorical_batch(weights: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF draws given pre-drawn uniforms.

    ``weights`` has shape ``(..., N_r)`` and broadcasts against ``uniforms``
    with an added trailing axis.  Zero-weight categories are never returned.
    """
    cum = np.cumsum(weights, axis=-1)
    cum[..., -1] = np.inf  # guard against round-off in the last cumulative sum
    idx = (np.asarray(uniforms)[..., None] >= cum).sum(axis=-1)
    return idx


def log_gaussian(x, mean, cov) -> float:
    """Multivariate normal log-density via a Cholesky factorization of ``cov``.

    Raises ``numpy.linalg.LinAlgError`` when ``cov`` is not positive definite.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if x.shape != mean.shape or cov.shape != (x.size, x.size):
        raise ValueError(f"shape mismatch: x {x.shape}, mean {mean.shape}, cov {cov.shape}")
    try:
        chol = linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"covariance is not positive definite: {exc}") from None
    z = linalg.solve_triangular(chol, x - mean, lower=True)
    return float(-0.5 * (x.size * LOG_2PI + z @ z) - np.log(np.diag(chol)).sum())
