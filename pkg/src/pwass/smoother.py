"""Regime-conditioned Kalman filter and RTS smoother.

All routines broadcast over leading batch axes, so the ``M`` sampled regime
trajectories of one E-step are filtered and smoothed together: ``regimes``
of shape ``(M, T-1)`` yields moments of shape ``(M, T, n_x[, n_x])``.

Time is 0-based: ``regimes[..., t]`` selects the submodel that carries
``x[t]`` to ``x[t+1]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import PwassModel, Theta, assemble_all


class SmootherError(np.linalg.LinAlgError):
    """A linear solve failed inside the filter or smoother."""

    def __init__(self, message: str, t: int):
        super().__init__(f"{message} at t={t}")
        self.t = t


def _sym(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + np.swapaxes(P, -1, -2))


def _solve(a: np.ndarray, b: np.ndarray, what: str, t: int) -> np.ndarray:
    try:
        x = np.linalg.solve(a, b)
    except np.linalg.LinAlgError:
        raise SmootherError(f"singular {what}", t) from None
    if not np.all(np.isfinite(x)):
        raise SmootherError(f"non-finite solve with {what}", t)
    return x


@dataclass
class FilterMoments:
    """Predicted and filtered moments for every time step."""

    pred_mean: np.ndarray
    pred_cov: np.ndarray
    filt_mean: np.ndarray
    filt_cov: np.ndarray


@dataclass
class SmoothedMoments:
    """Smoothed moments; ``cross_cov[..., t, :, :]`` is Cov(x[t+1], x[t] | y)."""

    mean: np.ndarray
    cov: np.ndarray
    cross_cov: np.ndarray


def kf_predict(filt_mean, filt_cov, A, b, B, u, Q):
    """One time update: ``(A m + B u + b, A P A' + Q)``."""
    mean = (A @ filt_mean[..., None])[..., 0] + np.asarray(u) @ np.asarray(B).T + b
    cov = A @ filt_cov @ np.swapaxes(A, -1, -2) + Q
    return mean, _sym(cov)


def kf_update(pred_mean, pred_cov, C, R, y, t: int = -1):
    """One measurement update in the ``P - P C' S^-1 C P`` form.

    ``t`` only labels errors raised for a singular innovation covariance.
    """
    C = np.asarray(C)
    CP = C @ pred_cov
    S = CP @ C.T + R
    gain_t = _solve(S, CP, "innovation covariance", t)  # = K'
    innov = np.asarray(y) - (pred_mean @ C.T)
    mean = pred_mean + (innov[..., None, :] @ gain_t)[..., 0, :]
    cov = pred_cov - np.swapaxes(gain_t, -1, -2) @ CP
    return mean, _sym(cov)


def kalman_filter(A, b, regimes, B, C, Q, R, u, y, prior_mean, prior_cov,
                  update_first: bool = False) -> FilterMoments:
    """Forward pass along fixed regime trajectories.

    ``A`` and ``b`` are the stacked submodels, shapes ``(N_r, n, n)`` and
    ``(N_r, n)``.  With ``update_first=False`` the prior is copied into the
    first filtered estimate without using ``y[0]``.
    """
    regimes = np.asarray(regimes)
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    T = y.shape[0]
    if regimes.shape[-1] != T - 1:
        raise ValueError(f"need {T - 1} regimes for {T} samples, got {regimes.shape[-1]}")
    batch = regimes.shape[:-1]
    n = A.shape[-1]
    pred_mean = np.empty(batch + (T, n))
    pred_cov = np.empty(batch + (T, n, n))
    filt_mean = np.empty_like(pred_mean)
    filt_cov = np.empty_like(pred_cov)

    m = np.broadcast_to(np.asarray(prior_mean, dtype=float), batch + (n,))
    P = np.broadcast_to(np.asarray(prior_cov, dtype=float), batch + (n, n))
    pred_mean[..., 0, :], pred_cov[..., 0, :, :] = m, P
    if update_first:
        m, P = kf_update(m, P, C, R, y[0], t=0)
    filt_mean[..., 0, :], filt_cov[..., 0, :, :] = m, P
    for t in range(T - 1):
        r = regimes[..., t]
        m, P = kf_predict(m, P, A[r], b[r], B, u[t], Q)
        pred_mean[..., t + 1, :], pred_cov[..., t + 1, :, :] = m, P
        m, P = kf_update(m, P, C, R, y[t + 1], t=t + 1)
        filt_mean[..., t + 1, :], filt_cov[..., t + 1, :, :] = m, P
    return FilterMoments(pred_mean, pred_cov, filt_mean, filt_cov)


def rts_backward(filt: FilterMoments, regimes, A) -> SmoothedMoments:
    """Rauch-Tung-Striebel backward pass with lag-one cross-covariances.

    ``G_t = P_{t|t} A' P_{t+1|t}^{-1}`` is obtained from a linear solve.
    """
    regimes = np.asarray(regimes)
    T = filt.filt_mean.shape[-2]
    mean = filt.filt_mean.copy()
    cov = filt.filt_cov.copy()
    cross = np.empty(cov.shape[:-3] + (max(T - 1, 0),) + cov.shape[-2:])
    for t in range(T - 2, -1, -1):
        At = A[regimes[..., t]]
        Pf = filt.filt_cov[..., t, :, :]
        Pp = filt.pred_cov[..., t + 1, :, :]
        G = np.swapaxes(_solve(Pp, At @ Pf, "predicted covariance", t + 1), -1, -2)
        Gt = np.swapaxes(G, -1, -2)
        cross[..., t, :, :] = cov[..., t + 1, :, :] @ Gt
        dm = mean[..., t + 1, :] - filt.pred_mean[..., t + 1, :]
        mean[..., t, :] = filt.filt_mean[..., t, :] + (G @ dm[..., None])[..., 0]
        cov[..., t, :, :] = _sym(Pf + G @ (cov[..., t + 1, :, :] - Pp) @ Gt)
    return SmoothedMoments(mean, cov, cross)


def regime_loglik(model: PwassModel, theta: Theta, regimes, y, u,
                  update_first: bool = False) -> np.ndarray:
    """Log-likelihood of the measurements along fixed regime trajectories.

    Sums the Gaussian innovation log-densities of every sample the filter
    conditions on (``y[1:]``, plus ``y[0]`` when ``update_first``).
    Returns one value per trajectory in the leading batch shape of ``regimes``.
    """
    A, b = assemble_all(model, theta)
    C, R = model.meas_matrix, model.meas_cov
    filt = kalman_filter(A, b, regimes, model.input_matrix, C, model.process_cov, R,
                         u, y, model.prior_mean, model.prior_cov, update_first)
    start = 0 if update_first else 1
    m = filt.pred_mean[..., start:, :]
    S = C @ filt.pred_cov[..., start:, :, :] @ C.T + R
    e = np.asarray(y, dtype=float)[start:] - m @ C.T
    L = np.linalg.cholesky(S)
    z = np.linalg.solve(L, e[..., None])[..., 0]
    logdet = 2.0 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(axis=-1)
    n_y = C.shape[0]
    return -0.5 * ((z ** 2).sum(axis=-1) + logdet + n_y * np.log(2 * np.pi)).sum(axis=-1)


def smooth_trajectory(model: PwassModel, theta: Theta, regimes, y, u,
                      update_first: bool = False) -> SmoothedMoments:
    """Filter and smooth ``y`` along one (or a batch of) regime trajectories."""
    A, b = assemble_all(model, theta)
    regimes = np.asarray(regimes)
    if regimes.size and (regimes.min() < 0 or regimes.max() >= model.n_regions):
        raise ValueError("regime index out of range")
    filt = kalman_filter(A, b, regimes, model.input_matrix, model.meas_matrix,
                         model.process_cov, model.meas_cov, u, y,
                         model.prior_mean, model.prior_cov, update_first)
    return rts_backward(filt, regimes, A)
