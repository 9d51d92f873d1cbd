"""Monte-Carlo EM for piecewise affine state-space models.

E-step: draw ``M`` regime trajectories from the factorized posterior
``prod_t p(r_t | y_t)`` (each factor a Gaussian mass over a region), then
smooth the states along every trajectory.  The smoothed moments are reduced
to sufficient statistics binned by (transition, regime).

M-step: maximize the Monte-Carlo surrogate

    Q(theta) = 1/M sum_t sum_j <Psi_{r}(theta), S_t^j> + Xi_{r}(theta)

Because ``B`` and the process covariance are known and every submodel is
affine in ``theta``, ``Q`` is a concave quadratic; the closed-form M-step
solves its stationarity system, the quasi-Newton M-step climbs it with BFGS.
"""
from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import optimize

from .gaussian import region_posterior, sample_categorical_batch
from .model import CONTINUOUS, UNCONSTRAINED, PwassModel, Theta, assemble_all
from .smoother import SmoothedMoments, smooth_trajectory

log = logging.getLogger(__name__)

MSTEP_MODES = ("closed_form", "quasi_newton", "both_crosscheck")


class UnidentifiableRegimeError(np.linalg.LinAlgError):
    """The M-step normal equations are singular."""

    def __init__(self, regimes):
        self.regimes = list(regimes)
        if self.regimes:
            msg = "unidentifiable regime(s) %s: no sampled transitions" % (
                ", ".join(str(r) for r in self.regimes))
        else:
            msg = "singular M-step normal equations (insufficient excitation)"
        super().__init__(msg)


class MStepDivergenceError(RuntimeError):
    pass


class EmIterationError(RuntimeError):
    def __init__(self, iteration: int, cause: Exception):
        super().__init__(f"EM iteration {iteration}: {cause}")
        self.iteration = iteration
        self.cause = cause


@dataclass
class EmConfig:
    num_trajectories: int = 300
    num_iterations: int = 100
    mstep_mode: str = "closed_form"
    variant: str = CONTINUOUS
    grad_tol: float = 1e-8
    max_inner_iter: int = 200
    crosscheck_tol: float = 1e-5
    seed: int = 0
    resample_each_iteration: bool = True
    # use y[0] in the first filter step (off: the prior is copied through)
    update_first: bool = False

    def __post_init__(self):
        if self.num_trajectories < 1:
            raise ValueError("num_trajectories must be >= 1")
        if self.num_iterations < 0:
            raise ValueError("num_iterations must be >= 0")
        if self.mstep_mode not in MSTEP_MODES:
            raise ValueError(f"mstep_mode must be one of {MSTEP_MODES}")


# ---------------------------------------------------------------------------
# E-step

def sample_regime_trajectories(model: PwassModel, y, M: int,
                               rng: np.random.Generator) -> np.ndarray:
    """``M`` independent regime trajectories, shape ``(M, T-1)``.

    ``r_t`` is drawn from the region masses of ``N(eta; y_t, R_eta)``
    independently across ``t`` and ``j``; the last sample ``y[T-1]`` is not
    needed because no transition leaves it.
    """
    eta = model.eta_measurements(np.asarray(y)[:-1])
    weights = region_posterior(eta, model.eta_variance, model.boundaries)
    uniforms = rng.random((M, eta.shape[0]))
    return sample_categorical_batch(weights[None], uniforms)


@dataclass
class SufficientStats:
    """Expected sufficient statistics summed over trajectories.

    Entry ``[t, i]`` sums, over the trajectories whose transition
    ``x[t] -> x[t+1]`` used regime ``i``:

    * ``cross``     E[x_t x_{t+1}']
    * ``mean_next`` E[x_{t+1}]
    * ``auto``      E[x_t x_t']
    * ``mean_prev`` E[x_t]

    ``counts[t, i]`` is the number of such trajectories and
    ``num_samples`` the total ``M``.
    """

    cross: np.ndarray
    mean_next: np.ndarray
    auto: np.ndarray
    mean_prev: np.ndarray
    counts: np.ndarray
    num_samples: int

    @property
    def n_transitions(self) -> int:
        return self.counts.shape[0]

    @property
    def n_regions(self) -> int:
        return self.counts.shape[1]

    def regime_counts(self) -> np.ndarray:
        return self.counts.sum(axis=0)


def trajectory_stats(sm: SmoothedMoments) -> dict[str, np.ndarray]:
    """Per-trajectory, per-transition statistics (before binning by regime)."""
    m = sm.mean
    prev, nxt = m[..., :-1, :], m[..., 1:, :]
    return {
        "cross": prev[..., :, None] * nxt[..., None, :] + np.swapaxes(sm.cross_cov, -1, -2),
        "mean_next": nxt,
        "auto": prev[..., :, None] * prev[..., None, :] + sm.cov[..., :-1, :, :],
        "mean_prev": prev,
    }


def bin_stats(per_traj: dict[str, np.ndarray], regimes, n_regions: int) -> SufficientStats:
    """Sum per-trajectory statistics into (transition, regime) bins.

    ``regimes`` has shape ``(M, T-1)`` and every array in ``per_traj`` the
    same two leading axes.  The sum over trajectories runs in index order.
    """
    regimes = np.asarray(regimes)
    onehot = (regimes[..., None] == np.arange(n_regions)).astype(float)
    out = {key: np.einsum("jti,jt...->ti...", onehot, val) for key, val in per_traj.items()}
    return SufficientStats(counts=onehot.sum(axis=0), num_samples=regimes.shape[0], **out)


def stats_from_smoothed(sm: SmoothedMoments, regimes, n_regions: int) -> SufficientStats:
    return bin_stats(trajectory_stats(sm), regimes, n_regions)


def stats_from_states(x, regimes, n_regions: int) -> SufficientStats:
    """Statistics of a known state sequence (zero covariances), ``M = 1``."""
    x = np.asarray(x, dtype=float)
    T, n = x.shape
    sm = SmoothedMoments(x[None], np.zeros((1, T, n, n)), np.zeros((1, T - 1, n, n)))
    return stats_from_smoothed(sm, np.asarray(regimes)[None], n_regions)


@dataclass
class EStepResult:
    regimes: np.ndarray
    smoothed: SmoothedMoments
    stats: SufficientStats


def e_step(model: PwassModel, theta: Theta, y, u, config: EmConfig,
           rng: np.random.Generator, regimes=None) -> EStepResult:
    """Sample (unless ``regimes`` is given) and smooth ``M`` trajectories."""
    if regimes is None:
        regimes = sample_regime_trajectories(model, y, config.num_trajectories, rng)
    sm = smooth_trajectory(model, theta, regimes, y, u, config.update_first)
    return EStepResult(regimes, sm, stats_from_smoothed(sm, regimes, model.n_regions))


# ---------------------------------------------------------------------------
# surrogate

class NaturalParameter(NamedTuple):
    cross: np.ndarray       # A' Q^-1
    mean_next: np.ndarray   # b' Q^-1
    auto: np.ndarray        # -1/2 A' Q^-1 A
    mean_prev: np.ndarray   # -(B u + b)' Q^-1 A


def natural_parameter(A, b, B, u_prev, Q) -> NaturalParameter:
    """Natural parameter of the Gaussian transition density for one regime."""
    Qi = np.linalg.inv(Q)
    QiA = Qi @ A
    c = B @ np.asarray(u_prev, dtype=float) + b
    return NaturalParameter(QiA.T, Qi @ b, -0.5 * A.T @ QiA, -(c @ QiA))


def log_partition(b, B, u_prev, Q) -> float:
    Qi_b = np.linalg.solve(Q, b)
    Bu = B @ np.asarray(u_prev, dtype=float)
    return float(-Bu @ Qi_b - 0.5 * b @ Qi_b)


def _check_shapes(stats: SufficientStats, model: PwassModel, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if stats.n_regions != model.n_regions:
        raise ValueError(f"stats have {stats.n_regions} regimes, model {model.n_regions}")
    if u.ndim != 2 or u.shape[0] < stats.n_transitions or u.shape[1] != model.n_u:
        raise ValueError(f"inputs of shape {u.shape} do not cover "
                         f"{stats.n_transitions} transitions")
    return u[:stats.n_transitions]


def q_value(theta: Theta, stats: SufficientStats, model: PwassModel, u) -> float:
    """Monte-Carlo surrogate evaluated term by term from natural parameters.

    The ``u`` row paired with transition ``t -> t+1`` is ``u[t]``.
    """
    u = _check_shapes(stats, model, u)
    A, b = assemble_all(model, theta)
    Q, B = model.process_cov, model.input_matrix
    Qi = np.linalg.inv(Q)
    psi_cross = np.swapaxes(Qi @ A, -1, -2)                 # (N, n, n)
    psi_next = b @ Qi                                       # (N, n)
    psi_auto = -0.5 * np.swapaxes(A, -1, -2) @ Qi @ A       # (N, n, n)
    Bu = u @ B.T                                            # (T-1, n)
    c = Bu[:, None, :] + b[None]                            # (T-1, N, n)
    psi_prev = -np.einsum("tia,ab,ibc->tic", c, Qi, A)      # (T-1, N, n)
    xi = -np.einsum("ta,ab,ib->ti", Bu, Qi, b) - 0.5 * np.einsum("ia,ab,ib->i", b, Qi, b)
    total = (np.einsum("iab,tiab->", psi_cross, stats.cross)
             + np.einsum("ia,tia->", psi_next, stats.mean_next)
             + np.einsum("iab,tiab->", psi_auto, stats.auto)
             + np.einsum("tia,tia->", psi_prev, stats.mean_prev)
             + np.einsum("ti,ti->", xi, stats.counts))
    return float(total / stats.num_samples)


def submodel_basis(model: PwassModel, variant: str) -> tuple[np.ndarray, np.ndarray]:
    """Exact linear map from flat theta to the stacked ``W_i = [A_i, b_i]``.

    Returns ``E`` of shape ``(P, N_r, n, n+1)`` and ``W0`` of shape
    ``(N_r, n, n+1)`` with ``W_i(theta) = W0_i + sum_k theta_k E_k,i``.
    Submodels are affine in theta (continuity included), so differencing at
    unit vectors is exact.
    """
    n_r, n = model.n_regions, model.n_x
    P = Theta.size(n_r, n, variant)

    def stacked(vec):
        A, b = assemble_all(model, Theta.unpack(vec, n_r, n, variant))
        return np.concatenate([A, b[..., None]], axis=-1)

    W0 = stacked(np.zeros(P))
    E = np.stack([stacked(e) - W0 for e in np.eye(P)])
    return E, W0


@dataclass
class QuadraticSurrogate:
    """``Q(theta) = const + lin . theta + 1/2 theta' H theta`` on the flat vector."""

    lin: np.ndarray
    hess: np.ndarray
    const: float

    def value(self, vec) -> float:
        v = np.asarray(vec, dtype=float)
        return float(self.const + self.lin @ v + 0.5 * v @ self.hess @ v)

    def gradient(self, vec) -> np.ndarray:
        return self.lin + self.hess @ np.asarray(vec, dtype=float)

    def increment(self, new, old) -> float:
        """``Q(new) - Q(old)`` without forming the (large) values themselves.

        Uses ``(new - old) . (lin + H (new + old) / 2)``, which avoids the
        cancellation of subtracting two totals of order ``T``.
        """
        new = np.asarray(new, dtype=float)
        old = np.asarray(old, dtype=float)
        return float((new - old) @ (self.lin + 0.5 * self.hess @ (new + old)))


def quadratic_surrogate(stats: SufficientStats, model: PwassModel, u,
                        variant: str) -> QuadraticSurrogate:
    """Collapse the surrogate into its quadratic form in the flat theta.

    With ``z = [x_t; 1]`` and ``xt = x_{t+1} - B u_t`` each transition
    contributes ``tr(Q^-1 W Szx) - 1/2 tr(Q^-1 W Szz W')`` where ``Szz``,
    ``Szx`` are the regime-binned sums of ``E[z z']`` and ``E[z xt']``.
    """
    u = _check_shapes(stats, model, u)
    n = model.n_x
    Bu = u @ model.input_matrix.T
    Szz = np.zeros((stats.n_regions, n + 1, n + 1))
    Szz[:, :n, :n] = stats.auto.sum(axis=0)
    Szz[:, :n, n] = Szz[:, n, :n] = stats.mean_prev.sum(axis=0)
    Szz[:, n, n] = stats.counts.sum(axis=0)
    Szx = np.empty((stats.n_regions, n + 1, n))
    Szx[:, :n, :] = stats.cross.sum(axis=0) - np.einsum("tia,tb->iab", stats.mean_prev, Bu)
    Szx[:, n, :] = stats.mean_next.sum(axis=0) - np.einsum("ti,tb->ib", stats.counts, Bu)

    E, W0 = submodel_basis(model, variant)
    Qi = np.linalg.inv(model.process_cov)
    M = stats.num_samples
    hess = -np.einsum("ab,kibc,icd,liad->kl", Qi, E, Szz, E) / M
    lin = (np.einsum("ab,kibc,ica->k", Qi, E, Szx)
           - np.einsum("ab,kibc,icd,iad->k", Qi, E, Szz, W0)) / M
    const = (np.einsum("ab,ibc,ica->", Qi, W0, Szx)
             - 0.5 * np.einsum("ab,ibc,icd,iad->", Qi, W0, Szz, W0)) / M
    return QuadraticSurrogate(lin, 0.5 * (hess + hess.T), float(const))


def q_gradient(theta: Theta, stats: SufficientStats, model: PwassModel, u) -> np.ndarray:
    """Analytic gradient of the surrogate with respect to ``theta.pack()``."""
    return quadratic_surrogate(stats, model, u, theta.variant).gradient(theta.pack())


# ---------------------------------------------------------------------------
# M-step

def _regime_params(n_regions: int, variant: str, i: int) -> list[int]:
    # flat indices owned by regime i alone
    idx = [i]
    if variant == UNCONSTRAINED:
        idx.append(n_regions + i)
    return idx


def _solve_stationary(quad: QuadraticSurrogate, fixed: dict[int, float]) -> np.ndarray | None:
    P = quad.lin.size
    free = np.array([k not in fixed for k in range(P)])
    x = np.zeros(P)
    for k, v in fixed.items():
        x[k] = v
    H = -quad.hess[np.ix_(free, free)]
    rhs = quad.lin[free] + quad.hess[np.ix_(free, ~free)] @ x[~free]
    eig = np.linalg.eigvalsh(H)
    if eig.size and (eig.min() <= 1e-12 * max(eig.max(), 1e-300)):
        return None
    x[free] = np.linalg.solve(H, rhs)
    return x


def m_step_closed_form(stats: SufficientStats, model: PwassModel, u,
                       variant: str = CONTINUOUS,
                       theta_prev: Theta | None = None) -> Theta:
    """Exact maximizer of the surrogate from its linear stationarity system.

    When some regime received no sampled transitions and ``theta_prev`` is
    given, that regime's own parameters are frozen at their previous values
    (with a warning); otherwise :class:`UnidentifiableRegimeError` is raised.
    """
    quad = quadratic_surrogate(stats, model, u, variant)
    n_r, n = model.n_regions, model.n_x
    starved = [i for i, c in enumerate(stats.regime_counts()) if c == 0]
    vec = _solve_stationary(quad, {})
    if vec is None:
        if theta_prev is None or not starved:
            raise UnidentifiableRegimeError(starved)
        prev = theta_prev.pack()
        fixed = {k: prev[k] for i in starved for k in _regime_params(n_r, variant, i)}
        vec = _solve_stationary(quad, fixed)
        if vec is None:
            raise UnidentifiableRegimeError(starved)
        warnings.warn(f"regime(s) {starved} had no samples; their parameters were frozen",
                      RuntimeWarning, stacklevel=2)
    return Theta.unpack(vec, n_r, n, variant)


@dataclass
class QuasiNewtonResult:
    theta: Theta
    q: float
    n_iter: int
    converged: bool
    message: str


def m_step_quasi_newton(theta_init: Theta, stats: SufficientStats, model: PwassModel, u,
                        grad_tol: float = 1e-8, max_iter: int = 200) -> QuasiNewtonResult:
    """Maximize the surrogate with BFGS from ``theta_init``.

    The optimizer sees the surrogate divided by the number of transitions so
    that ``grad_tol`` does not scale with the record length.  Only function
    values and analytic gradients are used.
    """
    variant = theta_init.variant
    n_r, n = model.n_regions, model.n_x
    scale = max(stats.n_transitions, 1)

    def objective(vec):
        th = Theta.unpack(vec, n_r, n, variant)
        return (-q_value(th, stats, model, u) / scale,
                -q_gradient(th, stats, model, u) / scale)

    x0 = theta_init.pack()
    f0, _ = objective(x0)
    res = optimize.minimize(objective, x0, jac=True, method="BFGS",
                            options={"gtol": grad_tol, "maxiter": max_iter})
    x, fx, ok, msg = res.x, res.fun, bool(res.success), str(res.message)
    if not ok:
        # a stalled line search often leaves a better point; restart from it
        res2 = optimize.minimize(objective, x, jac=True, method="BFGS",
                                 options={"gtol": grad_tol, "maxiter": max_iter})
        if res2.fun <= fx:
            x, fx, ok, msg = res2.x, res2.fun, bool(res2.success), str(res2.message)
        if not ok:
            ok = np.linalg.norm(objective(x)[1]) <= grad_tol
    if fx > f0:
        x, fx = x0, f0
    if not ok:
        warnings.warn(f"quasi-Newton M-step did not converge: {msg}", RuntimeWarning,
                      stacklevel=2)
    return QuasiNewtonResult(Theta.unpack(x, n_r, n, variant), -fx * scale,
                             int(res.nit), ok, msg)


# ---------------------------------------------------------------------------
# driver

@dataclass
class EmTrace:
    names: list[str]
    thetas: list[np.ndarray] = field(default_factory=list)
    q_values: list[float] = field(default_factory=list)
    elapsed: list[float] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def final(self) -> np.ndarray:
        return self.thetas[-1]

    def as_array(self) -> np.ndarray:
        return np.vstack(self.thetas)

    def rows(self, include_timing: bool = True):
        header = ["iteration", *self.names, "q_value"]
        if include_timing:
            header.append("elapsed_s")
        yield header
        for k, (th, q, dt) in enumerate(zip(self.thetas, self.q_values, self.elapsed)):
            row = [str(k), *(repr(float(v)) for v in th), repr(float(q))]
            if include_timing:
                row.append(f"{dt:.6f}")
            yield row

    def to_csv(self, path, include_timing: bool = True) -> None:
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(self.rows(include_timing))


def _iteration_rngs(rng: np.random.Generator, K: int) -> list[np.random.Generator]:
    return rng.spawn(K) if K else []


def run_em(model: PwassModel, theta0: Theta, y, u, config: EmConfig,
           rng: np.random.Generator | None = None, callback=None) -> EmTrace:
    """Run ``config.num_iterations`` EM iterations from ``theta0``.

    Each iteration draws fresh regime trajectories from its own child stream
    of ``rng`` unless ``config.resample_each_iteration`` is off, in which case
    the first draw is reused.  ``callback(k, theta, q)`` is called after every
    M-step.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    theta = theta0.with_variant(config.variant, model.boundaries)
    trace = EmTrace(theta.names(), [theta.pack()], [float("nan")], [0.0])
    frozen_regimes = None
    for k, rng_k in enumerate(_iteration_rngs(rng, config.num_iterations)):
        t0 = time.perf_counter()
        try:
            est = e_step(model, theta, y, u, config, rng_k, regimes=frozen_regimes)
            if not config.resample_each_iteration:
                frozen_regimes = est.regimes
            theta, q = _m_step(theta, est.stats, model, u, config, trace)
        except (np.linalg.LinAlgError, MStepDivergenceError) as exc:
            raise EmIterationError(k + 1, exc) from exc
        trace.thetas.append(theta.pack())
        trace.q_values.append(q)
        trace.elapsed.append(time.perf_counter() - t0)
        log.debug("iteration %d: Q=%.6g", k + 1, q)
        if callback is not None:
            callback(k + 1, theta, q)
    return trace


def _m_step(theta: Theta, stats: SufficientStats, model: PwassModel, u,
            config: EmConfig, trace: EmTrace) -> tuple[Theta, float]:
    mode = config.mstep_mode
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if mode in ("closed_form", "both_crosscheck"):
            new = m_step_closed_form(stats, model, u, config.variant, theta_prev=theta)
        if mode in ("quasi_newton", "both_crosscheck"):
            qn = m_step_quasi_newton(theta, stats, model, u, config.grad_tol,
                                     config.max_inner_iter).theta
            if mode == "quasi_newton":
                new = qn
            else:
                gap = np.abs(qn.pack() - new.pack())
                if gap.max() > config.crosscheck_tol:
                    worst = int(np.argmax(gap))
                    raise MStepDivergenceError(
                        f"closed-form and quasi-Newton M-steps disagree by {gap.max():.3g} "
                        f"in {theta.names()[worst]} (closed form {new.pack()[worst]!r}, "
                        f"quasi-Newton {qn.pack()[worst]!r})")
    for w in caught:
        trace.notes.append(f"iteration {len(trace.thetas)}: {w.message}")
    return new, q_value(new, stats, model, u)
