"""Synthetic PWASS data and the JAS 39 Gripen longitudinal-dynamics preset."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .model import (CONTINUOUS, PwassModel, Theta, assemble_all, model_from_dict,
                    read_model_file, region_of, theta_of)

INPUT_SOURCES = ("feedback", "excitation", "file")


class UnstableSimulationError(RuntimeError):
    pass


@dataclass
class ExcitationConfig:
    """Reference schedule tracked by the closed loop.

    ``eta`` follows a triangle wave between ``eta_low`` and ``eta_high`` with a
    piecewise-constant random dither; ``zeta`` follows a sinusoid.  The input
    is ``feedforward_next @ ref[t+1] + feedforward_now @ ref[t]`` (shape
    ``(n_u, n_x)`` each), which makes ``x`` track ``ref`` when combined with
    the feedback law that places the closed loop at the matching poles.
    """

    eta_low: float = 0.0
    eta_high: float = 0.0
    eta_period: int = 360
    zeta_amplitude: float = 0.0
    zeta_period: int = 97
    dither_std: float = 0.0
    dither_hold: int = 20
    feedforward_next: list | None = None
    feedforward_now: list | None = None


@dataclass
class SimConfig:
    horizon: int = 1800
    sample_time: float = 1.0 / 60.0
    seed: int = 0
    input_source: str = "feedback"
    feedback_gain: list | None = None
    input_file: str | None = None
    # multiplies every noise draw; 0 gives a noiseless run started at the prior mean
    noise_scale: float = 1.0
    excitation: ExcitationConfig = field(default_factory=ExcitationConfig)

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2")
        if not self.sample_time > 0:
            raise ValueError("sample_time must be positive")
        if self.input_source not in INPUT_SOURCES:
            raise ValueError(f"input_source must be one of {INPUT_SOURCES}")
        if isinstance(self.excitation, dict):
            self.excitation = ExcitationConfig(**self.excitation)

    @classmethod
    def from_dict(cls, d: dict | None, **overrides) -> "SimConfig":
        d = dict(d or {})
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**d)


@dataclass
class Trajectory:
    states: np.ndarray
    measurements: np.ndarray
    inputs: np.ndarray
    regimes: np.ndarray

    @property
    def horizon(self) -> int:
        return self.states.shape[0]

    def header(self) -> list[str]:
        n_x, n_y, n_u = (a.shape[1] for a in (self.states, self.measurements, self.inputs))
        return (["t"] + [f"x{i + 1}" for i in range(n_x)] + [f"y{i + 1}" for i in range(n_y)]
                + [f"u{i + 1}" for i in range(n_u)] + ["regime"])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for t in range(self.horizon):
                w.writerow([t, *map(repr, self.states[t].tolist()),
                            *map(repr, self.measurements[t].tolist()),
                            *map(repr, self.inputs[t].tolist()), int(self.regimes[t])])

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ValueError(f"{path}: empty trajectory file")
        head = rows[0]
        cols = {p: [i for i, h in enumerate(head) if h[:1] == p and h[1:].isdigit()]
                for p in "xyu"}
        if "regime" not in head or not all(cols.values()):
            raise ValueError(f"{path}: trajectory header needs x*, y*, u* and regime columns")
        data = np.array([[float(v) for v in r] for r in rows[1:]])
        return cls(data[:, cols["x"]], data[:, cols["y"]], data[:, cols["u"]],
                   data[:, head.index("regime")].astype(int))


def _triangle(t: np.ndarray, period: int) -> np.ndarray:
    # 0 -> 1 -> 0 over one period
    phase = (t % period) / period
    return 1.0 - np.abs(2.0 * phase - 1.0)


def reference_signal(exc: ExcitationConfig, horizon: int, n_x: int,
                     rng: np.random.Generator) -> np.ndarray:
    """State reference, shape ``(horizon + 1, n_x)`` (one step of lookahead)."""
    t = np.arange(horizon + 1)
    ref = np.zeros((horizon + 1, n_x))
    ref[:, 0] = exc.eta_low + (exc.eta_high - exc.eta_low) * _triangle(t, exc.eta_period)
    n_hold = -(-(horizon + 1) // exc.dither_hold)
    dither = rng.normal(0.0, 1.0, n_hold) * exc.dither_std
    ref[:, 0] += np.repeat(dither, exc.dither_hold)[:horizon + 1]
    ref[:, 1] = exc.zeta_amplitude * np.sin(2 * np.pi * t / exc.zeta_period)
    return ref


def excitation_signal(sim_config: SimConfig, rng: np.random.Generator) -> np.ndarray:
    """Feedforward part of the input, shape ``(horizon, n_u)``.

    Under ``input_source="feedback"`` the applied input is this signal minus
    ``feedback_gain @ x``; a zero-amplitude schedule leaves only the feedback.
    """
    exc = sim_config.excitation
    if exc.feedforward_next is None or exc.feedforward_now is None:
        raise ValueError("excitation needs feedforward_next and feedforward_now matrices")
    n1 = np.asarray(exc.feedforward_next, dtype=float)
    n0 = np.asarray(exc.feedforward_now, dtype=float)
    ref = reference_signal(exc, sim_config.horizon, n1.shape[1], rng)
    return ref[1:] @ n1.T + ref[:-1] @ n0.T


def _load_inputs(path, n_u: int, horizon: int) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", ndmin=2)
    if data.shape[1] != n_u or data.shape[0] < horizon:
        raise ValueError(f"{path}: need {horizon} rows of {n_u} inputs, got {data.shape}")
    return data[:horizon]


def simulate(model: PwassModel, theta: Theta, sim_config: SimConfig,
             rng: np.random.Generator, inputs=None) -> Trajectory:
    """Simulate the PWASS model with regimes chosen by the true ``eta``.

    With ``input_source="feedback"`` the input is ``v[t] - K y[t]``: the gain
    acts on the noisy measurement, never on the latent state, so the input
    stays a function of observed data and the identification likelihood that
    treats ``u`` as known remains exact.  ``inputs`` (shape ``(T, n_u)``)
    overrides the configured source and is applied open loop.
    """
    T, n_x, n_u = sim_config.horizon, model.n_x, model.n_u
    A, b = assemble_all(model, theta)
    B, C = model.input_matrix, model.meas_matrix
    prior_rng, w_rng, v_rng, exc_rng = rng.spawn(4)
    s = sim_config.noise_scale

    K = None
    if inputs is not None:
        v = np.asarray(inputs, dtype=float)
    elif sim_config.input_source == "file":
        v = _load_inputs(sim_config.input_file, n_u, T)
    else:
        v = excitation_signal(sim_config, exc_rng)
        if sim_config.input_source == "feedback":
            if sim_config.feedback_gain is None:
                raise ValueError("input_source 'feedback' needs feedback_gain")
            K = np.asarray(sim_config.feedback_gain, dtype=float).reshape(n_u, model.n_y)

    chol = lambda m: np.linalg.cholesky(m) * s
    Lq, Lr, L0 = chol(model.process_cov), chol(model.meas_cov), chol(model.prior_cov)
    x = np.empty((T, n_x))
    u = np.empty((T, n_u))
    x[0] = model.prior_mean + L0 @ prior_rng.standard_normal(n_x)
    w = w_rng.standard_normal((T, n_x)) @ Lq.T
    nu = v_rng.standard_normal((T, model.n_y)) @ Lr.T
    y = np.empty((T, model.n_y))
    regimes = np.empty(T, dtype=int)
    for t in range(T):
        regimes[t] = region_of(x[t, 0], model.boundaries)
        y[t] = C @ x[t] + nu[t]
        # output feedback: u[t] depends on observed data only
        u[t] = v[t] if K is None else v[t] - K @ y[t]
        if t + 1 < T:
            r = regimes[t]
            x[t + 1] = A[r] @ x[t] + B @ u[t] + b[r] + w[t]
            if not np.all(np.abs(x[t + 1]) < 1e6):
                raise UnstableSimulationError(
                    f"state diverged at t={t + 1}; configure a stabilizing feedback law")
    return Trajectory(x, y, u, regimes)


def perturb_theta(theta: Theta, fraction: float, rng: np.random.Generator,
                  offset=None) -> Theta:
    """Uniform initialization around the truth.

    Each flat component ``v`` (measured from ``offset``) is drawn from an
    interval of width ``fraction * |v|`` centred on ``v``.  Components that
    are exactly zero use the mean absolute component as their scale.
    """
    if fraction < 0:
        raise ValueError("fraction must be non-negative")
    vec = theta.pack()
    off = np.zeros_like(vec) if offset is None else np.asarray(offset, dtype=float)
    base = vec - off
    scale = np.abs(base)
    scale[scale == 0] = np.abs(base).mean()
    draw = base + fraction * scale * (rng.random(vec.size) - 0.5)
    return Theta.unpack(draw + off, theta.n_regions, theta.n_x, theta.variant)


def theta_offset(model: PwassModel, variant: str = CONTINUOUS) -> np.ndarray:
    """Flat vector that is zero except for ``phi_offset`` in the Phi slots."""
    n_r, n = model.n_regions, model.n_x
    off = np.zeros(Theta.size(n_r, n, variant))
    start = n_r + (1 if variant == CONTINUOUS else n_r) + (n - 2) * n
    off[start:start + n] = model.phi_offset
    return off


# ---------------------------------------------------------------------------
# presets

def preset_path(name: str = "gripen") -> Path:
    return Path(str(resources.files("pwass") / "presets" / f"{name}.yaml"))


def gripen_model(noise_reading: str | None = None) -> tuple[PwassModel, Theta]:
    """The Gripen model of the shipped preset and its true continuous theta."""
    model = model_from_dict(read_model_file(preset_path("gripen")), noise_reading)
    return model, theta_of(model, CONTINUOUS)


def gripen_sim_config(**overrides) -> SimConfig:
    d = read_model_file(preset_path("gripen")).get("simulation")
    return SimConfig.from_dict(d, **overrides)
