"""Piecewise affine state-space model structure.

The state is ``x = [eta, zeta, chi...]``.  The first state row is a fixed
linear combination ``phi_row . x``; the second row is ``phi_sub . z + f(eta)``
with ``z = x[1:]`` and ``f`` a scalar piecewise affine function of ``eta``;
the remaining rows are ``F x``.  Inside region ``i`` the model is affine,
``x' = A_i x + B u + b_i + w``.

Regime indices are 0-based throughout the package.  Region ``i`` is the
half-open interval ``(l[i], l[i+1]]``; values of ``eta`` outside
``(l[0], l[-1]]`` are clamped to the outer regions.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import yaml

CONTINUOUS = "continuous"
UNCONSTRAINED = "unconstrained"
VARIANTS = (CONTINUOUS, UNCONSTRAINED)


class ModelStructureError(ValueError):
    """Raised when model dimensions or boundaries are inconsistent."""


def _readonly(a, ndim=None, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    if ndim is not None and arr.ndim != ndim:
        raise ModelStructureError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def _check_boundaries(boundaries: np.ndarray) -> None:
    if boundaries.ndim != 1 or boundaries.size < 2:
        raise ModelStructureError("need at least two boundaries")
    if not np.all(np.diff(boundaries) > 0):
        raise ModelStructureError(f"boundaries must be strictly increasing: {boundaries}")


def intercepts_from_continuity(slopes, b1: float, boundaries) -> np.ndarray:
    """Intercepts of a continuous piecewise affine function.

    Given the slopes of every piece, the intercept of the first piece and the
    region boundaries, the remaining intercepts follow from requiring adjacent
    pieces to agree at their shared boundary::

        b_i = -a_i l_i + b_1 + a_1 l_1 + sum_{j<i} a_j (l_{j+1} - l_j)

    Parameters
    ----------
    slopes : array_like, shape (N_r,)
    b1 : float
        Intercept of the first piece.
    boundaries : array_like, shape (N_r + 1,)

    Returns
    -------
    numpy.ndarray, shape (N_r,)
    """
    a = np.asarray(slopes, dtype=float)
    l = np.asarray(boundaries, dtype=float)
    _check_boundaries(l)
    if a.shape != (l.size - 1,):
        raise ModelStructureError(
            f"{a.size} slopes do not match {l.size} boundaries")
    # value of f at the left edge of each region, accumulated piece by piece
    left_values = a[0] * l[0] + b1 + np.concatenate(
        ([0.0], np.cumsum(a[:-1] * np.diff(l)[:-1])))
    b = left_values - a * l[:-1]
    b[0] = b1
    return b


def knots_to_slopes(knot_values, boundaries) -> tuple[np.ndarray, float]:
    """Slopes and first intercept of the continuous function through the knots."""
    f = np.asarray(knot_values, dtype=float)
    l = np.asarray(boundaries, dtype=float)
    _check_boundaries(l)
    if f.shape != l.shape:
        raise ModelStructureError(
            f"{f.size} knot values do not match {l.size} boundaries")
    slopes = np.diff(f) / np.diff(l)
    b1 = float(f[0] - slopes[0] * l[0])
    return slopes, b1


def region_of(eta, boundaries):
    """Index of the region containing ``eta`` (0-based, clamped at the ends).

    Works elementwise on arrays; returns a Python int for scalar input.
    """
    l = np.asarray(boundaries, dtype=float)
    idx = np.clip(np.searchsorted(l, eta, side="left") - 1, 0, l.size - 2)
    if np.ndim(idx) == 0:
        return int(idx)
    return idx


@dataclass(frozen=True)
class PwaFunction:
    """Scalar piecewise affine map ``f(eta) = a_i eta + b_i`` on region ``i``."""

    boundaries: np.ndarray
    slopes: np.ndarray
    intercepts: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "boundaries", _readonly(self.boundaries, 1))
        object.__setattr__(self, "slopes", _readonly(self.slopes, 1))
        object.__setattr__(self, "intercepts", _readonly(self.intercepts, 1))
        _check_boundaries(self.boundaries)
        n = self.boundaries.size - 1
        if self.slopes.size != n or self.intercepts.size != n:
            raise ModelStructureError(
                f"{n} regions need {n} slopes and intercepts, got "
                f"{self.slopes.size} and {self.intercepts.size}")

    @classmethod
    def from_continuity(cls, slopes, b1, boundaries) -> "PwaFunction":
        return cls(boundaries, slopes, intercepts_from_continuity(slopes, b1, boundaries))

    @classmethod
    def from_knots(cls, knot_values, boundaries) -> "PwaFunction":
        slopes, b1 = knots_to_slopes(knot_values, boundaries)
        return cls.from_continuity(slopes, b1, boundaries)

    @property
    def n_regions(self) -> int:
        return self.slopes.size

    def knot_values(self) -> np.ndarray:
        return eval_pwa(self.boundaries, self)

    def continuity_gaps(self) -> np.ndarray:
        """Jump of ``f`` at each interior boundary (zero for a continuous map)."""
        l = self.boundaries[1:-1]
        a, b = self.slopes, self.intercepts
        return (a[:-1] * l + b[:-1]) - (a[1:] * l + b[1:])

    def __call__(self, eta):
        return eval_pwa(eta, self)


def eval_pwa(eta, pwa: PwaFunction):
    i = region_of(eta, pwa.boundaries)
    return pwa.slopes[i] * eta + pwa.intercepts[i]


@dataclass(frozen=True)
class Theta:
    """Free parameters of the state transition.

    In the ``continuous`` variant ``offsets`` holds only ``b_1`` and the
    other intercepts follow from continuity; in the ``unconstrained`` variant
    it holds every intercept.  The flat ordering is
    ``slopes, offsets, F (row-major), phi_row, phi_sub``.
    """

    slopes: np.ndarray
    offsets: np.ndarray
    f_block: np.ndarray
    phi_row: np.ndarray
    phi_sub: np.ndarray
    variant: str = CONTINUOUS

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ModelStructureError(f"unknown theta variant {self.variant!r}")
        for name in ("slopes", "offsets", "phi_row", "phi_sub"):
            object.__setattr__(self, name, _readonly(getattr(self, name), 1))
        n_x = self.phi_row.size
        object.__setattr__(
            self, "f_block", _readonly(np.reshape(self.f_block, (n_x - 2, n_x))))
        if self.phi_sub.size != n_x - 1:
            raise ModelStructureError(
                f"phi_sub has length {self.phi_sub.size}, expected {n_x - 1}")
        expected = 1 if self.variant == CONTINUOUS else self.slopes.size
        if self.offsets.size != expected:
            raise ModelStructureError(
                f"{self.variant} theta needs {expected} offsets, got {self.offsets.size}")

    @property
    def n_regions(self) -> int:
        return self.slopes.size

    @property
    def n_x(self) -> int:
        return self.phi_row.size

    def intercepts(self, boundaries) -> np.ndarray:
        if self.variant == CONTINUOUS:
            return intercepts_from_continuity(self.slopes, self.offsets[0], boundaries)
        return np.array(self.offsets)

    def pwa(self, boundaries) -> PwaFunction:
        return PwaFunction(boundaries, self.slopes, self.intercepts(boundaries))

    def pack(self) -> np.ndarray:
        return np.concatenate([self.slopes, self.offsets, self.f_block.ravel(),
                               self.phi_row, self.phi_sub])

    @staticmethod
    def size(n_regions: int, n_x: int, variant: str = CONTINUOUS) -> int:
        n_off = 1 if variant == CONTINUOUS else n_regions
        return n_regions + n_off + (n_x - 2) * n_x + n_x + (n_x - 1)

    @classmethod
    def unpack(cls, vec, n_regions: int, n_x: int, variant: str = CONTINUOUS) -> "Theta":
        v = np.asarray(vec, dtype=float)
        if v.shape != (cls.size(n_regions, n_x, variant),):
            raise ModelStructureError(
                f"flat theta has shape {v.shape}, expected "
                f"({cls.size(n_regions, n_x, variant)},)")
        n_off = 1 if variant == CONTINUOUS else n_regions
        cuts = np.cumsum([n_regions, n_off, (n_x - 2) * n_x, n_x])
        a, off, f, phi, sub = np.split(v, cuts)
        return cls(a, off, f.reshape(n_x - 2, n_x), phi, sub, variant)

    def names(self) -> list[str]:
        n = self.n_regions
        names = [f"a{i + 1}" for i in range(n)]
        names += ["b1"] if self.variant == CONTINUOUS else [f"b{i + 1}" for i in range(n)]
        names += [f"F{r + 1}{c + 1}" for r in range(self.n_x - 2) for c in range(self.n_x)]
        names += [f"Phi{c + 1}" for c in range(self.n_x)]
        names += [f"phi{c + 2}" for c in range(self.n_x - 1)]
        return names

    def with_variant(self, variant: str, boundaries) -> "Theta":
        """Convert between variants; going to ``continuous`` keeps only ``b_1``."""
        if variant == self.variant:
            return self
        if variant == UNCONSTRAINED:
            offsets = self.intercepts(boundaries)
        else:
            offsets = self.offsets[:1]
        return replace(self, offsets=offsets, variant=variant)


@dataclass(frozen=True)
class PwassModel:
    """A piecewise affine state-space model.

    ``B``, ``C``, ``Q``, ``R`` and the prior are known constants; the values of
    ``phi_row``, ``phi_sub``, ``f_block`` and ``pwa`` are the parameters that
    identification estimates (see :func:`theta_of`).  ``phi_offset`` is the
    known identity part of ``phi_row`` for models written in
    increment form, so that reported parameters are ``phi_row - phi_offset``.
    """

    phi_row: np.ndarray
    phi_sub: np.ndarray
    f_block: np.ndarray
    input_matrix: np.ndarray
    meas_matrix: np.ndarray
    process_cov: np.ndarray
    meas_cov: np.ndarray
    prior_mean: np.ndarray
    prior_cov: np.ndarray
    pwa: PwaFunction
    eta_meas_index: int = 0
    eta_meas_scale: float = 1.0
    phi_offset: np.ndarray | None = None
    name: str = "pwass"

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)
        set_("phi_row", _readonly(self.phi_row, 1))
        n_x = self.phi_row.size
        if n_x < 2:
            raise ModelStructureError("state dimension must be at least 2")
        set_("phi_sub", _readonly(self.phi_sub, 1))
        set_("f_block", _readonly(np.reshape(self.f_block, (n_x - 2, n_x))))
        set_("input_matrix", _readonly(self.input_matrix, 2))
        set_("meas_matrix", _readonly(self.meas_matrix, 2))
        set_("process_cov", _readonly(self.process_cov, 2))
        set_("meas_cov", _readonly(self.meas_cov, 2))
        set_("prior_mean", _readonly(self.prior_mean, 1))
        set_("prior_cov", _readonly(self.prior_cov, 2))
        offset = np.zeros(n_x) if self.phi_offset is None else self.phi_offset
        set_("phi_offset", _readonly(offset, 1))
        n_y = self.meas_matrix.shape[0]
        shapes = {
            "phi_sub": (self.phi_sub.shape, (n_x - 1,)),
            "input_matrix": (self.input_matrix.shape[:1], (n_x,)),
            "meas_matrix": (self.meas_matrix.shape, (n_y, n_x)),
            "process_cov": (self.process_cov.shape, (n_x, n_x)),
            "meas_cov": (self.meas_cov.shape, (n_y, n_y)),
            "prior_mean": (self.prior_mean.shape, (n_x,)),
            "prior_cov": (self.prior_cov.shape, (n_x, n_x)),
            "phi_offset": (self.phi_offset.shape, (n_x,)),
        }
        for key, (got, want) in shapes.items():
            if got != want:
                raise ModelStructureError(f"{key} has shape {got}, expected {want}")
        for key in ("process_cov", "meas_cov", "prior_cov"):
            _check_spd(getattr(self, key), key)
        if not 0 <= self.eta_meas_index < n_y:
            raise ModelStructureError(f"eta_meas_index {self.eta_meas_index} out of range")
        if self.eta_meas_scale == 0:
            raise ModelStructureError("eta_meas_scale must be nonzero")
        expected_row = np.zeros(n_x)
        expected_row[0] = self.eta_meas_scale
        if not np.allclose(self.meas_matrix[self.eta_meas_index], expected_row,
                           rtol=0, atol=1e-12):
            raise ModelStructureError(
                f"row {self.eta_meas_index} of C must measure eta directly")

    @property
    def n_x(self) -> int:
        return self.phi_row.size

    @property
    def n_y(self) -> int:
        return self.meas_matrix.shape[0]

    @property
    def n_u(self) -> int:
        return self.input_matrix.shape[1]

    @property
    def n_regions(self) -> int:
        return self.pwa.n_regions

    @property
    def boundaries(self) -> np.ndarray:
        return self.pwa.boundaries

    @property
    def eta_variance(self) -> float:
        """Variance of the direct eta measurement expressed in eta units."""
        i = self.eta_meas_index
        return float(self.meas_cov[i, i]) / self.eta_meas_scale ** 2

    def eta_measurements(self, y) -> np.ndarray:
        return np.asarray(y)[..., self.eta_meas_index] / self.eta_meas_scale

    def with_theta(self, theta: Theta) -> "PwassModel":
        return replace(self, phi_row=theta.phi_row, phi_sub=theta.phi_sub,
                       f_block=theta.f_block, pwa=theta.pwa(self.boundaries))


def _check_spd(m: np.ndarray, name: str) -> None:
    if m.shape[0] != m.shape[1] or not np.allclose(m, m.T, rtol=0, atol=1e-12):
        raise ModelStructureError(f"{name} is not symmetric")
    if np.linalg.eigvalsh(m).min() <= 0:
        raise ModelStructureError(f"{name} is not positive definite")


def theta_of(model: PwassModel, variant: str = CONTINUOUS) -> Theta:
    """Current parameter values of ``model`` in the requested variant."""
    pwa = model.pwa
    if variant == CONTINUOUS:
        gaps = pwa.continuity_gaps()
        if gaps.size and np.max(np.abs(gaps)) > 1e-9:
            raise ModelStructureError(
                "model's piecewise function is discontinuous; use the unconstrained variant")
        offsets = pwa.intercepts[:1]
    else:
        offsets = pwa.intercepts
    return Theta(pwa.slopes, offsets, model.f_block, model.phi_row, model.phi_sub, variant)


def assemble_submodel(model: PwassModel, theta: Theta, i: int) -> tuple[np.ndarray, np.ndarray]:
    """Affine submodel ``(A_i, b_i)`` for regime ``i``."""
    if not 0 <= i < theta.n_regions:
        raise IndexError(f"regime {i} out of range for {theta.n_regions} regions")
    A, b = assemble_all(model, theta)
    return A[i], b[i]


def assemble_all(model: PwassModel, theta: Theta) -> tuple[np.ndarray, np.ndarray]:
    """Stacked submodels, shapes ``(N_r, n_x, n_x)`` and ``(N_r, n_x)``."""
    n, n_x = theta.n_regions, theta.n_x
    if n != model.n_regions or n_x != model.n_x:
        raise ModelStructureError("theta dimensions do not match the model")
    A = np.zeros((n, n_x, n_x))
    A[:, 0, :] = theta.phi_row
    A[:, 1, 0] = theta.slopes
    A[:, 1, 1:] = theta.phi_sub
    A[:, 2:, :] = theta.f_block
    b = np.zeros((n, n_x))
    b[:, 1] = theta.intercepts(model.boundaries)
    return A, b


# ---------------------------------------------------------------------------
# model files

def _diag_cov(values, reading: str) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if reading == "std":
        return np.diag(v ** 2)
    if reading == "variance":
        return np.diag(v)
    raise ModelStructureError(f"noise reading must be 'std' or 'variance', got {reading!r}")


def _cov_entry(noise: dict, key: str, reading: str) -> np.ndarray:
    if f"{key}_cov" in noise:
        return np.asarray(noise[f"{key}_cov"], dtype=float)
    if f"{key}_diag" in noise:
        return _diag_cov(noise[f"{key}_diag"], reading)
    raise ModelStructureError(f"noise section needs {key}_cov or {key}_diag")


def _pwa_from_dict(d: dict) -> PwaFunction:
    l = d["boundaries"]
    if "knot_values" in d:
        return PwaFunction.from_knots(d["knot_values"], l)
    if "slopes" in d and "intercepts" in d:
        return PwaFunction(l, d["slopes"], d["intercepts"])
    if "slopes" in d and "b1" in d:
        return PwaFunction.from_continuity(d["slopes"], d["b1"], l)
    raise ModelStructureError("pwa section needs knot_values, slopes+b1 or slopes+intercepts")


def model_from_dict(d: dict, noise_reading: str | None = None) -> PwassModel:
    """Build a model from the parsed model-file mapping.

    ``noise_reading`` overrides the file's ``noise.reading`` switch, which
    decides whether ``*_diag`` entries are standard deviations or variances.
    """
    try:
        n_x = len(d["phi_row"])
        noise = d.get("noise", {})
        reading = noise_reading or noise.get("reading", "std")
        f_block = np.asarray(d.get("f_block", []), dtype=float).reshape(n_x - 2, n_x)
        return PwassModel(
            phi_row=d["phi_row"],
            phi_sub=d["phi_sub"],
            f_block=f_block,
            input_matrix=d["input_matrix"],
            meas_matrix=d["meas_matrix"],
            process_cov=_cov_entry(noise, "process", reading),
            meas_cov=_cov_entry(noise, "meas", reading),
            prior_mean=d.get("prior_mean", np.zeros(n_x)),
            prior_cov=_cov_entry(noise, "prior", reading),
            pwa=_pwa_from_dict(d["pwa"]),
            eta_meas_index=int(d.get("eta_meas_index", 0)),
            eta_meas_scale=float(d.get("eta_meas_scale", 1.0)),
            phi_offset=d.get("phi_offset"),
            name=d.get("name", "pwass"),
        )
    except KeyError as exc:
        raise ModelStructureError(f"model file is missing key {exc}") from None


def model_to_dict(model: PwassModel) -> dict:
    tolist = lambda a: np.asarray(a).tolist()
    return {
        "name": model.name,
        "phi_row": tolist(model.phi_row),
        "phi_offset": tolist(model.phi_offset),
        "phi_sub": tolist(model.phi_sub),
        "f_block": tolist(model.f_block),
        "input_matrix": tolist(model.input_matrix),
        "meas_matrix": tolist(model.meas_matrix),
        "eta_meas_index": model.eta_meas_index,
        "eta_meas_scale": model.eta_meas_scale,
        "prior_mean": tolist(model.prior_mean),
        "noise": {
            "process_cov": tolist(model.process_cov),
            "meas_cov": tolist(model.meas_cov),
            "prior_cov": tolist(model.prior_cov),
        },
        "pwa": {
            "boundaries": tolist(model.boundaries),
            "slopes": tolist(model.pwa.slopes),
            "intercepts": tolist(model.pwa.intercepts),
        },
    }


def read_model_file(path) -> dict:
    with open(path) as fh:
        d = yaml.safe_load(fh)
    if not isinstance(d, dict):
        raise ModelStructureError(f"{path}: model file must be a mapping")
    return d


def load_model(path, noise_reading: str | None = None) -> PwassModel:
    return model_from_dict(read_model_file(path), noise_reading)


def save_model(model: PwassModel, path, extra: dict | None = None) -> None:
    d = model_to_dict(model)
    if extra:
        d.update(extra)
    Path(path).write_text(yaml.safe_dump(d, sort_keys=False))
