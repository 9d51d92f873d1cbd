"""Monte-Carlo EM identification of piecewise affine state-space models."""

__version__ = "0.1.0"

from .em import EmConfig, EmTrace, e_step, run_em
from .model import PwaFunction, PwassModel, Theta, assemble_submodel, eval_pwa, region_of
from .simulator import SimConfig, Trajectory, gripen_model, simulate

__all__ = [
    "EmConfig", "EmTrace", "PwaFunction", "PwassModel", "SimConfig", "Theta",
    "Trajectory", "assemble_submodel", "e_step", "eval_pwa", "gripen_model",
    "region_of", "run_em", "simulate",
]
