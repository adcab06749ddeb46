"""Physics-informed Koopman modeling and self-tuning moving horizon estimation.

The package trains a stochastic linear model of a nonlinear process in a
learned lifted space, combining trajectory data with partially known
first-principles equations, and uses the result to run an online state
estimator that solves one convex program per sampling instant.
"""

from .data import Scaler, TrajectoryDataset, fit_scaler, generate_dataset
from .mhe import MheConfig, MheProblem, MheSolution, run_estimator
from .model import KoopmanModel, build_D, load_model, save_model
from .process import DisturbanceConfig, ProcessParams, cstr_rhs, rk4_step, simulate
from .training import (
    LossWeights,
    TrainConfig,
    TrainReport,
    evaluate_prediction,
    fit,
    pretrain_noise_net,
)

__all__ = [
    "DisturbanceConfig",
    "KoopmanModel",
    "LossWeights",
    "MheConfig",
    "MheProblem",
    "MheSolution",
    "ProcessParams",
    "Scaler",
    "TrainConfig",
    "TrainReport",
    "TrajectoryDataset",
    "build_D",
    "cstr_rhs",
    "evaluate_prediction",
    "fit",
    "fit_scaler",
    "generate_dataset",
    "load_model",
    "pretrain_noise_net",
    "rk4_step",
    "run_estimator",
    "save_model",
    "simulate",
]

__version__ = "0.1.0"
