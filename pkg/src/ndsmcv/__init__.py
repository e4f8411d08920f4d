"""Score-based generative models with Gaussian-mixture Langevin noising,
nonlinear denoising score matching and neural control variates."""

from ._validation import (
    CheckpointParseError,
    DegenerateFitError,
    InvalidInputError,
    SimulationDivergedError,
    TrainingDivergedError,
)
from .datasets import EvalReport, SquaresSpec, eval_samples, make_squares_dataset, squares_asymmetric
from .dynamics import VP, GMLangevin, TimeGrid, TrajectoryBatch, TrajectoryRecord, ZeroDrift, make_time_grid
from .gmm import GaussianMixture, GaussianMixtureEM, fit_gmm_em
from .training import TrainConfig, train_dsm, train_ndsm_cv

__version__ = "0.1.0"
