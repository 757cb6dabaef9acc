"""Semi-supervised sequential VAE for text classification on a numpy autodiff engine."""

from .autodiff import RngStream, Tensor, backward, finite_difference_check
from .config import RunConfig
from .estimators import EstimatorConfig, total_objective
from .model import SSVAE, ModelConfig
from .training import run_training

__all__ = [
    "RngStream",
    "Tensor",
    "backward",
    "finite_difference_check",
    "RunConfig",
    "EstimatorConfig",
    "total_objective",
    "SSVAE",
    "ModelConfig",
    "run_training",
]
__version__ = "0.1.0"
