"""Wide-and-deep survival analysis on point clouds and tabular covariates."""

from .autodiff import Tensor, backward
from .metrics import concordance_index
from .survival import SurvivalRecord, cox_loss
from .widedeep import ModelConfig, WideDeepModel

__all__ = [
    "ModelConfig",
    "SurvivalRecord",
    "Tensor",
    "WideDeepModel",
    "backward",
    "concordance_index",
    "cox_loss",
]
__version__ = "0.1.0"
