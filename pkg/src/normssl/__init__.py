"""Self-supervised learning (BYOL, SimCLR) with pluggable normalization."""
from .config import ExperimentConfig, preset
from .tensor import Tensor, no_grad

__all__ = ["ExperimentConfig", "Tensor", "no_grad", "preset"]
__version__ = "0.1.0"
