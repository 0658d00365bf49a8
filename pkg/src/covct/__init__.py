"""Two-stage CT screening and lesion segmentation on a numpy-only CNN engine."""

from .tensor import GradTape, Tensor, backward

__version__ = "0.1.0"

__all__ = ["GradTape", "Tensor", "backward", "__version__"]
