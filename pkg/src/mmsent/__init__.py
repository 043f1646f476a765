"""Multi-level attention network for image-text sentiment classification."""

__version__ = "0.1.0"

from .tensor import Tensor, TensorError, backward, no_grad

__all__ = ["Tensor", "TensorError", "backward", "no_grad", "__version__"]
