"""Music emotion recognition on mel spectrograms with a numpy autodiff core."""

from .tensor import Tensor, no_grad

__all__ = ["Tensor", "no_grad"]

__version__ = "0.1.0"
