"""Meta-learned per-sample test-time adaptation for shifting online streams."""

__version__ = "0.1.0"

from .tensor import Tensor, backward, grad, no_grad, set_default_dtype  # noqa: F401
