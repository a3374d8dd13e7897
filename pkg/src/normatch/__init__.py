"""Semi-supervised learning with a normalizing-flow consensus classifier."""

from .diffcore import NumericError, ShapeError, Tensor, backward, grad_check, no_grad
from .training import WeightPolicy, parse_policy

__version__ = "0.1.0"

__all__ = [
    "NumericError",
    "ShapeError",
    "Tensor",
    "WeightPolicy",
    "backward",
    "grad_check",
    "no_grad",
    "parse_policy",
    "__version__",
]
