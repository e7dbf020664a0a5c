"""One-shot imitation from observation-only demonstrations under domain shift.

A meta-learned policy adapts to a new task from a single video of a
demonstrator whose appearance differs from the robot's, using a learned
temporal adaptation objective; everything runs on a hand-built reverse-mode
autodiff that supports differentiating through gradient steps.
"""

from .tensor import Tensor, parameter, grad, no_grad
from .params import ParameterVector

__all__ = ["Tensor", "parameter", "grad", "no_grad", "ParameterVector"]

__version__ = "0.1.0"
