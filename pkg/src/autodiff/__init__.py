from . import functional
from .gradcheck import GradientProbe, finite_difference_check, probe_parameter_gradients
from .tensor import ComputeGraph, Function, Tensor, as_tensor, backward, parameter, zero_grad

__all__ = [
    "ComputeGraph",
    "Function",
    "GradientProbe",
    "Tensor",
    "as_tensor",
    "backward",
    "finite_difference_check",
    "functional",
    "parameter",
    "probe_parameter_gradients",
    "zero_grad",
]
