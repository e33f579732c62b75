"""Minimal reverse-mode differentiation on numpy arrays."""

from . import ops
from .gradcheck import check_gradients, numerical_gradient, relative_error
from .optim import RMSprop, RmsPropState, rmsprop_step
from .recurrent import LSTMParams, bilstm_sequence, truncated_normal
from .tensor import Tensor, as_tensor, make_node, topological_order

__all__ = [
    "LSTMParams",
    "RMSprop",
    "RmsPropState",
    "Tensor",
    "as_tensor",
    "bilstm_sequence",
    "check_gradients",
    "make_node",
    "numerical_gradient",
    "ops",
    "relative_error",
    "rmsprop_step",
    "topological_order",
    "truncated_normal",
]
