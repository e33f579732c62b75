"""RMSprop parameter updates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericError, ShapeError, ValidationError


@dataclass
class RmsPropState:
    """Running average of squared gradients for one parameter."""

    v: np.ndarray
    rho: float = 0.9
    eps: float = 1e-8
    learning_rate: float = 1e-4

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.rho < 1.0:
            raise ValidationError(f"rho must be in [0, 1), got {self.rho}")
        if self.eps <= 0:
            raise ValidationError(f"eps must be > 0, got {self.eps}")


def rmsprop_step(param, grad, state):
    """Apply one RMSprop update in place and return ``(param, state)``.

    ``v <- rho*v + (1-rho)*g**2`` then ``param <- param - lr*g/(sqrt(v)+eps)``.
    """
    if grad.shape != param.shape or state.v.shape != param.shape:
        raise ShapeError(f"rmsprop_step: param {param.shape}, grad {grad.shape}, v {state.v.shape}")
    if not np.isfinite(grad).all():
        raise NumericError("rmsprop_step: non-finite gradient")
    rho = state.rho
    state.v *= rho
    state.v += (1.0 - rho) * grad * grad
    param -= state.learning_rate * grad / (np.sqrt(state.v) + state.eps)
    return param, state


@dataclass
class RMSprop:
    """RMSprop over a named parameter dict (``name -> Tensor``)."""

    params: dict
    learning_rate: float = 1e-4
    rho: float = 0.9
    eps: float = 1e-8
    states: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            if name not in self.states:
                self.states[name] = RmsPropState(
                    np.zeros_like(p.data), self.rho, self.eps, self.learning_rate)

    def set_learning_rate(self, lr):
        self.learning_rate = lr
        for state in self.states.values():
            state.learning_rate = lr

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            try:
                rmsprop_step(p.data, p.grad.astype(p.data.dtype, copy=False), self.states[name])
            except NumericError as exc:
                raise NumericError(f"{exc} for parameter {name!r}") from None
