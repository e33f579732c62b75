"""Bidirectional LSTM over the slice axis, composed from differentiable primitives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError
from . import ops
from .tensor import Tensor


@dataclass
class LSTMParams:
    """One direction's weights; gate blocks are ordered input, forget, candidate, output."""

    w_x: Tensor  # [F, 4H]
    w_h: Tensor  # [H, 4H]
    b: Tensor  # [4H]

    @property
    def hidden(self):
        return self.w_h.shape[0]

    @classmethod
    def init(cls, features, hidden, rng, std=0.02, dtype=np.float64):
        def draw(shape):
            return Tensor(truncated_normal(rng, shape, std).astype(dtype), requires_grad=True)
        return cls(draw((features, 4 * hidden)), draw((hidden, 4 * hidden)),
                   Tensor(np.zeros(4 * hidden, dtype=dtype), requires_grad=True))

    def tensors(self):
        return {"w_x": self.w_x, "w_h": self.w_h, "b": self.b}


def truncated_normal(rng, shape, std):
    """Normal draws redrawn until they fall within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def _run_direction(xw, params, steps):
    """Unroll one direction. ``xw`` holds the precomputed input projections ``[B, S, 4H]``."""
    batch = xw.shape[0]
    hidden = params.hidden
    h = Tensor(np.zeros((batch, hidden), dtype=xw.dtype))
    c = Tensor(np.zeros((batch, hidden), dtype=xw.dtype))
    outputs = {}
    for t in steps:
        gates = xw[:, t, :] + ops.matmul(h, params.w_h) + params.b
        i = ops.sigmoid(gates[:, 0:hidden])
        f = ops.sigmoid(gates[:, hidden:2 * hidden])
        g = ops.tanh(gates[:, 2 * hidden:3 * hidden])
        o = ops.sigmoid(gates[:, 3 * hidden:4 * hidden])
        c = f * c + i * g
        h = o * ops.tanh(c)
        outputs[t] = h
    return outputs


def bilstm_sequence(x, forward, backward):
    """Run a bidirectional LSTM over axis 1 of ``x``.

    ``x`` is ``[B, S, F]`` (or ``[S, F]`` for a single sequence). Each step's
    output is the forward hidden state concatenated with the backward one,
    giving ``[B, S, 2H]``.
    """
    single = x.ndim == 2
    if single:
        x = ops.reshape(x, (1,) + x.shape)
    if x.ndim != 3:
        raise ShapeError(f"bilstm_sequence: expected [B,S,F], got {x.shape}", dim="rank")
    steps = x.shape[1]
    if steps == 0:
        raise ShapeError("bilstm_sequence: empty sequence", dim="S")
    for params, tag in ((forward, "forward"), (backward, "backward")):
        if params.w_x.shape[0] != x.shape[2]:
            raise ShapeError(
                f"bilstm_sequence: {tag} weights expect {params.w_x.shape[0]} features, got {x.shape[2]}",
                dim="F")
    fwd = _run_direction(ops.matmul(x, forward.w_x), forward, range(steps))
    bwd = _run_direction(ops.matmul(x, backward.w_x), backward, range(steps - 1, -1, -1))
    out = ops.stack([ops.concat([fwd[t], bwd[t]], axis=-1) for t in range(steps)], axis=1)
    return out[0] if single else out
