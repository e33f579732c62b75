"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numerical_gradient(fn, arrays, index, eps=1e-5):
    """d fn / d arrays[index] by central differences; ``fn`` maps arrays to a float."""
    target = arrays[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        up = fn(arrays)
        flat[k] = orig - eps
        down = fn(arrays)
        flat[k] = orig
        gflat[k] = (up - down) / (2 * eps)
    return grad


def relative_error(analytic, numeric):
    """Max-norm relative error ``|a - n|_inf / max(|a|_inf, |n|_inf)`` (floored at 1e-8)."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(op, arrays, rng, eps=1e-5, wrt=None):
    """Compare analytic and numerical gradients of a random projection of ``op``'s output.

    ``op`` maps a list of :class:`Tensor` to a Tensor. Returns the worst
    relative error over the inputs listed in ``wrt`` (all by default).
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    probe = op([Tensor(a) for a in arrays])
    weights = rng.standard_normal(probe.shape)

    def scalar(arrs):
        return float(np.sum(op([Tensor(a) for a in arrs]).data * weights))

    tensors = [Tensor(a.copy(), requires_grad=i in wrt) for i, a in enumerate(arrays)]
    out = op(tensors)
    (out * weights).sum().backward()
    worst = 0.0
    for i in wrt:
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(arrays[i])
        numeric = numerical_gradient(scalar, arrays, i, eps)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
