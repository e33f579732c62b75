"""Differentiable operations.

Spatial ops accept a single image ``[C, H, W]`` or a batch ``[N, C, H, W]``;
the channel axis is always third from the end.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError, ValidationError
from .tensor import Tensor, as_tensor, make_node


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _pair(a, b):
    # python/numpy constants adopt the dtype of the tensor operand
    if isinstance(a, Tensor):
        return a, as_tensor(b, dtype=None if isinstance(b, Tensor) else a.dtype)
    return as_tensor(a, dtype=b.dtype), b


# -- elementwise arithmetic ----------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    return make_node(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = _pair(a, b)
    return make_node(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = _pair(a, b)
    return make_node(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul")


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data
    return make_node(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape),
                   _unbroadcast(-g * out / b.data, b.shape)),
        "div")


def neg(a):
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent):
    if isinstance(exponent, Tensor):
        raise TypeError("power supports scalar exponents only")
    return make_node(
        a.data ** exponent, (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),), "pow")


def exp(a):
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return make_node(out, (a,), lambda g: (g / a.data,), "log")


def tanh(a):
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a):
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a):
    mask = a.data > 0
    return make_node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a, slope=0.2):
    x = a.data
    out = np.maximum(x, x * x.dtype.type(slope))

    def backward(g):
        scale = np.where(x > 0, x.dtype.type(1.0), x.dtype.type(slope))
        return (g * scale,)
    return make_node(out, (a,), backward, "leaky_relu")


def abs(a):  # noqa: A001
    sign = np.sign(a.data)
    return make_node(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def clip(a, lo, hi):
    """Clamp to ``[lo, hi]``; gradient passes only where the input is inside."""
    inside = (a.data >= lo) & (a.data <= hi)
    return make_node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# -- reductions and shape ops -------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return make_node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)
    return make_node(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), backward, "mean")


def reshape(a, shape):
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    inv = None if axes is None else np.argsort(axes)
    return make_node(np.transpose(a.data, axes), (a,),
                     lambda g: (np.transpose(g, inv),), "transpose")


def _is_basic_index(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(a, index):
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)
    return make_node(a.data[index], (a,), backward, "getitem")


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim:
            raise ShapeError(f"concat: rank {t.ndim} != {ndim}")
        for d in range(ndim):
            if d != ax and t.shape[d] != tensors[0].shape[d]:
                raise ShapeError(
                    f"concat: dimension {d} mismatch ({t.shape[d]} vs {tensors[0].shape[d]})", dim=d)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))
    return make_node(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"stack: shape {t.shape} != {shape}")

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))
    return make_node(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


def _channel_axis(ndim):
    return -3 if ndim >= 3 else -1


def concat_channel(tensors):
    return concat(tensors, _channel_axis(as_tensor(tensors[0]).ndim))


# -- linear layers ---------------------------------------------------------------

def matmul(a, b):
    a, b = _pair(a, b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions {a.shape} @ {b.shape}", dim=-1)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return make_node(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def dense(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` shaped ``[in, out]``."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"dense: input features {x.shape[-1]} != weight rows {weight.shape[0]}", dim=-1)
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# -- normalisation-style heads -----------------------------------------------------

def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return make_node(out, (a,), backward, "softmax")


def softmax_channel(a):
    """Softmax over the class channel (third axis from the end, or the last for vectors)."""
    return softmax(a, axis=_channel_axis(a.ndim))


def dropout(a, p, training, rng=None):
    """Inverted dropout: kept units are scaled by ``1/(1-p)``; identity at inference."""
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValidationError("dropout in training mode needs an rng")
    mask = (rng.random(a.shape) >= p).astype(a.dtype) / a.dtype.type(1.0 - p)
    return make_node(a.data * mask, (a,), lambda g: (g * mask,), "dropout")


# -- spatial ops ------------------------------------------------------------------

def _as_batch(t, name):
    if t.ndim == 3:
        return t.data[None], True
    if t.ndim == 4:
        return t.data, False
    raise ShapeError(f"{name}: expected [C,H,W] or [N,C,H,W], got shape {t.shape}", dim="rank")


def _im2col(xb, k):
    """``[N,C,H,W]`` -> contiguous ``[C*k*k, N*H*W]`` columns of the zero-padded input."""
    n, c, h, w = xb.shape
    p = k // 2
    xt = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=xb.dtype)
    xt[:, :, p:p + h, p:p + w] = xb.transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, n, h, w), dtype=xb.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + h, j:j + w]
    return cols.reshape(c * k * k, n * h * w)


def _col2im(cols, shape, k):
    """Adjoint of :func:`_im2col`."""
    n, c, h, w = shape
    p = k // 2
    cols = cols.reshape(c, k, k, n, h, w)
    out = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + h, j:j + w] += cols[:, i, j]
    return np.ascontiguousarray(out[:, :, p:p + h, p:p + w].transpose(1, 0, 2, 3))


def conv2d(x, weight, bias=None):
    """Stride-1 cross-correlation with zero "same" padding; odd square kernels."""
    xb, single = _as_batch(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be [C_out,C_in,k,k], got {weight.shape}", dim="rank")
    c_out, c_in, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be odd and square, got {kh}x{kw}", dim="k")
    if xb.shape[1] != c_in:
        raise ShapeError(
            f"conv2d: input channels {xb.shape[1]} != kernel C_in {c_in}", dim="C_in")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)", dim="C_out")
    k = kh
    n, _, h, w = xb.shape
    cols = _im2col(xb, k)
    w2 = weight.data.reshape(c_out, -1)
    out = w2 @ cols  # O, N*H*W
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(c_out, n, h, w).transpose(1, 0, 2, 3))

    def backward(g):
        gb = g[None] if single else g
        g2 = np.ascontiguousarray(gb.transpose(1, 0, 2, 3)).reshape(c_out, -1)
        gx = gw = gbias = None
        if x.requires_grad:
            gx = _col2im(w2.T @ g2, xb.shape, k)
            gx = gx[0] if single else gx
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gbias = g2.sum(axis=1)
        return gx, gw, gbias

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out[0] if single else out, parents, backward, "conv2d")


def maxpool2d(x, window=2):
    """Non-overlapping max pooling; ties route the gradient to the first maximum (row-major)."""
    xb, single = _as_batch(x, "maxpool2d")
    n, c, h, w = xb.shape
    if h % window or w % window:
        raise ShapeError(f"maxpool2d: spatial extent {h}x{w} not divisible by {window}", dim="H" if h % window else "W")
    ho, wo = h // window, w // window
    blocks = xb.reshape(n, c, ho, window, wo, window).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, ho, wo, window * window)
    arg = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, arg, axis=-1)[..., 0]

    def backward(g):
        gb = g[None] if single else g
        full = np.zeros((n, c, ho, wo, window * window), dtype=gb.dtype)
        np.put_along_axis(full, arg, gb[..., None], axis=-1)
        full = full.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5)
        full = full.reshape(n, c, h, w)
        return (full[0] if single else full,)
    return make_node(out[0] if single else out, (x,), backward, "maxpool2d")


def upconv2d(x, weight, bias=None):
    """Stride-2 transposed convolution with a 2x2 kernel ``[C_in, C_out, 2, 2]``; doubles H and W."""
    xb, single = _as_batch(x, "upconv2d")
    if weight.ndim != 4 or weight.shape[2:] != (2, 2):
        raise ShapeError(f"upconv2d: kernel must be [C_in,C_out,2,2], got {weight.shape}", dim="k")
    c_in, c_out = weight.shape[:2]
    if xb.shape[1] != c_in:
        raise ShapeError(f"upconv2d: input channels {xb.shape[1]} != kernel C_in {c_in}", dim="C_in")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"upconv2d: bias shape {bias.shape} != ({c_out},)", dim="C_out")
    n, _, h, w = xb.shape
    wd = weight.data
    t = np.tensordot(xb, wd, axes=([1], [0]))  # N,H,W,O,2,2
    out = t.transpose(0, 3, 1, 4, 2, 5).reshape(n, c_out, 2 * h, 2 * w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        gb = g[None] if single else g
        g6 = gb.reshape(n, c_out, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5)  # N,H,W,O,2,2
        gx = gw = gbias = None
        if x.requires_grad:
            gx = np.tensordot(g6, wd, axes=([3, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
            gx = np.ascontiguousarray(gx[0] if single else gx)
        if weight.requires_grad:
            gw = np.tensordot(xb, g6, axes=([0, 2, 3], [0, 1, 2]))
        if bias is not None and bias.requires_grad:
            gbias = gb.sum(axis=(0, 2, 3))
        return gx, gw, gbias

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out[0] if single else out, parents, backward, "upconv2d")


def instance_norm(x, gamma, beta, eps=1e-5):
    """Normalise each (sample, channel) plane to zero mean and unit variance, then scale and shift."""
    xb, single = _as_batch(x, "instance_norm")
    c = xb.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"instance_norm: affine params must be ({c},)", dim="C")
    m = xb.shape[2] * xb.shape[3]
    mu = xb.mean(axis=(2, 3), keepdims=True)
    centered = xb - mu
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    gd, bd = gamma.data[None, :, None, None], beta.data[None, :, None, None]
    out = xhat * gd + bd

    def backward(g):
        gb = g[None] if single else g
        gx = None
        if x.requires_grad:
            dxhat = gb * gd
            gx = inv_std / m * (
                m * dxhat
                - dxhat.sum(axis=(2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(2, 3), keepdims=True))
            gx = gx[0] if single else gx
        ggamma = (gb * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = gb.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        return gx, ggamma, gbeta
    return make_node(out[0] if single else out, (x, gamma, beta), backward, "instance_norm")


def global_avg_pool(x):
    """Mean over the two spatial axes: ``[..., C, H, W] -> [..., C]``."""
    return mean(x, axis=(-2, -1))


def broadcast_spatial(x, height, width):
    """Tile a ``[..., C]`` tensor over a ``height x width`` grid."""
    out = np.broadcast_to(x.data[..., None, None], x.shape + (height, width)).copy()
    return make_node(out, (x,), lambda g: (g.sum(axis=(-2, -1)),), "broadcast_spatial")
