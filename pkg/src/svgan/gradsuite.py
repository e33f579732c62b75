"""Finite-difference suite over every differentiable primitive and loss term.

Each case draws small random inputs, kept away from kinks (relu/abs/clip
thresholds, max-pool ties) so central differences stay meaningful.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .diffcore import LSTMParams, bilstm_sequence, check_gradients, ops
from .losses import (adversarial_losses, bce, discriminator_loss, generator_adversarial_loss,
                     total_generator_loss, weighted_cce, weighted_l1)


def _away(x, margin=0.05):
    """Push values at least ``margin`` away from zero."""
    return np.sign(x + (x == 0)) * (np.abs(x) + margin)


def _distinct(rng, shape, spacing=0.05):
    """Values with pairwise gaps of at least ``spacing`` (no ties for max-pool)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * spacing - n * spacing / 2).reshape(shape)


def _probs(rng, shape, axis):
    z = rng.standard_normal(shape)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _unit(rng, shape):
    return rng.uniform(0.05, 0.95, size=shape)


def _binary(op):
    def build(rng):
        shape = tuple(rng.integers(1, 4, size=rng.integers(1, 3)))
        other = shape[-1:] if rng.random() < 0.3 else shape  # exercise broadcasting sometimes
        return op, [rng.standard_normal(shape), rng.standard_normal(other)]
    return build


def _unary(fn, sample=None):
    def build(rng):
        shape = tuple(rng.integers(1, 5, size=rng.integers(1, 3)))
        x = sample(rng, shape) if sample else rng.standard_normal(shape)
        return (lambda t: fn(t[0])), [x]
    return build


def _case_div(rng):
    shape = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
    b = _away(rng.standard_normal(shape), 0.5)
    return (lambda t: ops.div(t[0], t[1])), [rng.standard_normal(shape), b]


def _case_power(rng):
    p = float(rng.choice([2.0, 3.0, 0.5, -1.0]))
    shape = (int(rng.integers(1, 5)),)
    x = rng.uniform(0.3, 2.0, size=shape)
    return (lambda t: ops.power(t[0], p)), [x]


def _case_clip(rng):
    x = rng.uniform(-2, 2, size=(int(rng.integers(2, 6)),))
    x = np.where(np.abs(np.abs(x) - 1.0) < 0.05, x * 1.2, x)
    return (lambda t: ops.clip(t[0], -1.0, 1.0)), [x]


def _case_sum(rng):
    x = rng.standard_normal((2, 3, int(rng.integers(1, 4))))
    axis = [None, 0, 1, -1][rng.integers(4)]
    keep = bool(rng.integers(0, 2))
    return (lambda t: ops.sum(t[0], axis=None if axis is None else int(axis), keepdims=keep)), [x]


def _case_mean(rng):
    x = rng.standard_normal((int(rng.integers(1, 4)), 3, 2))
    axis = [None, 0, 2, (1, 2)][rng.integers(4)]
    return (lambda t: ops.mean(t[0], axis=axis)), [x]


def _case_reshape(rng):
    x = rng.standard_normal((2, 3, 2))
    return (lambda t: ops.reshape(t[0], (3, 4))), [x]


def _case_transpose(rng):
    x = rng.standard_normal((2, 3, 4))
    axes = tuple(int(a) for a in rng.permutation(3))
    return (lambda t: ops.transpose(t[0], axes)), [x]


def _case_getitem(rng):
    x = rng.standard_normal((4, 5))
    if rng.random() < 0.5:
        index = (slice(1, 3), slice(None, None, 2))
    else:
        index = (rng.integers(0, 4, size=3), rng.integers(0, 5, size=3))  # repeats accumulate
    return (lambda t: ops.getitem(t[0], index)), [x]


def _case_concat(rng):
    axis = int(rng.integers(0, 2))
    a = rng.standard_normal((2, 3))
    b = rng.standard_normal((1, 3) if axis == 0 else (2, 1))
    return (lambda t: ops.concat([t[0], t[1]], axis)), [a, b]


def _case_stack(rng):
    shape = (2, int(rng.integers(1, 4)))
    return (lambda t: ops.stack([t[0], t[1]], axis=1)), [rng.standard_normal(shape), rng.standard_normal(shape)]


def _case_concat_channel(rng):
    h, w = (int(v) for v in rng.integers(1, 4, size=2))
    return (lambda t: ops.concat_channel([t[0], t[1]])), [rng.standard_normal((1, 2, h, w)),
                                                         rng.standard_normal((1, 3, h, w))]


def _case_matmul(rng):
    m, k, n = (int(v) for v in rng.integers(1, 5, size=3))
    return (lambda t: ops.matmul(t[0], t[1])), [rng.standard_normal((m, k)), rng.standard_normal((k, n))]


def _case_dense(rng):
    b, i, o = (int(v) for v in rng.integers(1, 5, size=3))
    return (lambda t: ops.dense(t[0], t[1], t[2])), [rng.standard_normal((b, i)), rng.standard_normal((i, o)),
                                                     rng.standard_normal(o)]


def _case_softmax(rng):
    x = rng.standard_normal((int(rng.integers(1, 4)), int(rng.integers(2, 5))))
    return (lambda t: ops.softmax(t[0], axis=-1)), [x]


def _case_softmax_channel(rng):
    x = rng.standard_normal((2, int(rng.integers(2, 5)), 2, 3))
    return (lambda t: ops.softmax_channel(t[0])), [x]


def _case_dropout(rng):
    seed = int(rng.integers(0, 2**31))
    x = rng.standard_normal((3, 4))
    # a fresh generator per call keeps the mask fixed across perturbations
    return (lambda t: ops.dropout(t[0], 0.5, True, np.random.default_rng(seed))), [x]


def _case_conv2d(rng):
    n, c, o = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
    k = int(rng.choice([1, 3]))
    h, w = (int(v) for v in rng.integers(2, 5, size=2))
    arrays = [rng.standard_normal((n, c, h, w)), rng.standard_normal((o, c, k, k)), rng.standard_normal(o)]
    return (lambda t: ops.conv2d(t[0], t[1], t[2])), arrays


def _case_maxpool(rng):
    c = int(rng.integers(1, 3))
    h, w = (2 * int(v) for v in rng.integers(1, 3, size=2))
    return (lambda t: ops.maxpool2d(t[0])), [_distinct(rng, (1, c, h, w))]


def _case_upconv(rng):
    c, o = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    h, w = (int(v) for v in rng.integers(1, 4, size=2))
    arrays = [rng.standard_normal((1, c, h, w)), rng.standard_normal((c, o, 2, 2)), rng.standard_normal(o)]
    return (lambda t: ops.upconv2d(t[0], t[1], t[2])), arrays


def _case_instance_norm(rng):
    c = int(rng.integers(1, 3))
    x = rng.standard_normal((2, c, 3, 3))
    return (lambda t: ops.instance_norm(t[0], t[1], t[2])), [x, rng.standard_normal(c), rng.standard_normal(c)]


def _case_gap(rng):
    return (lambda t: ops.global_avg_pool(t[0])), [rng.standard_normal((2, 3, 2, 4))]


def _case_broadcast(rng):
    return (lambda t: ops.broadcast_spatial(t[0], 2, 3)), [rng.standard_normal((2, 3))]


def _case_bilstm(rng):
    f, h, s = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
    shapes = [(s, f), (f, 4 * h), (h, 4 * h), (4 * h,), (f, 4 * h), (h, 4 * h), (4 * h,)]
    arrays = [rng.standard_normal(sh) * (1.0 if i == 0 else 0.5) for i, sh in enumerate(shapes)]

    def op(t):
        return bilstm_sequence(t[0], LSTMParams(t[1], t[2], t[3]), LSTMParams(t[4], t[5], t[6]))
    return op, arrays


def _case_bce(rng):
    shape = (2, int(rng.integers(1, 4)))
    target = rng.integers(0, 2, size=shape).astype(float)
    return (lambda t: bce(t[0], target)), [_unit(rng, shape)]


def _case_adv_d(rng):
    shape = (1, 2, int(rng.integers(1, 3)))
    return (lambda t: discriminator_loss(t[0], t[1])), [_unit(rng, shape), _unit(rng, shape)]


def _case_adv_g(rng):
    saturating = bool(rng.integers(0, 2))
    return (lambda t: generator_adversarial_loss(t[0], saturating)), [_unit(rng, (2, 3))]


def _case_adv_pair(rng):
    shape = (2, 2)

    def op(t):
        d, g = adversarial_losses(t[0], t[1])
        return d + g * 0.5
    return op, [_unit(rng, shape), _unit(rng, shape)]


def _case_cce(rng):
    k = int(rng.integers(2, 5))
    shape = (2, k, 2, 3)
    labels = rng.integers(0, k, size=(2, 2, 3))
    w = rng.uniform(0.2, 3.0, size=k)
    return (lambda t: weighted_cce(t[0], labels, w)), [_probs(rng, shape, 1)]


def _case_cce_logits(rng):
    # through the softmax, as used in training
    k = int(rng.integers(2, 4))
    labels = rng.integers(0, k, size=(1, 3, 3))
    w = rng.uniform(0.2, 3.0, size=k)
    return (lambda t: weighted_cce(ops.softmax_channel(t[0]), labels, w)), [rng.standard_normal((1, k, 3, 3))]


def _case_l1(rng):
    d = int(rng.integers(2, 5))
    pred = _probs(rng, (3, d), 1)
    target = np.eye(d)[rng.integers(0, d, size=3)]
    # keep |target - pred| away from 0
    pred = np.where(np.abs(target - pred) < 0.02, pred + 0.05, pred)
    w = rng.uniform(0.2, 3.0, size=d)
    return (lambda t: weighted_l1(t[0], target, w)), [pred]


def _case_total(rng):
    coeffs = tuple(rng.uniform(0, 2, size=3))
    return (lambda t: total_generator_loss(ops.sum(t[0]), ops.sum(t[1]), ops.sum(t[2]), coeffs)), \
        [rng.standard_normal(2), rng.standard_normal(3), rng.standard_normal(1)]


CASES = {
    "add": _binary(lambda t: ops.add(t[0], t[1])),
    "sub": _binary(lambda t: ops.sub(t[0], t[1])),
    "mul": _binary(lambda t: ops.mul(t[0], t[1])),
    "div": _case_div,
    "neg": _unary(ops.neg),
    "power": _case_power,
    "exp": _unary(ops.exp),
    "log": _unary(ops.log, lambda rng, s: rng.uniform(0.2, 3.0, size=s)),
    "tanh": _unary(ops.tanh),
    "sigmoid": _unary(ops.sigmoid, lambda rng, s: rng.standard_normal(s) * 4),
    "relu": _unary(ops.relu, lambda rng, s: _away(rng.standard_normal(s))),
    "leaky_relu": _unary(ops.leaky_relu, lambda rng, s: _away(rng.standard_normal(s))),
    "abs": _unary(ops.abs, lambda rng, s: _away(rng.standard_normal(s))),
    "clip": _case_clip,
    "sum": _case_sum,
    "mean": _case_mean,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "getitem": _case_getitem,
    "concat": _case_concat,
    "stack": _case_stack,
    "concat_channel": _case_concat_channel,
    "matmul": _case_matmul,
    "dense": _case_dense,
    "softmax": _case_softmax,
    "softmax_channel": _case_softmax_channel,
    "dropout": _case_dropout,
    "conv2d": _case_conv2d,
    "maxpool2d": _case_maxpool,
    "upconv2d": _case_upconv,
    "instance_norm": _case_instance_norm,
    "global_avg_pool": _case_gap,
    "broadcast_spatial": _case_broadcast,
    "bilstm_sequence": _case_bilstm,
    "bce": _case_bce,
    "discriminator_loss": _case_adv_d,
    "generator_adversarial_loss": _case_adv_g,
    "adversarial_losses": _case_adv_pair,
    "weighted_cce": _case_cce,
    "weighted_cce_softmax": _case_cce_logits,
    "weighted_l1": _case_l1,
    "total_generator_loss": _case_total,
}


@dataclass
class OpResult:
    name: str
    instances: int
    max_rel_error: float


def run_suite(instances=50, seed=0, names=None, eps=1e-5):
    """Worst relative error per op over ``instances`` random draws (double precision)."""
    rng = np.random.default_rng(seed)
    results = []
    for name in names or CASES:
        worst = 0.0
        for _ in range(instances):
            op, arrays = CASES[name](rng)
            worst = max(worst, check_gradients(op, arrays, rng, eps=eps))
        results.append(OpResult(name, instances, worst))
    return results


def format_results(results, tolerance=1e-4):
    lines = []
    for r in results:
        status = "ok" if r.max_rel_error < tolerance else "FAIL"
        lines.append(f"{r.name:28s} n={r.instances:3d} max_rel_err={r.max_rel_error:.3e} {status}")
    return "\n".join(lines)


def timed_suite(instances=50, seed=0):
    start = time.perf_counter()
    results = run_suite(instances, seed)
    return results, time.perf_counter() - start

