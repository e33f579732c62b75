"""Adversarial, weighted cross-entropy and weighted L1 loss terms."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .diffcore import Tensor, as_tensor, ops
from .errors import NumericError, ShapeError, ValidationError

EPS = 1e-7


@dataclass
class LossBreakdown:
    adv_d: float
    adv_g: float
    seg_ce: float
    cls_l1: float
    total: float

    TERMS = ("adv_d", "adv_g", "seg_ce", "cls_l1", "total")

    def as_dict(self):
        return asdict(self)

    def check_finite(self, step):
        for term in self.TERMS:
            value = getattr(self, term)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at step {step}: {term}={value}")


def bce(scores, target):
    """Mean binary cross-entropy; scores are clamped to ``[EPS, 1 - EPS]``."""
    scores = as_tensor(scores)
    s = ops.clip(scores, EPS, 1.0 - EPS)
    t = np.asarray(target, dtype=s.dtype)
    if t.ndim == 0:
        if t == 1:
            return -ops.mean(ops.log(s))
        if t == 0:
            return -ops.mean(ops.log(1.0 - s))
    terms = ops.log(s) * t + ops.log(1.0 - s) * (1.0 - t)
    return -ops.mean(terms)


def discriminator_loss(d_real, d_fake):
    """Real maps should score 1, generated maps 0."""
    return bce(d_real, 1.0) + bce(d_fake, 0.0)


def generator_adversarial_loss(d_fake, saturating=False):
    """Non-saturating ``-log D(fake)`` by default; ``saturating=True`` gives ``log(1 - D(fake))``."""
    if saturating:
        s = ops.clip(as_tensor(d_fake), EPS, 1.0 - EPS)
        return ops.mean(ops.log(1.0 - s))
    return bce(d_fake, 1.0)


def adversarial_losses(d_real, d_fake, saturating=False):
    """``(adv_d, adv_g)`` from per-pixel discriminator maps of identical shape."""
    d_real, d_fake = as_tensor(d_real), as_tensor(d_fake)
    if d_real.shape != d_fake.shape:
        raise ShapeError(f"discriminator maps differ: real {d_real.shape} vs fake {d_fake.shape}")
    return discriminator_loss(d_real, d_fake), generator_adversarial_loss(d_fake, saturating)


def _class_axis(ndim):
    return -3 if ndim >= 3 else -1


def one_hot(labels, num_classes, axis=-3, dtype=np.float64):
    """One-hot encode integer labels, inserting the class axis at ``axis``."""
    labels = np.asarray(labels)
    out = (labels[..., None] == np.arange(num_classes)).astype(dtype)
    return np.moveaxis(out, -1, axis) if out.ndim > 1 else out


def weighted_cce(probs, labels, weights):
    """Mean over pixels of ``-w[y] * log(max(p[y], EPS))``.

    ``probs`` carries the class axis third from the end (or last for vectors
    and ``[pixels, classes]`` matrices); ``labels`` has the same shape
    without it.
    """
    probs = as_tensor(probs)
    w = np.asarray(getattr(weights, "w", weights), dtype=probs.dtype)
    num_classes = w.shape[0]
    axis = _class_axis(probs.ndim)
    labels = np.asarray(labels)
    if probs.shape[axis] != num_classes:
        raise ShapeError(f"{probs.shape[axis]} probability channels but {num_classes} class weights")
    expected = probs.shape[:axis % probs.ndim] + probs.shape[axis % probs.ndim + 1:]
    if labels.shape != expected:
        raise ShapeError(f"labels shape {labels.shape} != {expected}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValidationError(f"label outside [0, {num_classes})")
    mask = one_hot(labels, num_classes, axis=axis, dtype=probs.dtype)
    picked = ops.sum(probs * mask, axis=axis)
    nll = -ops.log(ops.clip(picked, EPS, 1.0))
    return ops.mean(nll * w[labels])


def weighted_l1(pred, target, weights):
    """``sum_c w_c * |target_c - pred_c|``, averaged over leading batch axes."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    w = np.asarray(getattr(weights, "w", weights), dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if w.shape != pred.shape[-1:]:
        raise ShapeError(f"{w.shape[0]} weights for {pred.shape[-1]} disease classes")
    per_sample = ops.sum(ops.abs(pred - target) * w, axis=-1)
    return per_sample if per_sample.ndim == 0 else ops.mean(per_sample)


def total_generator_loss(adv_g, seg_ce, cls_l1, coeffs=(1.0, 1.0, 1.0)):
    """Weighted sum of the generator's three terms; unit coefficients give the plain sum."""
    a, s, c = coeffs
    terms = [(a, adv_g), (s, seg_ce), (c, cls_l1)]
    total = None
    for k, term in terms:
        if k == 0:
            continue
        part = as_tensor(term) * k
        total = part if total is None else total + part
    return total if total is not None else Tensor(0.0)
