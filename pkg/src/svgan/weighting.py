"""Training-set class statistics and selective class weights.

Each class gets ``w_c = sqrt((T / N) / (f_c + N))`` where ``f_c`` is the
class frequency over the whole training split, ``T`` the total count and
``N`` the number of classes. The square root damps the very large ratios a
heavily imbalanced dataset produces; classes larger than the mean
cardinality get weights below one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class ClassStats:
    num_classes: int
    freq: np.ndarray
    total: int

    def __post_init__(self):
        freq = np.asarray(self.freq, dtype=np.int64)
        if self.num_classes < 2:
            raise ValidationError(f"need at least 2 classes, got {self.num_classes}")
        if freq.shape != (self.num_classes,):
            raise ValidationError(f"freq has shape {freq.shape}, expected ({self.num_classes},)")
        if (freq < 0).any():
            raise ValidationError("class frequencies must be non-negative")
        if self.total <= 0:
            raise ValidationError("class statistics need at least one labelled sample")
        if int(freq.sum()) != self.total:
            raise ValidationError(f"frequencies sum to {int(freq.sum())}, total is {self.total}")
        object.__setattr__(self, "freq", freq)


@dataclass(frozen=True)
class ClassWeights:
    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.ndim != 1 or not (w > 0).all():
            raise ValidationError("class weights must be a positive vector")
        object.__setattr__(self, "w", w)

    def __len__(self):
        return len(self.w)

    def __getitem__(self, c):
        return self.w[c]

    @classmethod
    def uniform(cls, num_classes):
        return cls(np.ones(num_classes))


def compute_stats(label_volumes, num_classes):
    """Count labels of every class over a collection of integer label arrays.

    Also accepts a flat sequence of scalar labels (one per patient), which is
    how disease-level weights are derived.
    """
    counts = np.zeros(num_classes, dtype=np.int64)
    seen = False
    for labels in _iter_arrays(label_volumes):
        arr = np.asarray(labels)
        if arr.size == 0:
            continue
        seen = True
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.array_equal(arr, np.round(arr)):
                raise ValidationError("labels must be integers")
            arr = arr.astype(np.int64)
        lo, hi = int(arr.min()), int(arr.max())
        if lo < 0 or hi >= num_classes:
            bad = lo if lo < 0 else hi
            raise ValidationError(f"label {bad} outside [0, {num_classes})")
        counts += np.bincount(arr.ravel(), minlength=num_classes)
    if not seen:
        raise ValidationError("cannot compute class statistics of an empty dataset")
    return ClassStats(num_classes, counts, int(counts.sum()))


def _iter_arrays(label_volumes):
    if isinstance(label_volumes, np.ndarray):
        yield label_volumes
        return
    for item in label_volumes:
        yield item


def compute_weights(stats):
    """Selective weights ``sqrt((T/N) / (f_c + N))`` for every class."""
    n = stats.num_classes
    mean_cardinality = stats.total / n
    return ClassWeights(np.sqrt(mean_cardinality / (stats.freq.astype(np.float64) + n)))


def weights_csv(stats, weights):
    """``class,freq,weight`` rows, one per class, with a header line."""
    lines = ["class,freq,weight"]
    for c in range(stats.num_classes):
        lines.append(f"{c},{int(stats.freq[c])},{weights.w[c]:.5f}")
    return "\n".join(lines) + "\n"
