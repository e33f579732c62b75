"""scikit-learn style wrappers around the weighting and training pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import AugmentationConfig, Dataset, PatientRecord, normalize_record
from .errors import ShapeError, ValidationError
from .metrics import default_grouping
from .models import GeneratorConfig, matching_discriminator_config
from .trainer import TrainConfig, evaluate, fit, predict_records
from .weighting import compute_stats, compute_weights


def check_label_volumes(y, num_classes=None):
    """Validate a stack of integer label maps; returns an int64 array."""
    y = np.asarray(y)
    if y.size == 0:
        raise ValidationError("empty label collection")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValidationError("labels must be integers")
    y = y.astype(np.int64)
    if y.min() < 0 or (num_classes is not None and y.max() >= num_classes):
        raise ValidationError(f"labels must lie in [0, {num_classes})")
    return y


def check_volumes(X, labels=None):
    """Validate ``X [patients, C, S, H, W]`` (finite floats), optionally against ``labels [patients, S, H, W]``."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 5:
        raise ShapeError(f"expected X with 5 axes [patients, C, S, H, W], got shape {X.shape}", dim=0)
    if not np.isfinite(X).all():
        raise ValidationError("X contains non-finite values")
    if labels is not None:
        expected = (X.shape[0],) + X.shape[2:]
        if labels.shape != expected:
            raise ShapeError(f"labels shape {labels.shape} does not match X, expected {expected}", dim=0)
    return X


class SelectiveClassWeighter(BaseEstimator, TransformerMixin):
    """Learn selective class weights from label maps; ``transform`` maps labels to per-pixel weights."""

    def __init__(self, num_classes=None):
        self.num_classes = num_classes

    def fit(self, y, _unused=None):
        y = check_label_volumes(y, self.num_classes)
        n = self.num_classes or int(y.max()) + 1
        self.stats_ = compute_stats([y], max(n, 2))
        self.weights_ = compute_weights(self.stats_).w
        self.n_classes_ = self.stats_.num_classes
        return self

    def transform(self, y):
        check_is_fitted(self, "weights_")
        y = check_label_volumes(y, self.n_classes_)
        return self.weights_[y]


class AdversarialSegmenter(BaseEstimator):
    """Joint segmentation and disease classifier trained adversarially.

    ``X`` is ``[patients, modalities, slices, H, W]``; ``y`` is a pair
    ``(label_maps [patients, slices, H, W], diseases [patients])``.
    """

    def __init__(self, base_channels=8, num_seg_classes=3, num_diseases=2, max_epochs=20,
                 batch_size=4, learning_rate=1e-4, weighting_enabled=True, augment=True,
                 disc_base_channels=4, disc_pixel_channels=8, random_state=0):
        self.base_channels = base_channels
        self.num_seg_classes = num_seg_classes
        self.num_diseases = num_diseases
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weighting_enabled = weighting_enabled
        self.augment = augment
        self.disc_base_channels = disc_base_channels
        self.disc_pixel_channels = disc_pixel_channels
        self.random_state = random_state

    def _dataset(self, X, labels=None, diseases=None):
        X = check_volumes(X, labels)
        n = len(X)
        if labels is None:
            labels = np.zeros((n,) + X.shape[2:], dtype=np.uint8)
        if diseases is None:
            diseases = np.zeros(n, dtype=np.int64)
        records = [PatientRecord(f"p{i:04d}", X[i], labels[i].astype(np.uint8), int(diseases[i]))
                   for i in range(n)]
        return Dataset(records, self.num_seg_classes, self.num_diseases)

    def fit(self, X, y):
        labels, diseases = y
        labels = check_label_volumes(labels, self.num_seg_classes)
        diseases = check_label_volumes(diseases, self.num_diseases)
        dataset = self._dataset(X, labels, diseases)
        _, C, _, H, W = np.shape(X)
        gen = GeneratorConfig(in_channels=C, base_channels=self.base_channels, height=H, width=W,
                              num_seg_classes=self.num_seg_classes, num_diseases=self.num_diseases)
        disc = matching_discriminator_config(gen, base_channels=self.disc_base_channels,
                                             pixel_channels=self.disc_pixel_channels)
        cfg = TrainConfig(learning_rate=self.learning_rate, max_epochs=self.max_epochs,
                          batch_size=self.batch_size, seed=self.random_state,
                          weighting_enabled=self.weighting_enabled, augment=self.augment,
                          val_fraction=0.0, eval_every=self.max_epochs)
        trainer = fit(dataset, gen, disc, cfg, augmentation=AugmentationConfig(), val_dataset=dataset.subset([]))
        self.generator_ = trainer.generator
        self.discriminator_ = trainer.discriminator
        self.log_ = trainer.log
        self.seg_weights_ = trainer.seg_weights.w
        return self

    def _predict(self, X):
        check_is_fitted(self, "generator_")
        dataset = self._dataset(X)
        records = [normalize_record(r) for r in dataset]
        return predict_records(self.generator_, records)

    def predict_proba(self, X):
        """Per-pixel class probabilities ``[patients, slices, classes, H, W]``."""
        return np.stack([seg for seg, _ in self._predict(X)])

    def predict(self, X):
        """Label maps ``[patients, slices, H, W]`` (argmax, ties to the lowest class)."""
        return np.argmax(self.predict_proba(X), axis=2)

    def predict_disease(self, X):
        return np.array([int(np.argmax(d)) for _, d in self._predict(X)])

    def score(self, X, y):
        """Mean foreground Dice over patients."""
        check_is_fitted(self, "generator_")
        labels, diseases = y
        dataset = self._dataset(X, check_label_volumes(labels, self.num_seg_classes), diseases)
        grouping = default_grouping(self.num_seg_classes)
        report = evaluate(self.generator_, dataset, self.num_seg_classes, grouping)
        regions = [r for r in report.regions if r != "foreground"]
        return report.mean("dice", regions)
