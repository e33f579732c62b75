"""Segmentation and classification quality metrics.

Undefined values (Hausdorff with an empty mask, sensitivity with no
positives) are reported as ``None`` and excluded from averages, with the
number of exclusions kept alongside.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ShapeError, ValidationError

UNDEFINED = None


def _check_same_shape(a, b, name):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes differ {a.shape} vs {b.shape}")


def dice(pred, gt):
    """``2|A & B| / (|A| + |B|)``; 1.0 when both masks are empty."""
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    _check_same_shape(pred, gt, "dice")
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / denom


def boundary(mask):
    """Mask pixels with at least one axis-neighbour outside the mask or outside the image."""
    mask = np.asarray(mask, bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = np.ones_like(mask)
    core = tuple(slice(1, -1) for _ in range(mask.ndim))
    for ax in range(mask.ndim):
        for shift in (-1, 1):
            neighbour = np.roll(padded, shift, axis=ax)[core]
            interior &= neighbour
    return mask & ~interior


def hausdorff(pred, gt):
    """Symmetric Hausdorff distance between the boundary pixel centres of two masks.

    Returns ``None`` when either mask is empty.
    """
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    _check_same_shape(pred, gt, "hausdorff")
    if not pred.any() or not gt.any():
        return UNDEFINED
    a = np.argwhere(boundary(pred)).astype(np.float64)
    b = np.argwhere(boundary(gt)).astype(np.float64)
    d = cdist(a, b)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def sensitivity(pred, gt, cls=None):
    """True-positive rate ``TP / (TP + FN)``.

    With ``cls`` given, ``pred`` and ``gt`` are label maps and positives are
    pixels of that class; otherwise they are binary masks. ``None`` when the
    reference has no positives.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    _check_same_shape(pred, gt, "sensitivity")
    if cls is not None:
        pred, gt = pred == cls, gt == cls
    pred, gt = pred.astype(bool), gt.astype(bool)
    positives = int(gt.sum())
    if positives == 0:
        return UNDEFINED
    return int(np.logical_and(pred, gt).sum()) / positives


def composite_regions(label_map, grouping, num_classes=None):
    """Union masks for each named class group, e.g. ``{"WT": [1, 2, 3]}``."""
    label_map = np.asarray(label_map)
    out = {}
    for name, classes in grouping.items():
        classes = list(classes)
        for c in classes:
            if c < 0 or (num_classes is not None and c >= num_classes):
                raise ValidationError(f"region {name!r} references unknown class {c}")
        out[name] = np.isin(label_map, classes)
    return out


def default_grouping(num_classes):
    """Each foreground class on its own, plus their union as ``foreground``."""
    grouping = {f"class{c}": [c] for c in range(1, num_classes)}
    if num_classes > 2:
        grouping["foreground"] = list(range(1, num_classes))
    return grouping


def accuracy(pred, true):
    pred, true = list(pred), list(true)
    if len(pred) != len(true):
        raise ShapeError(f"accuracy: {len(pred)} predictions for {len(true)} labels")
    if not true:
        raise ValidationError("accuracy of an empty label list")
    return sum(int(p == t) for p, t in zip(pred, true)) / len(true)


METRICS = ("dice", "hausdorff", "sensitivity")


@dataclass
class MetricsReport:
    """Per-patient, per-region metric rows plus patient-averaged summaries."""

    regions: list
    rows: list = field(default_factory=list)
    disease_pred: list = field(default_factory=list)
    disease_true: list = field(default_factory=list)

    def add_patient(self, patient_id, pred_labels, gt_labels, grouping):
        pred_regions = composite_regions(pred_labels, grouping)
        gt_regions = composite_regions(gt_labels, grouping)
        for name in self.regions:
            p, g = pred_regions[name], gt_regions[name]
            self.rows.append({
                "patient": patient_id,
                "region": name,
                "dice": dice(p, g),
                "hausdorff": hausdorff(p, g),
                "sensitivity": sensitivity(p, g),
            })

    @property
    def disease_accuracy(self):
        return accuracy(self.disease_pred, self.disease_true) if self.disease_true else UNDEFINED

    def summary(self):
        """Mean of every metric per region over patients, skipping undefined values."""
        out = {}
        for region in self.regions:
            rows = [r for r in self.rows if r["region"] == region]
            entry = {}
            for metric in METRICS:
                values = [r[metric] for r in rows if r[metric] is not None]
                entry[metric] = float(np.mean(values)) if values else UNDEFINED
                entry[f"{metric}_excluded"] = len(rows) - len(values)
            out[region] = entry
        return {"regions": out, "disease_accuracy": self.disease_accuracy,
                "num_patients": len({r["patient"] for r in self.rows})}

    def mean(self, metric, regions=None):
        """Average of a summary metric over ``regions`` (all by default)."""
        summary = self.summary()["regions"]
        values = [summary[r][metric] for r in (regions or self.regions)
                  if summary[r][metric] is not None]
        return float(np.mean(values)) if values else UNDEFINED

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["patient", "region", *METRICS], lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
        return buf.getvalue()

    def to_json(self):
        data = self.summary()
        data["disease_pred"] = [int(d) for d in self.disease_pred]
        data["disease_true"] = [int(d) for d in self.disease_true]
        return json.dumps(data, indent=2, sort_keys=True)
