"""Synthetic phantom patients, preprocessing, augmentation and the dataset directory format.

Dataset directory layout::

    meta.json   UTF-8 JSON: dims, class names, patient list, disease labels
    PID.vol     little-endian float32 volume, C-S-H-W order
    PID.lbl     unsigned bytes, S-H-W order
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DatasetError, ValidationError

FORMAT_NAME = "svgan-dataset"
FORMAT_VERSION = 1


@dataclass
class PatientRecord:
    id: str
    volume: np.ndarray  # [C, S, H, W] float32
    labels: np.ndarray  # [S, H, W] uint8
    disease: int
    spacing: tuple = (1.0, 1.0)

    @property
    def num_slices(self):
        return self.labels.shape[0]

    def slices_first(self):
        """Volume as ``[S, C, H, W]``, the layout the networks consume."""
        return np.ascontiguousarray(self.volume.transpose(1, 0, 2, 3))

    def validate(self, num_seg_classes=None):
        if self.volume.ndim != 4:
            raise ValidationError(f"patient {self.id}: volume must be C x S x H x W")
        if self.labels.shape != self.volume.shape[1:]:
            raise ValidationError(
                f"patient {self.id}: labels {self.labels.shape} vs volume {self.volume.shape[1:]}")
        if self.num_slices < 1:
            raise ValidationError(f"patient {self.id}: no slices")
        if not np.isfinite(self.volume).all():
            raise ValidationError(f"patient {self.id}: non-finite intensities")
        if num_seg_classes is not None and self.labels.size and self.labels.max() >= num_seg_classes:
            raise ValidationError(f"patient {self.id}: label outside [0, {num_seg_classes})")


@dataclass
class Dataset:
    records: list
    num_seg_classes: int
    num_diseases: int
    class_names: list = None
    disease_names: list = None

    def __post_init__(self):
        if self.class_names is None:
            self.class_names = default_class_names(self.num_seg_classes)
        if self.disease_names is None:
            self.disease_names = [f"disease{d}" for d in range(self.num_diseases)]

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def subset(self, records):
        return Dataset(list(records), self.num_seg_classes, self.num_diseases,
                       list(self.class_names), list(self.disease_names))


def default_class_names(num_seg_classes):
    names = ["background", "organ", "lesion"]
    names += [f"lesion_core{k}" for k in range(1, num_seg_classes - 2)]
    return names[:num_seg_classes]


# -- phantom generation -------------------------------------------------------

@dataclass
class PhantomConfig:
    num_patients: int = 100
    slices: int = 8
    height: int = 32
    width: int = 32
    num_modalities: int = 2
    num_seg_classes: int = 3
    num_diseases: int = 2
    lesion_fraction_target: float = 0.03
    noise_sigma: float = 0.35
    seed: int = 0

    def validate(self):
        for name in ("num_patients", "slices", "height", "width", "num_modalities", "num_diseases"):
            if getattr(self, name) < 1:
                raise ValidationError(f"phantom.{name} must be positive")
        if self.num_seg_classes < 3:
            raise ValidationError("phantom.num_seg_classes must be >= 3 (background, organ, lesion)")
        if not 0.0 < self.lesion_fraction_target <= 0.2:
            raise ValidationError(
                f"phantom.lesion_fraction_target must be in (0, 0.2], got {self.lesion_fraction_target}")
        if self.noise_sigma < 0:
            raise ValidationError("phantom.noise_sigma must be >= 0")
        return self


def _lesion_count(disease):
    return disease + 1


def _modality_contrasts(num_modalities, num_seg_classes):
    """Per-modality intensity for each class: background, organ, then lesion sub-regions.

    Modality 0 shows lesions hyper-intense, modality 1 hypo-intense, further
    modalities interpolate between the two.
    """
    table = np.zeros((num_modalities, num_seg_classes))
    for m in range(num_modalities):
        t = 0.0 if num_modalities == 1 else m / (num_modalities - 1)
        table[m, 0] = 0.1 + 0.2 * t
        table[m, 1] = 1.0 - 0.2 * t
        for k in range(2, num_seg_classes):
            step = (k - 1) * 0.45
            table[m, k] = (1.0 + step) * (1 - t) + (0.8 - 0.6 * step / (1 + step)) * t
    return table


def generate_phantoms(config):
    """Deterministic phantom patients for a given config (seed included).

    Every patient has an elliptical organ whose axes vary across slices and
    ``disease + 1`` spherical lesions inside it. Each lesion's in-plane
    cross-section grows and shrinks over the slice stack while its centre
    drifts, so neighbouring slices are correlated.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    S, H, W = config.slices, config.height, config.width
    mean_lesions = np.mean([_lesion_count(d) for d in range(config.num_diseases)])
    # sphere cross-sections average 2/3 of the equatorial area over the stack
    radius = math.sqrt(3.0 * config.lesion_fraction_target * H * W / (2.0 * math.pi * mean_lesions))
    organ_a, organ_b = 0.40 * H, 0.36 * W
    max_lesions = _lesion_count(config.num_diseases - 1)
    inner_a, inner_b = 0.8 * organ_a, 0.8 * organ_b
    if radius * 1.15 + 1.5 >= min(inner_a, inner_b) or \
            max_lesions * (1.15 * radius) ** 2 > 0.6 * inner_a * inner_b:
        raise ValidationError(
            f"infeasible phantom geometry: lesion radius {radius:.2f} px does not fit "
            f"{max_lesions} lesions inside an organ of {organ_a:.1f}x{organ_b:.1f} px")

    contrasts = _modality_contrasts(config.num_modalities, config.num_seg_classes)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    records = []
    width = len(str(config.num_patients - 1))
    for p in range(config.num_patients):
        disease = int(rng.integers(config.num_diseases))
        labels = _phantom_labels(rng, config, disease, radius, organ_a, organ_b, yy, xx)
        gains = rng.uniform(0.85, 1.15, size=config.num_modalities)
        volume = np.empty((config.num_modalities, S, H, W), dtype=np.float32)
        for m in range(config.num_modalities):
            clean = contrasts[m][labels] * gains[m]
            for s in range(S):
                clean[s] = ndimage.gaussian_filter(clean[s], sigma=0.8, mode="nearest")
            noisy = clean + rng.normal(0.0, config.noise_sigma, size=clean.shape)
            volume[m] = noisy.astype(np.float32)
        records.append(PatientRecord(f"P{p:0{width}d}", volume, labels.astype(np.uint8), disease))
    return Dataset(records, config.num_seg_classes, config.num_diseases)


def _phantom_labels(rng, config, disease, radius, organ_a, organ_b, yy, xx):
    S, H, W = config.slices, config.height, config.width
    labels = np.zeros((S, H, W), dtype=np.int64)
    cy, cx = H / 2 + rng.uniform(-1.5, 1.5), W / 2 + rng.uniform(-1.5, 1.5)
    phase = rng.uniform(0, math.pi)
    for s in range(S):
        scale = 0.9 + 0.1 * math.sin(math.pi * (s + 0.5) / S + phase)
        a, b = organ_a * scale, organ_b * scale
        labels[s][((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2 <= 1.0] = 1

    lesions = _place_lesions(rng, _lesion_count(disease), radius, organ_a * 0.8, organ_b * 0.8)

    centre = (S - 1) / 2.0
    half_extent = S / 2.0
    for oy, ox, r, drift in lesions:
        for s in range(S):
            u = (s - centre) / half_extent
            rs = r * math.sqrt(max(1.0 - u * u, 0.0))
            if rs <= 0:
                continue
            ly = cy + oy + drift[0] * (s - centre)
            lx = cx + ox + drift[1] * (s - centre)
            dist2 = (yy - ly) ** 2 + (xx - lx) ** 2
            for k in range(2, config.num_seg_classes):
                # nested sub-regions: each further lesion class sits inside the previous
                shrink = 1.0 - 0.35 * (k - 2)
                labels[s][dist2 <= (rs * shrink) ** 2] = k
    return labels


def _place_lesions(rng, count, radius, organ_a, organ_b):
    """Non-overlapping lesion centres (offsets from the organ centre) inside the smallest organ section."""
    radii = radius * rng.uniform(0.85, 1.15, size=count)
    for attempt in range(1000):
        if attempt and attempt % 200 == 0:
            radii = radius * rng.uniform(0.85, 1.15, size=count)  # an unlucky draw of sizes
        lesions = []
        for r in radii:
            ry = max(organ_a - r - 1.5, 0.0)
            rx = max(organ_b - r - 1.5, 0.0)
            # uniform point in the admissible ellipse
            rho, phi = math.sqrt(rng.random()), rng.uniform(0, 2 * math.pi)
            oy, ox = ry * rho * math.sin(phi), rx * rho * math.cos(phi)
            if any(math.hypot(oy - ly, ox - lx) <= (r + lr) * 1.05 for ly, lx, lr, _ in lesions):
                break
            lesions.append((oy, ox, r, rng.uniform(-0.25, 0.25, size=2)))
        else:
            return lesions
    raise ValidationError("infeasible phantom geometry: cannot place non-overlapping lesions")


def lesion_fraction(dataset):
    """Fraction of all pixels carrying a lesion class (>= 2)."""
    total = sum(r.labels.size for r in dataset)
    lesion = sum(int((r.labels >= 2).sum()) for r in dataset)
    return lesion / total


# -- preprocessing --------------------------------------------------------------

def zscore_normalize(volume, floor=1e-8):
    """Per-modality z-score over all slices and pixels (population std, floored)."""
    volume = np.asarray(volume)
    axes = tuple(range(1, volume.ndim))
    mu = volume.mean(axis=axes, keepdims=True, dtype=np.float64)
    sd = volume.std(axis=axes, keepdims=True, dtype=np.float64)
    # a (numerically) constant channel maps to zeros instead of amplified round-off
    out = np.where(sd > floor, (volume - mu) / np.maximum(sd, floor), 0.0)
    return out.astype(volume.dtype if np.issubdtype(volume.dtype, np.floating) else np.float64)


def normalize_record(record):
    return PatientRecord(record.id, zscore_normalize(record.volume), record.labels,
                         record.disease, record.spacing)


def split_patients(dataset, val_fraction, seed):
    """Disjoint train/validation split by patient id."""
    if not 0.0 <= val_fraction < 1.0:
        raise ValidationError(f"val_fraction must be in [0, 1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    n_val = int(round(val_fraction * len(dataset)))
    val = [dataset.records[i] for i in sorted(order[:n_val])]
    train = [dataset.records[i] for i in sorted(order[n_val:])]
    return dataset.subset(train), dataset.subset(val)


# -- augmentation -----------------------------------------------------------------

@dataclass
class AugmentationConfig:
    rotation_range: tuple = (-10.0, 10.0)
    scale_range: tuple = (0.9, 1.1)
    crop_fraction_range: tuple = (0.85, 1.0)
    gaussian_noise_sigma: float = 0.05
    p_rotate: float = 0.5
    p_scale: float = 0.5
    p_crop: float = 0.5
    p_noise: float = 0.5

    def validate(self):
        lo, hi = self.rotation_range
        if not -10.0 <= lo <= hi <= 10.0:
            raise ValidationError(f"augmentation.rotation_range must lie in [-10, 10], got {self.rotation_range}")
        if not 0 < self.scale_range[0] <= self.scale_range[1]:
            raise ValidationError("augmentation.scale_range must be positive and ordered")
        if not 0 < self.crop_fraction_range[0] <= self.crop_fraction_range[1] <= 1:
            raise ValidationError("augmentation.crop_fraction_range must lie in (0, 1]")
        if self.gaussian_noise_sigma < 0:
            raise ValidationError("augmentation.gaussian_noise_sigma must be >= 0")
        for name in ("p_rotate", "p_scale", "p_crop", "p_noise"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"augmentation.{name} must be a probability")
        return self


def augment(record, config, rng):
    """Randomly crop/resize, scale, rotate and add noise to one patient.

    One spatial transform is drawn per patient and applied to every slice and
    modality (bilinear) and to the labels (nearest neighbour), so slices stay
    aligned. Output extents equal the input extents.
    """
    config.validate()
    C, S, H, W = record.volume.shape
    angle = rng.uniform(*config.rotation_range) if rng.random() < config.p_rotate else 0.0
    scale = rng.uniform(*config.scale_range) if rng.random() < config.p_scale else 1.0
    crop = rng.uniform(*config.crop_fraction_range) if rng.random() < config.p_crop else 1.0
    shift = np.zeros(2)
    if crop < 1.0:
        # crop window centre stays inside the image
        slack = np.array([H, W]) * (1.0 - crop) / 2.0
        shift = rng.uniform(-slack, slack)
    add_noise = rng.random() < config.p_noise

    volume, labels = record.volume, record.labels
    if angle != 0.0 or scale != 1.0 or crop != 1.0:
        theta = math.radians(angle)
        rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        # output pixel -> input coordinate
        matrix = rot * (crop / scale)
        centre = np.array([(H - 1) / 2.0, (W - 1) / 2.0])
        offset = centre + shift - matrix @ centre
        volume = np.empty_like(record.volume)
        labels = np.empty_like(record.labels)
        for s in range(S):
            for c in range(C):
                volume[c, s] = ndimage.affine_transform(
                    record.volume[c, s], matrix, offset, order=1, mode="nearest")
            labels[s] = ndimage.affine_transform(
                record.labels[s], matrix, offset, order=0, mode="nearest")
    if add_noise and config.gaussian_noise_sigma > 0:
        noise = rng.normal(0.0, config.gaussian_noise_sigma, size=volume.shape)
        volume = (volume + noise).astype(record.volume.dtype)
    return PatientRecord(record.id, volume, labels, record.disease, record.spacing)


# -- dataset directory I/O ---------------------------------------------------------

def _atomic_write_bytes(path, payload):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save_dataset(dataset, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if not dataset.records:
        raise DatasetError("refusing to save an empty dataset")
    C, S, H, W = dataset.records[0].volume.shape
    patients = []
    for rec in dataset:
        rec.validate(dataset.num_seg_classes)
        if rec.volume.shape != (C, S, H, W):
            raise DatasetError(f"patient {rec.id}: volume shape {rec.volume.shape} differs from {(C, S, H, W)}")
        _atomic_write_bytes(path / f"{rec.id}.vol", rec.volume.astype("<f4").tobytes())
        _atomic_write_bytes(path / f"{rec.id}.lbl", rec.labels.astype(np.uint8).tobytes())
        patients.append({"id": rec.id, "disease": int(rec.disease), "spacing": list(rec.spacing)})
    meta = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "dims": {"modalities": C, "slices": S, "height": H, "width": W},
        "num_seg_classes": dataset.num_seg_classes,
        "num_diseases": dataset.num_diseases,
        "class_names": list(dataset.class_names),
        "disease_names": list(dataset.disease_names),
        "patients": patients,
    }
    _atomic_write_bytes(path / "meta.json", (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    return path


def load_dataset(path):
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.is_file():
        raise DatasetError(f"{path}: no meta.json")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetError(f"{meta_path}: unreadable ({exc})") from None
    if meta.get("format") != FORMAT_NAME:
        raise DatasetError(f"{meta_path}: bad format tag {meta.get('format')!r}")
    if meta.get("version") != FORMAT_VERSION:
        raise DatasetError(f"{meta_path}: unsupported version {meta.get('version')!r}")
    try:
        dims = meta["dims"]
        C, S, H, W = (int(dims[k]) for k in ("modalities", "slices", "height", "width"))
        num_classes = int(meta["num_seg_classes"])
        num_diseases = int(meta["num_diseases"])
        patients = meta["patients"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{meta_path}: missing or malformed field ({exc})") from None

    records = []
    for entry in patients:
        pid = entry["id"]
        disease = int(entry["disease"])
        if not 0 <= disease < num_diseases:
            raise DatasetError(f"patient {pid}: disease label {disease} outside [0, {num_diseases})")
        volume = _read_block(path / f"{pid}.vol", "<f4", C * S * H * W, pid).reshape(C, S, H, W)
        labels = _read_block(path / f"{pid}.lbl", np.uint8, S * H * W, pid).reshape(S, H, W)
        bad = np.argwhere(labels >= num_classes)
        if len(bad):
            s = int(bad[0][0])
            raise DatasetError(
                f"patient {pid}, slice {s}: label {int(labels[tuple(bad[0])])} >= num_seg_classes {num_classes}")
        if not np.isfinite(volume).all():
            raise DatasetError(f"patient {pid}: non-finite intensities")
        records.append(PatientRecord(pid, volume.astype(np.float32), labels.copy(), disease,
                                     tuple(entry.get("spacing", (1.0, 1.0)))))
    return Dataset(records, num_classes, num_diseases,
                   meta.get("class_names"), meta.get("disease_names"))


def _read_block(path, dtype, count, pid):
    if not path.is_file():
        raise DatasetError(f"patient {pid}: missing file {path.name}")
    raw = path.read_bytes()
    itemsize = np.dtype(dtype).itemsize
    if len(raw) != count * itemsize:
        raise DatasetError(
            f"patient {pid}: {path.name} has {len(raw)} bytes, expected {count * itemsize} (truncated or corrupt)")
    return np.frombuffer(raw, dtype=dtype)
