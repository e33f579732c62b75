"""Alternating generator/discriminator optimisation, evaluation and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import read_checkpoint, write_checkpoint
from .data import AugmentationConfig, Dataset, augment, normalize_record, split_patients
from .diffcore import RMSprop
from .errors import CheckpointError, NumericError, ValidationError
from .losses import (LossBreakdown, discriminator_loss, generator_adversarial_loss, one_hot,
                     total_generator_loss, weighted_cce, weighted_l1)
from .metrics import MetricsReport, default_grouping
from .models import (DiscriminatorConfig, GeneratorConfig, build_discriminator, build_generator)
from .weighting import ClassWeights, compute_stats, compute_weights

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    max_epochs: int = 120
    batch_size: int = 4
    d_steps_per_g: int = 1
    rho: float = 0.9
    eps: float = 1e-8
    seed: int = 0
    weighting_enabled: bool = True
    adv_coeff: float = 1.0
    seg_coeff: float = 1.0
    cls_coeff: float = 1.0
    eval_every: int = 1
    val_fraction: float = 0.2
    augment: bool = True
    test_time_augmentation: bool = False
    lr_decay_every: int = 0  # epochs; 0 keeps the rate constant
    lr_decay_factor: float = 0.5
    saturating_adv: bool = False
    debug_isolation: bool = False

    def validate(self):
        if self.learning_rate <= 0:
            raise ValidationError("train.learning_rate must be > 0")
        if not 1 <= self.max_epochs <= 120:
            raise ValidationError(f"train.max_epochs must be in [1, 120], got {self.max_epochs}")
        for name in ("batch_size", "d_steps_per_g", "eval_every"):
            if getattr(self, name) < 1:
                raise ValidationError(f"train.{name} must be >= 1")
        if not 0 <= self.rho < 1:
            raise ValidationError("train.rho must be in [0, 1)")
        if self.eps <= 0:
            raise ValidationError("train.eps must be > 0")
        for name in ("adv_coeff", "seg_coeff", "cls_coeff"):
            if getattr(self, name) < 0:
                raise ValidationError(f"train.{name} must be >= 0")
        if not 0 <= self.val_fraction < 1:
            raise ValidationError("train.val_fraction must be in [0, 1)")
        if self.lr_decay_every < 0 or not 0 < self.lr_decay_factor <= 1:
            raise ValidationError("train.lr_decay_every must be >= 0 and lr_decay_factor in (0, 1]")
        return self

    @property
    def coeffs(self):
        return (self.adv_coeff, self.seg_coeff, self.cls_coeff)

    def learning_rate_at(self, epoch):
        if not self.lr_decay_every:
            return self.learning_rate
        return self.learning_rate * self.lr_decay_factor ** (epoch // self.lr_decay_every)


LOG_FIELDS = ("step", "epoch", "adv_d", "adv_g", "seg_ce", "cls_l1", "total")


@dataclass
class TrainLog:
    seed: int
    config_hash: str
    steps: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    wall_clock: float = 0.0

    def losses(self):
        return [tuple(row[k] for k in LOG_FIELDS) for row in self.steps]

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.steps)
        return buf.getvalue()


def config_hash(*configs):
    payload = json.dumps([asdict(c) for c in configs], sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def class_weights_for(train_set, enabled):
    """Segmentation (pixel-level) and disease (patient-level) weights from the training split."""
    if not enabled:
        return ClassWeights.uniform(train_set.num_seg_classes), ClassWeights.uniform(train_set.num_diseases)
    seg = compute_weights(compute_stats((r.labels for r in train_set), train_set.num_seg_classes))
    dis = compute_weights(compute_stats(np.array([r.disease for r in train_set]), train_set.num_diseases))
    return seg, dis


def stack_batch(records, dtype=np.float32):
    """``(x [B,S,C,H,W], labels [B,S,H,W], diseases [B])`` from patient records."""
    x = np.stack([r.slices_first() for r in records]).astype(dtype, copy=False)
    labels = np.stack([r.labels for r in records]).astype(np.int64)
    diseases = np.array([r.disease for r in records], dtype=np.int64)
    return x, labels, diseases


def _param_digest(module):
    h = hashlib.sha256()
    for name, p in module.params.items():
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()


class Trainer:
    """Owns a generator/discriminator pair, their optimisers and the class weights."""

    def __init__(self, gen_config, disc_config, train_config, seg_weights=None,
                 disease_weights=None, dtype=np.float32):
        self.gen_config = gen_config.validate()
        self.disc_config = disc_config.validate()
        self.config = train_config.validate()
        if (disc_config.in_channels, disc_config.num_seg_classes, disc_config.height, disc_config.width) != \
                (gen_config.in_channels, gen_config.num_seg_classes, gen_config.height, gen_config.width):
            raise ValidationError("discriminator geometry must match the generator's")
        self.dtype = np.dtype(dtype)
        cfg = self.config
        self.generator = build_generator(gen_config, seed=cfg.seed, dtype=self.dtype)
        self.discriminator = build_discriminator(disc_config, seed=cfg.seed + 1, dtype=self.dtype)
        self.opt_g = RMSprop(self.generator.params, cfg.learning_rate, cfg.rho, cfg.eps)
        self.opt_d = RMSprop(self.discriminator.params, cfg.learning_rate, cfg.rho, cfg.eps)
        self.seg_weights = seg_weights or ClassWeights.uniform(gen_config.num_seg_classes)
        self.disease_weights = disease_weights or ClassWeights.uniform(gen_config.num_diseases)
        self.rng = np.random.default_rng(cfg.seed)
        self.step_index = 0
        self.epoch = 0

    @property
    def config_hash(self):
        return config_hash(self.gen_config, self.disc_config, self.config)

    def set_learning_rate(self, lr):
        self.opt_g.set_learning_rate(lr)
        self.opt_d.set_learning_rate(lr)

    def discriminator_step(self, x, real_maps, fake_maps):
        """One discriminator update on real vs generated maps; returns the loss value."""
        batch = len(x)
        self.opt_d.zero_grad()
        scores = self.discriminator(np.concatenate([x, x]), np.concatenate([real_maps, fake_maps]))
        adv_d = discriminator_loss(scores[:batch], scores[batch:])
        if not np.isfinite(adv_d.item()):
            raise NumericError(f"non-finite loss at step {self.step_index}: adv_d={adv_d.item()}")
        adv_d.backward()
        try:
            self.opt_d.step()
        except NumericError as exc:
            raise NumericError(f"step {self.step_index}: {exc}") from None
        return adv_d.item()

    def step(self, x, labels, diseases):
        """Discriminator update(s) followed by one generator update on a batch of patients."""
        cfg, G, D = self.config, self.generator, self.discriminator
        real = one_hot(labels, self.gen_config.num_seg_classes, axis=-3, dtype=self.dtype)
        disease_target = np.eye(self.gen_config.num_diseases, dtype=self.dtype)[diseases]
        seg, disease = G(x, train=True, rng=self.rng)
        fake = seg.data

        before = _param_digest(G) if cfg.debug_isolation else None
        for _ in range(cfg.d_steps_per_g):
            adv_d = self.discriminator_step(x, real, fake)
        if before is not None and _param_digest(G) != before:
            raise RuntimeError(f"step {self.step_index}: generator changed during discriminator update")

        before = _param_digest(D) if cfg.debug_isolation else None
        D.set_requires_grad(False)
        try:
            adv_g = generator_adversarial_loss(D(x, seg), cfg.saturating_adv)
            seg_ce = weighted_cce(seg, labels, self.seg_weights)
            cls_l1 = weighted_l1(disease, disease_target, self.disease_weights)
            total = total_generator_loss(adv_g, seg_ce, cls_l1, cfg.coeffs)
            breakdown = LossBreakdown(adv_d, adv_g.item(), seg_ce.item(), cls_l1.item(), total.item())
            breakdown.check_finite(self.step_index)
            self.opt_g.zero_grad()
            total.backward()
            try:
                self.opt_g.step()
            except NumericError as exc:
                raise NumericError(f"step {self.step_index}: {exc}") from None
        finally:
            D.set_requires_grad(True)
        if before is not None and _param_digest(D) != before:
            raise RuntimeError(f"step {self.step_index}: discriminator changed during generator update")
        self.step_index += 1
        return breakdown

    # -- persistence ------------------------------------------------------------
    def descriptor(self):
        return {
            "format_version": CHECKPOINT_VERSION,
            "generator": asdict(self.gen_config),
            "discriminator": asdict(self.disc_config),
            "train": asdict(self.config),
            "config_hash": self.config_hash,
            "seg_weights": self.seg_weights.w.tolist(),
            "disease_weights": self.disease_weights.w.tolist(),
            "step": self.step_index,
            "epoch": self.epoch,
            "rng_state": self.rng.bit_generator.state,
        }

    def save_checkpoint(self, path):
        blocks = {}
        for prefix, module, opt in (("G", self.generator, self.opt_g), ("D", self.discriminator, self.opt_d)):
            for name, p in module.params.items():
                blocks[f"{prefix}/{name}"] = p.data
            for name, state in opt.states.items():
                blocks[f"{prefix}.opt/{name}"] = state.v
        return write_checkpoint(path, self.descriptor(), blocks)

    @classmethod
    def load_checkpoint(cls, path, gen_config=None, disc_config=None):
        """Restore a trainer; if configs are given they must equal the stored ones."""
        descriptor, blocks = read_checkpoint(path)
        if descriptor.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported format_version {descriptor.get('format_version')!r}")
        try:
            gc = GeneratorConfig(**descriptor["generator"])
            dc = DiscriminatorConfig(**descriptor["discriminator"])
            tc = TrainConfig(**descriptor["train"])
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"{path}: descriptor does not describe a model ({exc})") from None
        for given, stored, what in ((gen_config, gc, "generator"), (disc_config, dc, "discriminator")):
            if given is not None and asdict(given) != asdict(stored):
                raise CheckpointError(f"{path}: {what} config mismatch; stored {asdict(stored)}")
        trainer = cls(gc, dc, tc, ClassWeights(descriptor["seg_weights"]),
                      ClassWeights(descriptor["disease_weights"]))
        for prefix, module, opt in (("G", trainer.generator, trainer.opt_g),
                                    ("D", trainer.discriminator, trainer.opt_d)):
            state = {}
            for name in module.params:
                key = f"{prefix}/{name}"
                if key not in blocks:
                    raise CheckpointError(f"{path}: missing parameter {key!r}")
                if blocks[key].shape != module.params[name].shape:
                    raise CheckpointError(
                        f"{path}: parameter {key!r} has shape {blocks[key].shape}, "
                        f"config expects {module.params[name].shape}")
                state[name] = blocks[key]
                opt_key = f"{prefix}.opt/{name}"
                if opt_key not in blocks or blocks[opt_key].shape != module.params[name].shape:
                    raise CheckpointError(f"{path}: missing or malformed optimiser state {opt_key!r}")
                opt.states[name].v = blocks[opt_key].astype(trainer.dtype).copy()
            module.load_state_dict(state)
        trainer.step_index = int(descriptor.get("step", 0))
        trainer.epoch = int(descriptor.get("epoch", 0))
        if "rng_state" in descriptor:
            trainer.rng.bit_generator.state = descriptor["rng_state"]
        return trainer


# -- evaluation -------------------------------------------------------------------

class OracleGenerator:
    """Test stub emitting one-hot ground truth and the true disease."""

    def __init__(self, num_seg_classes, num_diseases):
        self.num_seg_classes = num_seg_classes
        self.num_diseases = num_diseases

    def predict_records(self, records):
        out = []
        for r in records:
            seg = one_hot(r.labels, self.num_seg_classes, axis=-3)
            out.append((seg, np.eye(self.num_diseases)[r.disease]))
        return out


def predict_records(model, records, batch_size=8, tta=0, rng=None):
    """Inference-mode ``(seg_probs, disease_probs)`` for each (normalised) record.

    With ``tta > 0`` the softmax outputs are averaged over that many extra
    copies perturbed by intensity noise (geometry is left untouched).
    """
    if hasattr(model, "predict_records"):
        return model.predict_records(records)
    out = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        x = np.stack([r.slices_first() for r in chunk]).astype(model.dtype, copy=False)
        seg, dis = model.forward(x, train=False)
        seg, dis = seg.data.astype(np.float64), dis.data.astype(np.float64)
        if tta:
            rng = rng or np.random.default_rng(0)
            for _ in range(tta):
                noisy = (x + rng.normal(0.0, 0.05, size=x.shape)).astype(x.dtype)
                s2, d2 = model.forward(noisy, train=False)
                seg += s2.data
                dis += d2.data
            seg /= tta + 1
            dis /= tta + 1
        out.extend(zip(seg, dis))
    return out


def evaluate(generator, records, num_seg_classes=None, grouping=None, tta=0):
    """Metrics for ``generator`` on a split; argmax labels with ties going to the lowest class."""
    records = list(records.records if isinstance(records, Dataset) else records)
    if not records:
        raise ValidationError("cannot evaluate an empty split")
    if num_seg_classes is None:
        num_seg_classes = generator.num_seg_classes if hasattr(generator, "num_seg_classes") \
            else generator.config.num_seg_classes
    grouping = grouping or default_grouping(num_seg_classes)
    records = [normalize_record(r) for r in records]
    report = MetricsReport(list(grouping))
    for rec, (seg, dis) in zip(records, predict_records(generator, records, tta=tta)):
        pred = np.argmax(seg, axis=-3)
        report.add_patient(rec.id, pred, rec.labels, grouping)
        report.disease_pred.append(int(np.argmax(dis)))
        report.disease_true.append(int(rec.disease))
    return report


def foreground_dice(report):
    regions = [r for r in report.regions if r != "foreground"]
    return report.mean("dice", regions)


# -- training loop ------------------------------------------------------------------

def train(dataset, gen_config, disc_config, train_config, **kwargs):
    """Train on ``dataset``; returns ``(generator, discriminator, TrainLog)``."""
    trainer = fit(dataset, gen_config, disc_config, train_config, **kwargs)
    return trainer.generator, trainer.discriminator, trainer.log


def fit(dataset, gen_config, disc_config, train_config, augmentation=None, val_dataset=None,
        out_dir=None, dtype=np.float32, on_epoch=None):
    """Run the training loop and return the :class:`Trainer` with its ``log`` attached.

    Validation uses ``val_dataset`` or, if absent, a patient-wise split of
    ``dataset``. When ``out_dir`` is given the step log is streamed to
    ``train_log.csv`` and checkpoints ``best.ckpt`` (best validation
    foreground Dice) and ``final.ckpt`` are written there.
    """
    cfg = train_config.validate()
    augmentation = (augmentation or AugmentationConfig()).validate()
    if val_dataset is None:
        train_set, val_set = split_patients(dataset, cfg.val_fraction, cfg.seed)
    else:
        train_set, val_set = dataset, val_dataset
    if len(train_set) == 0:
        raise ValidationError("training split is empty")
    train_set = train_set.subset(normalize_record(r) for r in train_set)
    seg_w, dis_w = class_weights_for(train_set, cfg.weighting_enabled)
    trainer = Trainer(gen_config, disc_config, cfg, seg_w, dis_w, dtype=dtype)
    log = TrainLog(cfg.seed, trainer.config_hash)
    out = Path(out_dir) if out_dir else None
    stream = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        stream = open(out / "train_log.csv", "w", newline="", encoding="utf-8")
        writer = csv.DictWriter(stream, fieldnames=LOG_FIELDS, lineterminator="\n")
        writer.writeheader()
    best = -np.inf
    start = time.perf_counter()
    try:
        for epoch in range(cfg.max_epochs):
            trainer.epoch = epoch
            trainer.set_learning_rate(cfg.learning_rate_at(epoch))
            aug_rng = np.random.default_rng([cfg.seed, epoch])
            order = trainer.rng.permutation(len(train_set))
            for lo in range(0, len(order), cfg.batch_size):
                batch = [train_set[i] for i in order[lo:lo + cfg.batch_size]]
                if cfg.augment:
                    batch = [augment(r, augmentation, aug_rng) for r in batch]
                x, labels, diseases = stack_batch(batch, trainer.dtype)
                breakdown = trainer.step(x, labels, diseases)
                row = {"step": trainer.step_index - 1, "epoch": epoch, **breakdown.as_dict()}
                log.steps.append(row)
                if stream:
                    writer.writerow(row)
            if stream:
                stream.flush()
            last = epoch == cfg.max_epochs - 1
            if len(val_set) and ((epoch + 1) % cfg.eval_every == 0 or last):
                report = evaluate(trainer.generator, val_set, tta=4 if cfg.test_time_augmentation else 0)
                score = foreground_dice(report)
                log.evals.append({"epoch": epoch, "foreground_dice": score, "summary": report.summary()})
                logger.info("epoch %d: validation foreground dice %.4f", epoch, score)
                if out and score is not None and score > best:
                    best = score
                    trainer.save_checkpoint(out / "best.ckpt")
            if on_epoch:
                on_epoch(epoch, trainer, log)
    finally:
        if stream:
            stream.close()
    log.wall_clock = time.perf_counter() - start
    if out:
        trainer.save_checkpoint(out / "final.ckpt")
        (out / "evals.json").write_text(json.dumps(log.evals, indent=2, sort_keys=True), encoding="utf-8")
    trainer.log = log
    return trainer
