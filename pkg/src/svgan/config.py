"""Single-document JSON run configuration with a strict schema."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import AugmentationConfig, PhantomConfig
from .errors import ValidationError
from .models import DiscriminatorConfig, GeneratorConfig
from .trainer import TrainConfig

SEED_ENV = "SVGAN_SEED"


@dataclass
class PathsConfig:
    data: str = ""
    out: str = ""


def config_from_dict(cls, data, section):
    """Build dataclass ``cls`` from a dict, rejecting unknown keys and wrong types."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ValidationError(f"{section}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValidationError(f"{section}: unknown keys {unknown}")
    defaults = cls()
    kwargs = {key: _coerce(value, getattr(defaults, key), f"{section}.{key}") for key, value in data.items()}
    return cls(**kwargs)


def _coerce(value, default, where):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValidationError(f"{where}: expected a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"{where}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{where}: expected a number")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ValidationError(f"{where}: expected a list of {len(default)} values")
        return tuple(_coerce(v, d, where) for v, d in zip(value, default))
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ValidationError(f"{where}: expected a string")
        return value
    return value


def config_to_dict(cfg):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}


SECTIONS = {
    "phantom": PhantomConfig,
    "generator": GeneratorConfig,
    "discriminator": DiscriminatorConfig,
    "train": TrainConfig,
    "augmentation": AugmentationConfig,
    "paths": PathsConfig,
}


@dataclass
class RunConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @classmethod
    def from_dict(cls, data, env=None):
        if not isinstance(data, dict):
            raise ValidationError("config: expected a JSON object at top level")
        unknown = sorted(set(data) - set(SECTIONS))
        if unknown:
            raise ValidationError(f"config: unknown sections {unknown}")
        cfg = cls(**{name: config_from_dict(kind, data.get(name), name) for name, kind in SECTIONS.items()})
        cfg.apply_seed_override(os.environ if env is None else env)
        return cfg.validate()

    @classmethod
    def load(cls, path, env=None):
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ValidationError(f"{path}: config file not found") from None
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValidationError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(data, env)

    def apply_seed_override(self, env):
        raw = env.get(SEED_ENV)
        if raw in (None, ""):
            return
        try:
            seed = int(raw)
        except ValueError:
            raise ValidationError(f"{SEED_ENV}={raw!r} is not an integer") from None
        self.phantom.seed = seed
        self.train.seed = seed

    def validate(self):
        self.phantom.validate()
        self.generator.validate()
        self.discriminator.validate()
        self.train.validate()
        self.augmentation.validate()
        g, d, p = self.generator, self.discriminator, self.phantom
        if (g.in_channels, g.num_seg_classes, g.height, g.width) != \
                (d.in_channels, d.num_seg_classes, d.height, d.width):
            raise ValidationError("discriminator: in_channels, num_seg_classes, height and width must match generator")
        return self

    def check_dataset(self, dataset):
        """Raise unless the dataset geometry fits the model configuration."""
        rec = dataset.records[0]
        C, _, H, W = rec.volume.shape
        g = self.generator
        if (C, H, W) != (g.in_channels, g.height, g.width):
            raise ValidationError(
                f"dataset has {C} modalities at {H}x{W}; generator expects {g.in_channels} at {g.height}x{g.width}")
        if dataset.num_seg_classes != g.num_seg_classes or dataset.num_diseases != g.num_diseases:
            raise ValidationError(
                f"dataset has {dataset.num_seg_classes} classes / {dataset.num_diseases} diseases; "
                f"generator expects {g.num_seg_classes} / {g.num_diseases}")

    def to_dict(self):
        return {name: config_to_dict(getattr(self, name)) for name in SECTIONS}
