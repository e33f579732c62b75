import json

import pytest

from svgan.config import RunConfig
from svgan.errors import ValidationError


def test_defaults_validate():
    cfg = RunConfig.from_dict({}, env={})
    assert cfg.train.learning_rate == 1e-4 and cfg.generator.height == 32


def test_round_trip_through_dict():
    cfg = RunConfig.from_dict({"train": {"max_epochs": 3}, "phantom": {"num_patients": 7}}, env={})
    again = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())), env={})
    assert again == cfg


@pytest.mark.parametrize("doc", [
    {"nonsense": {}},
    {"train": {"learning_rte": 0.1}},
    {"train": {"max_epochs": "ten"}},
    {"train": {"weighting_enabled": 1}},
    {"augmentation": {"rotation_range": [1.0]}},
    {"train": []},
    [],
])
def test_schema_rejections(doc):
    with pytest.raises(ValidationError):
        RunConfig.from_dict(doc, env={})


def test_out_of_range_values():
    with pytest.raises(ValidationError):
        RunConfig.from_dict({"train": {"max_epochs": 500}}, env={})
    with pytest.raises(ValidationError, match="discriminator"):
        RunConfig.from_dict({"discriminator": {"height": 16, "width": 16}}, env={})


def test_seed_override():
    cfg = RunConfig.from_dict({"train": {"seed": 3}}, env={"SVGAN_SEED": "9"})
    assert cfg.train.seed == 9 and cfg.phantom.seed == 9
    with pytest.raises(ValidationError, match="SVGAN_SEED"):
        RunConfig.from_dict({}, env={"SVGAN_SEED": "x"})


def test_load_errors(tmp_path):
    with pytest.raises(ValidationError, match="not found"):
        RunConfig.load(tmp_path / "missing.json", env={})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ValidationError, match="JSON"):
        RunConfig.load(bad, env={})
