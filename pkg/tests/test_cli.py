import json

import numpy as np
import pytest

from svgan.cli import main
from svgan.data import Dataset, PatientRecord, load_dataset, save_dataset
from svgan.report import decode_ppm

SMALL_CONFIG = {
    "phantom": {"num_patients": 10, "slices": 4, "height": 16, "width": 16, "seed": 2},
    "generator": {"base_channels": 4, "height": 16, "width": 16},
    "discriminator": {"base_channels": 4, "pixel_channels": 4, "height": 16, "width": 16},
    "train": {"max_epochs": 2, "batch_size": 4},
}


@pytest.fixture()
def config_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL_CONFIG))
    return path


@pytest.fixture()
def dataset_dir(tmp_path, config_path):
    out = tmp_path / "data"
    assert main(["synth", "--config", str(config_path), "--out", str(out)]) == 0
    return out


def test_synth_writes_dataset_and_table(dataset_dir, capsys, tmp_path, config_path):
    assert (dataset_dir / "meta.json").exists()
    again = tmp_path / "again"
    main(["synth", "--config", str(config_path), "--out", str(again)])
    assert capsys.readouterr().out.startswith("class,name,pixels,fraction")
    for path in sorted(dataset_dir.iterdir()):
        assert path.read_bytes() == (again / path.name).read_bytes(), path.name


def test_synth_rejects_bad_lesion_fraction(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"phantom": {"lesion_fraction_target": 0.5}}))
    assert main(["synth", "--config", str(path), "--out", str(tmp_path / "x")]) == 2
    assert "lesion_fraction_target" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_unknown_config_key(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"train": {"learning_rte": 0.1}}))
    assert main(["synth", "--config", str(path), "--out", str(tmp_path / "x")]) == 2


def test_weights_hand_example(tmp_path, capsys):
    labels = np.zeros((1, 10, 100), dtype=np.uint8)
    labels[0, 9, :] = 1  # 900 vs 100 pixels
    rec = PatientRecord("P0", np.zeros((1, 1, 10, 100), np.float32), labels, 0)
    save_dataset(Dataset([rec], 2, 1), tmp_path / "ds")
    assert main(["weights", "--data", str(tmp_path / "ds")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines == ["class,freq,weight", "0,900,0.74453", "1,100,2.21404"]


def test_weights_balanced(tmp_path, capsys):
    labels = np.stack([np.array([[0, 1, 2]], np.uint8)] * 2)  # 2 slices, each 0,1,2
    rec = PatientRecord("P0", np.zeros((1, 2, 1, 3), np.float32), labels, 0)
    save_dataset(Dataset([rec], 3, 1), tmp_path / "ds")
    main(["weights", "--data", str(tmp_path / "ds")])
    weights = {line.split(",")[2] for line in capsys.readouterr().out.splitlines()[1:]}
    assert len(weights) == 1


def test_weights_missing_dir(tmp_path):
    assert main(["weights", "--data", str(tmp_path / "missing")]) == 2


def test_train_eval_report_pipeline(tmp_path, config_path, dataset_dir, capsys):
    run = tmp_path / "run"
    assert main(["train", "--config", str(config_path), "--data", str(dataset_dir), "--out", str(run)]) == 0
    for name in ("final.ckpt", "best.ckpt", "train_log.csv", "config.json"):
        assert (run / name).exists(), name
    assert json.loads((run / "config.json").read_text())["config_hash"]

    ev = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(run / "final.ckpt"), "--data", str(dataset_dir),
                 "--out", str(ev)]) == 0
    assert (ev / "metrics.csv").read_text().startswith("patient,region,dice,hausdorff,sensitivity")
    assert "regions" in json.loads((ev / "summary.json").read_text())
    overlays = sorted((ev / "overlays").glob("*.ppm"))
    assert overlays
    img = decode_ppm(overlays[0].read_bytes())
    assert img.shape == (16, 34, 3)

    rep = tmp_path / "report"
    assert main(["report", "--log", str(run / "train_log.csv"), "--out", str(rep)]) == 0
    svgs = sorted(p.name for p in rep.glob("*.svg"))
    assert svgs == sorted(f"loss_{t}.svg" for t in ("adv_d", "adv_g", "seg_ce", "cls_l1", "total"))
    assert (rep / "summary.md").exists()


def test_eval_oracle_stub(tmp_path, dataset_dir, capsys):
    ev = tmp_path / "eval"
    assert main(["eval", "--oracle-stub", "--data", str(dataset_dir), "--out", str(ev)]) == 0
    summary = json.loads((ev / "summary.json").read_text())
    assert all(r["dice"] == 1.0 for r in summary["regions"].values())


def test_eval_missing_checkpoint(tmp_path, dataset_dir):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(dataset_dir),
                 "--out", str(tmp_path / "e")]) == 2


def test_train_geometry_mismatch(tmp_path, dataset_dir):
    cfg = dict(SMALL_CONFIG, generator={"base_channels": 4})  # 32x32 vs 16x16 data
    cfg["discriminator"] = {"base_channels": 4}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert main(["train", "--config", str(path), "--data", str(dataset_dir), "--out", str(tmp_path / "r")]) == 2


def test_report_errors(tmp_path, capsys):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert main(["report", "--log", str(empty), "--out", str(tmp_path / "r")]) == 2
    header_only = tmp_path / "h.csv"
    header_only.write_text("step,epoch,adv_d,adv_g,seg_ce,cls_l1,total\n")
    assert main(["report", "--log", str(header_only), "--out", str(tmp_path / "r")]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("step,epoch,adv_d,adv_g,seg_ce,cls_l1,total\n0,0,1,1,1,1,3\n1,0,1,oops,1,1,3\n")
    capsys.readouterr()
    assert main(["report", "--log", str(bad), "--out", str(tmp_path / "r")]) == 2
    assert "line 3" in capsys.readouterr().err


def test_report_hundred_steps(tmp_path):
    rows = ["step,epoch,adv_d,adv_g,seg_ce,cls_l1,total"]
    rows += [f"{i},{i // 10},1.3,0.7,{1 / (i + 1):.5f},0.5,{1.2 + 1 / (i + 1):.5f}" for i in range(100)]
    log = tmp_path / "log.csv"
    log.write_text("\n".join(rows) + "\n")
    assert main(["report", "--log", str(log), "--out", str(tmp_path / "r")]) == 0
    svgs = list((tmp_path / "r").glob("*.svg"))
    assert len(svgs) == 5
    for svg in svgs:
        text = svg.read_text()
        assert text.startswith("<svg") and "href" not in text


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--instances", "2"]) == 0
    out = capsys.readouterr().out
    assert "conv2d" in out and "weighted_cce" in out and "FAIL" not in out


def test_seed_env_override(tmp_path, config_path, monkeypatch):
    monkeypatch.setenv("SVGAN_SEED", "11")
    main(["synth", "--config", str(config_path), "--out", str(tmp_path / "a")])
    monkeypatch.setenv("SVGAN_SEED", "12")
    main(["synth", "--config", str(config_path), "--out", str(tmp_path / "b")])
    a, b = load_dataset(tmp_path / "a"), load_dataset(tmp_path / "b")
    assert any(x.labels.tobytes() != y.labels.tobytes() for x, y in zip(a, b))
