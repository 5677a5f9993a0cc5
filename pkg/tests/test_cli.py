import json

import numpy as np
import pytest

from arcnn import annot, cli
from arcnn import detector as dt
from arcnn.annot import Detection, FrameAnnotation, PairedObject
from arcnn.geom import Box
from arcnn.pipeline import calibration_pairs
from arcnn.synthtrain import load_dataset

TINY_MODEL = {"conv_channels": [4, 4, 4], "pool_size": 3, "rfa_hidden": 16, "conf_hidden": 8, "det_hidden": 16}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "ds"
    cfg = out.parent / "scene.json"
    cfg.write_text(json.dumps({"shift_std": [1.5, 1.5], "object_height": [56, 72]}))
    assert cli.main(["generate", "--config", str(cfg), "--frames", "3", "--seed", "4", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def train_config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "train.json"
    p.write_text(json.dumps({"train": {"epochs": 1}, "model": TINY_MODEL}))
    return p


def test_generate_writes_dataset_and_manifest(dataset):
    man = json.loads((dataset / "manifest.json").read_text())
    assert man["command"] == "generate" and man["seed"] == 4
    assert set(man) >= {"config_hash", "artifact_paths", "tool_version", "timestamp"}
    assert "annotations.json" in man["artifact_paths"]
    ds = load_dataset(dataset)
    assert len(ds) == 3 and ds.scene_config.seed == 4


def test_validate_and_stats(dataset, tmp_path, capsys):
    ann = dataset / "annotations.json"
    assert cli.main(["validate", str(ann)]) == 0
    assert cli.main(["stats", str(ann), "--out", str(tmp_path / "s")]) == 0
    st = json.loads((tmp_path / "s" / "stats.json").read_text())
    assert st["n_unpaired"] == 0 and st["n_paired"] == sum(st["histogram"])
    assert "paired objects" in capsys.readouterr().out
    doc = json.loads(ann.read_text())
    doc["frames"][1]["objects"][0]["uid"] = doc["frames"][0]["objects"][0]["uid"]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert cli.main(["validate", str(bad)]) == 1
    assert "duplicate" in capsys.readouterr().err.lower()


def test_usage_errors_exit_2(tmp_path, dataset, capsys):
    assert cli.main(["validate", str(tmp_path / "missing.json")]) == 2
    assert cli.main(["train", "--dataset", str(tmp_path), "--out", str(tmp_path / "o")]) == 2
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"learning_rat": 1}}))
    assert cli.main(["train", "--config", str(cfg), "--dataset", str(dataset), "--out", str(tmp_path / "o")]) == 2
    assert "learning_rat" in capsys.readouterr().err
    assert cli.main(["sweep", "--checkpoint", str(cfg), "--dataset", str(dataset), "--out", str(tmp_path),
                     "--grid", "diagonal"]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--enable-rfa", "maybe", "--dataset", str(dataset)])
    assert exc.value.code == 2


def test_parse_bool():
    assert cli.parse_bool("true") and cli.parse_bool("1") and not cli.parse_bool("False")


def test_zero_lr_train_equals_fresh_model(dataset, train_config, tmp_path):
    out = tmp_path / "t"
    rc = cli.main(["train", "--config", str(train_config), "--dataset", str(dataset), "--lr", "0",
                   "--seed", "3", "--out", str(out)])
    assert rc == 0
    params, mc, extra = dt.load_checkpoint(out / "model.ckpt")
    assert extra["seed"] == 3 and extra["train_config"]["learning_rate"] == 0.0
    fresh = dt.Detector.create(mc, 3, calibration_pairs(load_dataset(dataset)))
    # weight decay still acts at lr 0 only through the velocity, which stays zero
    assert dt.params_digest(params) == dt.params_digest(fresh.params)
    trace = json.loads((out / "trace.json").read_text())
    assert len(trace["total"]) == 3
    man = json.loads((out / "manifest.json").read_text())
    assert sorted(man["artifact_paths"]) == ["model.ckpt", "trace.json"]


def test_ablation_flags_reach_the_checkpoint(dataset, train_config, tmp_path):
    out = tmp_path / "t"
    assert cli.main(["train", "--config", str(train_config), "--dataset", str(dataset), "--enable-rfa", "false",
                     "--enable-jitter", "false", "--fusion", "naive", "--out", str(out)]) == 0
    _, mc, extra = dt.load_checkpoint(out / "model.ckpt")
    assert not mc.enable_rfa and mc.fusion_mode == "naive" and not extra["train_config"]["enable_jitter"]


def test_train_and_sweep_are_byte_identical(dataset, train_config, tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps([[0, 0], [2, 2], [-3, 1]]))
    blobs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert cli.main(["train", "--config", str(train_config), "--dataset", str(dataset), "--seed", "7",
                         "--out", str(out / "train")]) == 0
        assert cli.main(["sweep", "--checkpoint", str(out / "train" / "model.ckpt"), "--dataset", str(dataset),
                         "--grid", f"custom:{grid}", "--min-height", "40", "--out", str(out / "sweep")]) == 0
        blobs.append(((out / "train" / "model.ckpt").read_bytes(), (out / "sweep" / "report.json").read_bytes()))
    assert blobs[0] == blobs[1]
    rep = json.loads(blobs[0][1])
    assert len(rep["grid"]) == 3


def _frames():
    return [FrameAnnotation("f0", (200, 150), (PairedObject(1, Box(10, 10, 30, 70), Box(12, 10, 30, 70)),)),
            FrameAnnotation("f1", (200, 150), (PairedObject(2, Box(90, 20, 25, 60), Box(90, 22, 25, 60)),))]


@pytest.fixture()
def eval_dataset(tmp_path):
    from arcnn.synthtrain import Dataset, save_dataset
    frames = _frames()
    imgs = np.zeros((2, 3, 150, 200), dtype=np.uint8)
    save_dataset(Dataset(frames, imgs, imgs.copy()), tmp_path / "ev")
    return tmp_path / "ev", frames


def test_eval_with_perfect_and_empty_detections(eval_dataset, tmp_path, capsys):
    path, frames = eval_dataset
    perfect = tmp_path / "perfect.jsonl"
    annot.save_detections([Detection(f.frame_id, f.objects[0].reference_box, 0.9) for f in frames], perfect)
    assert cli.main(["eval", "--dataset", str(path), "--detections", str(perfect), "--out", str(tmp_path / "p")]) == 0
    rep = json.loads((tmp_path / "p" / "report.json").read_text())
    assert rep["mr"] == pytest.approx(1e-4)
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert cli.main(["eval", "--dataset", str(path), "--detections", str(empty), "--format", "csv",
                     "--out", str(tmp_path / "e")]) == 0
    assert "MR 1.000000" in capsys.readouterr().out
    assert (tmp_path / "e" / "report.csv").exists()


def test_sweep_grid_sizes(dataset, train_config, tmp_path):
    assert len(cli.parse_grid("full")) == 169
    assert len(cli.parse_grid("directions")) == 81
    with pytest.raises(cli.UsageError):
        cli.parse_grid("custom:" + str(tmp_path / "none.json"))
