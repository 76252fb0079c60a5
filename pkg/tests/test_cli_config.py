import json

import numpy as np
import pytest
from PIL import Image

from lsnet import cli
from lsnet.config import (EVAL_DEFAULTS, apply_overrides, build_run_config, load_run_config, load_schema,
                          parse_binarize, validate_document)
from lsnet.errors import ConfigError
from lsnet.model import ModelConfig, init_model, save_checkpoint

TINY = {
    "version": 1,
    "scene": {"image_size": 64},
    "model": {"input_size": 64, "channel_plan": [8, 16, 16, 16], "norm_groups": 4, "head_width": 16},
    "train": {"max_steps": 4, "eval_interval": 2, "batch_size": 2, "val_fraction": 0.25},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.json").write_text(json.dumps(TINY))
    assert cli.main(["generate", "--config", str(root / "tiny.json"), "--out", str(root / "data"),
                     "--n-images", "6", "--seed", "1"]) == 0
    return root


def run(*args):
    return cli.main([str(a) for a in args])


def test_defaults_are_desk():
    cfg = build_run_config()
    assert cfg.model.input_size == 256 and cfg.model.channel_plan == [16, 32, 64, 128]
    assert cfg.train.batch_size == 4 and cfg.eval == EVAL_DEFAULTS


def test_resolved_document_round_trips():
    cfg = build_run_config(TINY)
    resolved = cfg.resolved()
    validate_document(resolved)
    again = build_run_config(resolved)
    assert again.resolved() == resolved


@pytest.mark.parametrize("doc, where", [
    ({"version": 2}, "version"),
    ({"version": 1, "model": {"bogus": 1}}, "bogus"),
    ({"version": 1, "train": {"batch_size": 0}}, "batch_size"),
    ({"version": 1, "eval": {"binarize": "median"}}, "eval/binarize"),
])
def test_schema_errors_name_the_field(doc, where):
    with pytest.raises(ConfigError, match=where):
        build_run_config(doc)


def test_size_mismatch_rejected():
    with pytest.raises(ConfigError, match="image_size"):
        build_run_config({"version": 1, "scene": {"image_size": 128}})


def test_overrides_and_binarize():
    doc = apply_overrides({"version": 1}, ["train.learning_rate=0.01", "eval.binarize=fixed:0.3"])
    cfg = build_run_config(doc)
    assert cfg.train.learning_rate == 0.01 and parse_binarize(cfg.eval["binarize"]) == 0.3
    with pytest.raises(ConfigError):
        apply_overrides({}, ["nodot=1"])
    with pytest.raises(ConfigError):
        apply_overrides({}, ["zzz.a=1"])
    with pytest.raises(ConfigError):
        parse_binarize("fixed:2")


def test_load_run_config_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_run_config(tmp_path / "none.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "bad.json")


def test_schemas_load():
    assert load_schema()["properties"]["version"]["const"] == 1
    assert "per_image" in load_schema("eval_report")["properties"]


def test_generate_is_byte_identical(workspace, tmp_path):
    assert run("generate", "--config", workspace / "tiny.json", "--out", tmp_path / "again",
               "--n-images", 6, "--seed", 1) == 0
    a = (workspace / "data" / "manifest.jsonl").read_bytes()
    assert a == (tmp_path / "again" / "manifest.jsonl").read_bytes()
    first = sorted((workspace / "data" / "images").iterdir())[0]
    assert first.read_bytes() == (tmp_path / "again" / "images" / first.name).read_bytes()


def test_exit_codes(workspace, tmp_path, capsys):
    assert run("eval", "--manifest", tmp_path / "missing.jsonl", "--gt-as-prediction") == cli.EXIT_IO
    (tmp_path / "bad.json").write_text(json.dumps({"version": 1, "model": {"bogus": 1}}))
    assert run("generate", "--config", tmp_path / "bad.json", "--out", tmp_path / "x") == cli.EXIT_CONFIG
    assert "bogus" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()
    assert run("generate", "--out", tmp_path / "y", "--set", "train.learning_rate=-1") == cli.EXIT_CONFIG
    assert run("eval", "--manifest", workspace / "data", "--binarize", "fixed:7",
               "--gt-as-prediction") == cli.EXIT_CONFIG


def test_eval_gt_as_prediction(workspace, tmp_path):
    out = tmp_path / "rep"
    assert run("eval", "--config", workspace / "tiny.json", "--manifest", workspace / "data",
               "--gt-as-prediction", "--sigma-s", 0, "--out", out) == 0
    report = json.loads((out / "report.json").read_text())
    validate_document(report, "eval_report")
    assert report["f1"] == 1.0 and report["n_images"] == 6
    assert (out / "report.txt").read_text().strip()


def test_train_eval_resume(workspace):
    out = workspace / "run"
    assert run("train", "--config", workspace / "tiny.json", "--data", workspace / "data", "--out", out) == 0
    for name in ("checkpoint.npz", "last.npz", "train_log.jsonl", "config.resolved.json"):
        assert (out / name).exists()
    lines = [json.loads(x) for x in (out / "train_log.jsonl").read_text().splitlines()]
    assert [x["step"] for x in lines] == [2, 4]
    assert run("train", "--config", workspace / "tiny.json", "--data", workspace / "data", "--out", out,
               "--resume", out / "last.npz", "--set", "train.max_steps=8") == 0
    lines = [json.loads(x) for x in (out / "train_log.jsonl").read_text().splitlines()]
    assert [x["step"] for x in lines] == [2, 4, 6, 8]
    rep = workspace / "rep"
    assert run("eval", "--config", workspace / "tiny.json", "--checkpoint", out / "checkpoint.npz",
               "--manifest", workspace / "data", "--out", rep) == 0
    validate_document(json.loads((rep / "report.json").read_text()), "eval_report")


def _zero_checkpoint(path):
    model = init_model(ModelConfig(**{k: v for k, v in TINY["model"].items()}), 0)
    for p in model.parameters():
        p.data.zero_()
    save_checkpoint(path, model)


def test_detect_zero_model_is_empty(workspace, tmp_path):
    ckpt = tmp_path / "zero.npz"
    _zero_checkpoint(ckpt)
    img = sorted((workspace / "data" / "images").iterdir())[0]
    assert run("detect", "--checkpoint", ckpt, img, "--json", tmp_path / "d.json",
               "--threshold", 0.5) == 0
    assert json.loads((tmp_path / "d.json").read_text())["segments"] == []


def test_detect_overlay_matches_json(workspace, tmp_path):
    ckpt = workspace / "run" / "checkpoint.npz"
    if not ckpt.exists():
        pytest.skip("needs test_train_eval_resume")
    img = sorted((workspace / "data" / "images").iterdir())[0]
    outs = []
    for k in range(2):
        assert run("detect", "--checkpoint", ckpt, img, "--json", tmp_path / f"d{k}.json",
                   "--overlay", tmp_path / f"o{k}.png", "--threshold", 0.2) == 0
        outs.append(((tmp_path / f"d{k}.json").read_bytes(), (tmp_path / f"o{k}.png").read_bytes()))
    assert outs[0] == outs[1]
    payload = json.loads(outs[0][0])
    with Image.open(tmp_path / "o0.png") as im:
        assert int(im.text["lsnet:segments"]) == len(payload["segments"])
        assert im.size == (64, 64)


def test_detect_rescales_coordinates(workspace, tmp_path):
    ckpt = workspace / "run" / "checkpoint.npz"
    if not ckpt.exists():
        pytest.skip("needs test_train_eval_resume")
    img = sorted((workspace / "data" / "images").iterdir())[0]
    with Image.open(img) as im:
        im.resize((128, 128), Image.NEAREST).save(tmp_path / "big.png")
    assert run("detect", "--checkpoint", ckpt, tmp_path / "big.png", "--json", tmp_path / "b.json",
               "--threshold", 0.0) == 0
    segs = json.loads((tmp_path / "b.json").read_text())["segments"]
    xy = np.array([[s["x1"], s["y1"], s["x2"], s["y2"]] for s in segs])
    assert len(xy) > 0 and xy.min() >= 0 and xy.max() <= 128


def test_detect_bad_image(workspace, tmp_path):
    ckpt = tmp_path / "zero.npz"
    _zero_checkpoint(ckpt)
    (tmp_path / "junk.png").write_text("not an image")
    assert run("detect", "--checkpoint", ckpt, tmp_path / "junk.png") == cli.EXIT_IO


def test_ablate_rows(workspace):
    out = workspace / "abl"
    assert run("ablate", "--config", workspace / "tiny.json", "--axes", "clsloss,downsampling",
               "--data", workspace / "data", "--eval-data", workspace / "data", "--out", out,
               "--seeds", "0", "--set", "train.max_steps=2") == 0
    payload = json.loads((out / "ablation.json").read_text())
    assert [r["name"] for r in payload["clsloss"]] == ["LS-Net-CE (Cross Entropy loss)", "LS-Net-FL (Focal Loss)"]
    assert [r["name"] for r in payload["downsampling"]] == ["LS-Net-P", "LS-Net-S"]
    assert "Ablation axis" in (out / "ablation.txt").read_text()
    assert run("ablate", "--axes", "nope", "--data", workspace / "data", "--eval-data", workspace / "data",
               "--out", out) == cli.EXIT_CONFIG
