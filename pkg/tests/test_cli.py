"""Command line behavior: exit codes, artifacts, overwrite protection."""

import json
import os

import pytest

from heightfuse.cli import main
from heightfuse.config import RunConfig
from heightfuse.network import FusionNet
from heightfuse.sim import read_meta

TINY_CFG = """
[network]
channels = 4
directions = 8
max_keypoints = 10

[train]
epochs = 1
batch_size = 2
lr = 0.005
lr_decayed = 0.0005

[data]
train_scenes = 1
test_scenes = 1
episodes_per_train_scene = 2
episodes_per_test_scene = 1
t_len = 2
keypoint_count = 6
corruption_levels = 0,0.4
scene_size = 32
object_count = 4

[nav]
episodes = 2
corruption = 0.4
min_separation = 6
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Config file, built dataset, and one trained checkpoint."""
    ws = tmp_path_factory.mktemp("cli")
    cfg = ws / "run.cfg"
    cfg.write_text(TINY_CFG)
    data = str(ws / "data")
    models = str(ws / "models")
    assert main(["build-dataset", "--config", str(cfg), "--data-dir", data,
                 "--seed", "5"]) == 0
    assert main(["train", "--mode", "fusion", "--config", str(cfg),
                 "--data-dir", data, "--out", models, "--seed", "5",
                 "--quiet"]) == 0
    return {"cfg": str(cfg), "data": data, "models": models,
            "ckpt": os.path.join(models, "fusion.vgfw")}


def test_bad_usage_exits_two(capsys):
    assert main([]) == 2
    assert main(["no-such-command"]) == 2
    assert main(["train"]) == 2            # --mode is required
    capsys.readouterr()


def test_gen_scenes_writes_maps_and_index(tmp_path, capsys):
    out = str(tmp_path / "scenes")
    assert main(["gen-scenes", "--out", out, "--count", "2",
                 "--seed", "3"]) == 0
    index = json.load(open(os.path.join(out, "scenes.json")))
    assert index["count"] == 2 and index["seed"] == 3
    assert len(index["scenes"]) == 2
    for i in range(2):
        assert os.path.exists(os.path.join(out, "%03d.vgfm" % i))

    assert main(["gen-scenes", "--out", out, "--count", "2"]) == 1
    assert main(["gen-scenes", "--out", out, "--count", "2",
                 "--overwrite"]) == 0
    capsys.readouterr()


def test_build_dataset_writes_meta_and_config_echo(workspace, capsys):
    meta = read_meta(workspace["data"])
    assert len(meta["episodes"]) == 3
    assert meta["seed"] == 5
    echoed = os.path.join(workspace["data"], "config.txt")
    assert open(echoed).read() == RunConfig.resolve(workspace["cfg"]).dump()

    # refuses to clobber an existing dataset
    assert main(["build-dataset", "--config", workspace["cfg"],
                 "--data-dir", workspace["data"]]) == 1
    capsys.readouterr()


def test_train_writes_checkpoint_and_log(workspace, capsys):
    assert os.path.exists(workspace["ckpt"])
    net = FusionNet.load(workspace["ckpt"])
    assert net.config.mode == "fusion" and net.config.channels == 4
    log = open(os.path.join(workspace["models"], "fusion_log.csv")).read()
    lines = log.strip().splitlines()
    assert lines[0] == "epoch,lr,train_loss,val_l1"
    assert len(lines) == 2                  # one epoch

    assert main(["train", "--mode", "fusion", "--config", workspace["cfg"],
                 "--data-dir", workspace["data"],
                 "--out", workspace["models"], "--quiet"]) == 1
    assert main(["train", "--mode", "nonsense", "--config", workspace["cfg"],
                 "--data-dir", workspace["data"]]) == 2
    capsys.readouterr()


def test_eval_reports_loaded_models(workspace, tmp_path, capsys):
    out = str(tmp_path / "mapping.json")
    assert main(["eval", "--model", workspace["ckpt"], "--data-dir",
                 workspace["data"], "--out", out]) == 0
    report = json.load(open(out))
    assert report["data"] == workspace["data"]
    assert set(report["mapping"]) == {"fusion"}
    stats = report["mapping"]["fusion"]
    assert stats["episodes"] == 1
    assert "sweep" in stats

    assert main(["eval", "--model", workspace["ckpt"], "--model",
                 workspace["ckpt"], "--data-dir", workspace["data"]]) == 1
    assert main(["eval", "--data-dir", workspace["data"]]) == 1
    capsys.readouterr()


def test_navigate_with_and_without_model(workspace, tmp_path, capsys):
    out = str(tmp_path / "nav.json")
    assert main(["navigate", "--config", workspace["cfg"], "--data-dir",
                 workspace["data"], "--ground-truth", "--out", out,
                 "--seed", "4"]) == 0
    report = json.load(open(out))
    assert report["map_source"] == "ground truth"
    assert report["episodes"] == 2
    assert report["success_rate"] == 1.0

    out2 = str(tmp_path / "nav2.json")
    assert main(["navigate", "--config", workspace["cfg"], "--data-dir",
                 workspace["data"], "--model", workspace["ckpt"],
                 "--episodes", "1", "--out", out2, "--seed", "4"]) == 0
    report2 = json.load(open(out2))
    assert report2["map_source"] == "fusion"
    assert report2["episodes"] == 1
    assert report2["corruption"] == 0.4

    assert main(["navigate", "--config", workspace["cfg"], "--data-dir",
                 str(tmp_path / "nowhere")]) == 1
    capsys.readouterr()


def test_data_dir_env_fallback(workspace, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("VGF_DATA_DIR", workspace["data"])
    out = str(tmp_path / "m.json")
    assert main(["eval", "--model", workspace["ckpt"], "--out", out]) == 0
    assert json.load(open(out))["data"] == workspace["data"]
    capsys.readouterr()


def test_disturb_sweep_writes_csv(workspace, tmp_path, capsys):
    out = str(tmp_path / "sweep.csv")
    assert main(["disturb-sweep", "--config", workspace["cfg"],
                 "--count", "1", "--out", out, "--seed", "2"]) == 0
    lines = open(out).read().strip().splitlines()
    assert lines[0] == "scene_seed,target,achieved"
    assert len(lines) == 3                  # two configured levels
    targets = [ln.split(",")[1] for ln in lines[1:]]
    assert targets == ["0", "0.4"]

    assert main(["disturb-sweep", "--config", workspace["cfg"],
                 "--count", "1", "--out", out]) == 1
    capsys.readouterr()


def test_grad_check_per_op_passes(tmp_path, capsys):
    out = str(tmp_path / "grad.csv")
    assert main(["grad-check", "--out", out]) == 0
    text = capsys.readouterr().out
    assert "worst relative error" in text
    lines = open(out).read().strip().splitlines()
    assert lines[0] == "check,max_rel_err,ok"
    assert len(lines) > 20
    assert all(ln.endswith(",1") for ln in lines[1:])

    assert main(["grad-check", "--modes", "bogus"]) == 1
    capsys.readouterr()


def test_plot_data_renders_log_and_episode(workspace, tmp_path, capsys):
    log = os.path.join(workspace["models"], "fusion_log.csv")
    png1 = str(tmp_path / "log.png")
    assert main(["plot-data", "--log", log, "--out", png1,
                 "--data-dir", workspace["data"]]) == 0
    assert os.path.getsize(png1) > 1000

    png2 = str(tmp_path / "ep.png")
    assert main(["plot-data", "--episode", "0", "--out", png2,
                 "--data-dir", workspace["data"]]) == 0
    assert os.path.getsize(png2) > 1000

    assert main(["plot-data", "--log", log, "--out", png1,
                 "--data-dir", workspace["data"]]) == 1
    capsys.readouterr()
