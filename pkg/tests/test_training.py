"""Training loop: schedule, clipping, logging, determinism, overfit."""

import csv
import math

import numpy as np
import pytest

import heightfuse.autodiff as ad
from heightfuse.network import FusionNet
from heightfuse.sim import load_samples
from heightfuse.training import (LOG_COLUMNS, TrainConfig, clip_gradient_norm,
                                 evaluate_l1, train_network, write_log)

from conftest import tiny_config


@pytest.fixture()
def train_pair(small_data):
    root, meta = small_data
    return load_samples(root, [0], meta)     # two episodes on one scene


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(lr_decayed=0.0)
    cfg = TrainConfig()
    with pytest.raises(AttributeError):
        cfg.lr = 0.5


def test_lr_schedule_decays_at_half():
    cfg = TrainConfig(epochs=10, lr=1e-3, lr_decayed=1e-4)
    assert [cfg.lr_at(e) for e in range(10)] == [1e-3] * 5 + [1e-4] * 5
    odd = TrainConfig(epochs=5, lr=1e-3, lr_decayed=1e-4)
    assert [odd.lr_at(e) for e in range(5)] == [1e-3] * 3 + [1e-4] * 2


def test_sgd_with_zero_rate_leaves_parameters():
    p = ad.parameter(np.array([1.0, -2.0]))
    p.grad = np.array([5.0, 5.0])
    ad.sgd_step([p], 0.0)
    assert np.array_equal(p.data, [1.0, -2.0])


def test_clip_scales_only_above_the_cap():
    a = ad.parameter(np.zeros(2))
    b = ad.parameter(np.zeros(1))
    a.grad = np.array([3.0, 0.0])
    b.grad = np.array([4.0])
    assert clip_gradient_norm([a, b], 1.0) == pytest.approx(5.0)
    assert np.allclose(a.grad, [0.6, 0.0])
    assert np.allclose(b.grad, [0.8])

    a.grad = np.array([0.3, 0.0])
    b.grad = np.array([0.4])
    assert clip_gradient_norm([a, b], 1.0) == pytest.approx(0.5)
    assert np.allclose(a.grad, [0.3, 0.0])   # untouched below the cap

    c = ad.parameter(np.zeros(3))            # gradless params are skipped
    assert clip_gradient_norm([c], 1.0) == 0.0


def test_evaluate_l1_matches_per_sample_mean(train_pair):
    net = FusionNet(tiny_config("fusion"), seed=3)
    per = [net.forward_training_batch([s], training=False)[1]
           for s in train_pair]
    got = evaluate_l1(net, train_pair, batch_size=1)
    assert got == pytest.approx(np.mean(per), rel=1e-12)
    with pytest.raises(ValueError):
        evaluate_l1(net, [])


def test_empty_training_set_rejected():
    net = FusionNet(tiny_config("fusion"), seed=3)
    with pytest.raises(ValueError):
        train_network(net, [], [], TrainConfig(epochs=1))


def test_zero_epochs_writes_header_and_untouched_checkpoint(tmp_path, train_pair):
    net = FusionNet(tiny_config("fusion"), seed=3)
    before = tmp_path / "init.vgfw"
    net.save(before)
    log = tmp_path / "log.csv"
    ckpt = tmp_path / "net.vgfw"
    history = train_network(net, train_pair, [], TrainConfig(epochs=0),
                            log_path=log, checkpoint_path=ckpt)
    assert history == []
    assert log.read_text().strip() == ",".join(LOG_COLUMNS)
    assert ckpt.read_bytes() == before.read_bytes()


def test_history_rows_and_log_round_trip(tmp_path, train_pair):
    net = FusionNet(tiny_config("fusion"), seed=3)
    log = tmp_path / "log.csv"
    seen = []
    cfg = TrainConfig(epochs=2, batch_size=2, lr=0.005, lr_decayed=0.0005)
    history = train_network(net, train_pair[:1], train_pair[1:], cfg,
                            log_path=log, progress=seen.append)
    assert len(history) == 2
    for epoch, row in enumerate(history):
        assert row["epoch"] == epoch
        assert row["lr"] == cfg.lr_at(epoch)
        assert math.isfinite(row["train_loss"])
        assert math.isfinite(row["val_l1"])
        assert "seconds" not in row
    assert all("seconds" in row for row in seen)
    assert [r["epoch"] for r in seen] == [0, 1]

    with open(log, newline="") as fh:
        reader = csv.DictReader(fh)
        assert tuple(reader.fieldnames) == LOG_COLUMNS
        rows = list(reader)
    assert [float(r["train_loss"]) for r in rows] == \
        [r["train_loss"] for r in history]


def test_missing_validation_set_logs_nan(train_pair):
    net = FusionNet(tiny_config("fusion"), seed=3)
    history = train_network(net, train_pair, [],
                            TrainConfig(epochs=1, batch_size=2))
    assert math.isnan(history[0]["val_l1"])


def test_training_is_deterministic(train_pair):
    cfg = TrainConfig(epochs=3, batch_size=1, lr=0.005, lr_decayed=0.0005,
                      seed=4)
    runs = []
    for _ in range(2):
        net = FusionNet(tiny_config("fusion"), seed=3)
        history = train_network(net, train_pair, train_pair, cfg)
        runs.append((history, net.state_arrays()))
    assert runs[0][0] == runs[1][0]
    for name in runs[0][1]:
        assert np.array_equal(runs[0][1][name], runs[1][1][name]), name


def test_small_set_overfits(train_pair):
    net = FusionNet(tiny_config("fusion"), seed=3)
    cfg = TrainConfig(epochs=60, batch_size=2, lr=0.005, lr_decayed=0.005)
    history = train_network(net, train_pair, [], cfg)
    first = history[0]["train_loss"]
    last = history[-1]["train_loss"]
    assert last <= 0.1 * first, (first, last)


def test_write_log_ignores_extra_keys(tmp_path):
    path = tmp_path / "log.csv"
    write_log(path, [{"epoch": 0, "lr": 0.1, "train_loss": 1.0,
                      "val_l1": 2.0, "seconds": 9.0}])
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[0] == {"epoch": "0", "lr": "0.1",
                       "train_loss": "1.0", "val_l1": "2.0"}
