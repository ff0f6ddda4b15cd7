"""SGD training loop for the fusion network.

Consumes lists of SequenceSample (built by the simulator's dataset layer),
optimizes the summed absolute height error, and writes a CSV log with one
row per epoch: epoch, lr, train_loss, val_l1.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .network import FusionNet

LOG_COLUMNS = ("epoch", "lr", "train_loss", "val_l1")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 0.001
    lr_decayed: float = 0.0001
    clip_norm: float = 50.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("bad epoch or batch count")
        if self.lr <= 0 or self.lr_decayed <= 0:
            raise ValueError("learning rates must be positive")

    def lr_at(self, epoch: int) -> float:
        """Full rate for the first half of the run, decayed after."""
        return self.lr if epoch < (self.epochs + 1) // 2 else self.lr_decayed


def clip_gradient_norm(params: list, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm.

    Returns the pre-clip norm. The summed loss makes early gradients large
    enough to throw plain SGD, so the step direction is kept and only the
    magnitude is capped.
    """
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


def evaluate_l1(net: FusionNet, samples: list, batch_size: int = 8) -> float:
    """Mean per-moment, per-cell absolute error in meters over samples."""
    if not samples:
        raise ValueError("nothing to evaluate")
    total = 0.0
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        _, l1 = net.forward_training_batch(chunk, training=False)
        total += l1 * len(chunk)
    return total / len(samples)


def train_network(net: FusionNet, train_samples: list, val_samples: list,
                  config: TrainConfig, log_path=None, checkpoint_path=None,
                  progress=None) -> list:
    """Run the full schedule and return one log row per epoch.

    Writes the CSV log and the final checkpoint if paths are given; with
    epochs=0 the checkpoint equals the initialization and the log is just
    the header. `progress` is an optional callable fed each row dict.
    """
    if not train_samples:
        raise ValueError("empty training set")
    params = net.parameters()
    rng = np.random.default_rng(config.seed)
    history = []

    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(len(train_samples))
        losses = []
        t0 = time.monotonic()
        for lo in range(0, len(order), config.batch_size):
            batch = [train_samples[i] for i in order[lo:lo + config.batch_size]]
            ad.zero_grads(params)
            loss, _ = net.forward_training_batch(batch, training=True)
            ad.backward(loss)
            clip_gradient_norm(params, config.clip_norm)
            ad.sgd_step(params, lr)
            losses.append(float(loss.data))
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)),
            "val_l1": evaluate_l1(net, val_samples) if val_samples else float("nan"),
        }
        history.append(row)
        if progress is not None:
            row = dict(row)
            row["seconds"] = time.monotonic() - t0
            progress(row)

    if log_path is not None:
        write_log(log_path, history)
    if checkpoint_path is not None:
        net.save(checkpoint_path)
    return history


def write_log(path, history: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in LOG_COLUMNS})
