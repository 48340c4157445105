"""Training loops for the classifier and the masked autoencoder.

Plain momentum SGD with cosine-decayed learning rate; single-threaded over
the parameter set. Each run logs a (step, epoch, lr, loss) curve to CSV when
given a path and aborts with diagnostics if the loss goes non-finite.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import ClassifierModel, MAEModel, mae_loss, sample_masks
from .rng import stream


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


class MomentumSGD:
    def __init__(self, params: list, momentum: float):
        self.params = params
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= lr * v


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 1:
        return base_lr
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * step / (total_steps - 1)))


def _write_log(path, rows):
    if path is None:
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "epoch", "lr", "loss"])
        for r in rows:
            w.writerow([r[0], r[1], f"{r[2]:.17g}", f"{r[3]:.17g}"])


def _check_finite(loss_value: float, step: int, lr: float, what: str):
    if not np.isfinite(loss_value):
        raise RuntimeError(f"{what} training diverged: loss={loss_value} at step {step} "
                           f"(lr={lr:.6g}); lower the learning rate or check the data")


def _epoch_order(n: int, seed: int, epoch: int, kind: str) -> np.ndarray:
    return stream(seed, kind, epoch).permutation(n)


def train_classifier(images: np.ndarray, labels: np.ndarray, model: ClassifierModel,
                     settings: TrainSettings, log_path=None) -> list:
    """Cross-entropy training; returns the logged loss curve."""
    n = len(images)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if len(labels) != n:
        raise ValueError(f"images/labels length mismatch: {n} vs {len(labels)}")
    opt = MomentumSGD(model.parameters(), settings.momentum)
    steps_per_epoch = (n + settings.batch_size - 1) // settings.batch_size
    total = settings.epochs * steps_per_epoch
    rows, step = [], 0
    for epoch in range(settings.epochs):
        order = _epoch_order(n, settings.seed, epoch, "clf-train")
        for start in range(0, n, settings.batch_size):
            idx = order[start:start + settings.batch_size]
            lr = cosine_lr(settings.lr, step, total)
            opt.zero_grad()
            logits = model.forward(Tensor(images[idx]))
            loss = ad.cross_entropy_logits(logits, labels[idx])
            ad.backward(loss)
            value = loss.item()
            _check_finite(value, step, lr, "classifier")
            opt.step(lr)
            rows.append((step, epoch, lr, value))
            step += 1
    _write_log(log_path, rows)
    return rows


def train_mae(images: np.ndarray, model: MAEModel, settings: TrainSettings,
              log_path=None) -> list:
    """Masked-reconstruction training; fresh random masks per image per step."""
    n = len(images)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    grid = model.cfg.grid
    opt = MomentumSGD(model.parameters(), settings.momentum)
    steps_per_epoch = (n + settings.batch_size - 1) // settings.batch_size
    total = settings.epochs * steps_per_epoch
    rows, step = [], 0
    for epoch in range(settings.epochs):
        order = _epoch_order(n, settings.seed, epoch, "mae-train")
        for start in range(0, n, settings.batch_size):
            idx = order[start:start + settings.batch_size]
            lr = cosine_lr(settings.lr, step, total)
            mask_rng = stream(settings.seed, "mae-train-mask", step)
            masks = sample_masks(grid, model.cfg.mask_ratio, mask_rng, len(idx))
            opt.zero_grad()
            loss = mae_loss(images[idx], masks, model)
            ad.backward(loss)
            value = loss.item()
            _check_finite(value, step, lr, "MAE")
            opt.step(lr)
            rows.append((step, epoch, lr, value))
            step += 1
    _write_log(log_path, rows)
    return rows


def moving_average(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if window < 1 or window > len(v):
        raise ValueError(f"window must lie in [1, {len(v)}]")
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")
