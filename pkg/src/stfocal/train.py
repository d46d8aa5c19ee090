"""Optimizer, schedule, augmentation, and the training/evaluation loops."""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .backbone import FocalVideoNetwork
from .functional import smooth_labels
from .tensor import ComputationGraph, ConfigError, NumericFault, ShapeError, no_grad

__all__ = [
    "TrainConfig", "LrSchedule", "SGD", "mixup_cutmix", "smooth_labels",
    "train", "evaluate", "parse_metrics",
]


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    batch_size: int = 32
    epochs: int = 20
    warmup_epochs: int = 2
    momentum: float = 0.9
    label_smoothing: float = 0.1
    mixup_alpha: float = 0.8
    mixup_prob: float = 0.5
    cutmix_prob: float = 0.5
    flip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.base_lr < 0:
            raise ConfigError(f"base_lr must be >= 0, got {self.base_lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(
                f"warmup_epochs must be in [0, epochs), got {self.warmup_epochs}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(
                f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.mixup_alpha <= 0:
            raise ConfigError(f"mixup_alpha must be positive, got {self.mixup_alpha}")
        for name in ("mixup_prob", "cutmix_prob", "flip_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")


class LrSchedule:
    """Linear warmup to peak, then half-cosine decay reaching 0 at the last step.

    The peak follows the batch-size scaling rule: base_lr * batch_size / 512.
    """

    def __init__(self, cfg: TrainConfig, steps_per_epoch: int):
        if steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be positive")
        self.peak = cfg.base_lr * cfg.batch_size / 512.0
        self.total_steps = cfg.epochs * steps_per_epoch
        self.warmup_steps = cfg.warmup_epochs * steps_per_epoch

    def lr_at(self, step: int) -> float:
        if step < 0:
            raise ConfigError(f"step must be >= 0, got {step}")
        w = self.warmup_steps
        if step < w:
            return self.peak * step / w
        last = self.total_steps - 1
        if last <= w:
            return self.peak
        t = (step - w) / (last - w)
        return self.peak * 0.5 * (1.0 + math.cos(math.pi * min(t, 1.0)))


class SGD:
    """Momentum SGD: v <- mu*v + g; p <- p - lr*v."""

    def __init__(self, params, momentum: float = 0.9):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                raise ConfigError("sgd step before backward: a parameter has no gradient")
            if p.grad.shape != p.data.shape:
                raise ShapeError(
                    f"gradient shape {p.grad.shape} != parameter shape {p.data.shape}")
            v *= self.momentum
            v += p.grad
            p.data -= lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def _cutmix_box(rng: np.random.Generator, height: int, width: int, lam: float):
    """Clipped square-ish box covering roughly (1-lam) of the frame area."""
    ratio = math.sqrt(1.0 - lam)
    cut_h, cut_w = int(height * ratio), int(width * ratio)
    cy = int(rng.integers(0, height))
    cx = int(rng.integers(0, width))
    top = max(cy - cut_h // 2, 0)
    left = max(cx - cut_w // 2, 0)
    bottom = min(cy + cut_h // 2, height)
    right = min(cx + cut_w // 2, width)
    return top, left, bottom, right


def mixup_cutmix(batch: np.ndarray, targets: np.ndarray, cfg: TrainConfig,
                 rng: np.random.Generator):
    """Mixup and cutmix, each applied independently with its own probability.

    ``targets`` are soft label rows; the returned pair is always a copy.
    Cutmix pastes the same rectangle into every frame, and its label weight
    is the realized retained-area fraction, not the sampled coefficient.
    """
    batch = np.array(batch)
    targets = np.array(targets)
    n = batch.shape[0]
    if n < 2:
        warnings.warn("batch of 1: mixup/cutmix skipped", RuntimeWarning)
        return batch, targets
    if cfg.mixup_prob > 0 and rng.random() < cfg.mixup_prob:
        lam = float(rng.beta(cfg.mixup_alpha, cfg.mixup_alpha))
        perm = rng.permutation(n)
        batch = lam * batch + (1.0 - lam) * batch[perm]
        targets = lam * targets + (1.0 - lam) * targets[perm]
    if cfg.cutmix_prob > 0 and rng.random() < cfg.cutmix_prob:
        lam = float(rng.random())  # Beta(1, 1)
        height, width = batch.shape[2], batch.shape[3]
        top, left, bottom, right = _cutmix_box(rng, height, width, lam)
        perm = rng.permutation(n)
        if bottom > top and right > left:
            batch[:, :, top:bottom, left:right, :] = \
                batch[perm][:, :, top:bottom, left:right, :]
            kept = 1.0 - (bottom - top) * (right - left) / (height * width)
            targets = kept * targets + (1.0 - kept) * targets[perm]
    return batch, targets


def _random_flip(batch: np.ndarray, prob: float, rng: np.random.Generator) -> np.ndarray:
    if prob <= 0:
        return batch
    flip = rng.random(batch.shape[0]) < prob
    if flip.any():
        batch = batch.copy()
        batch[flip] = batch[flip][:, :, :, ::-1, :]
    return batch


def train(net: FocalVideoNetwork, cfg: TrainConfig, clips: np.ndarray,
          labels: np.ndarray, out_dir, log_name: str = "metrics.log") -> list:
    """Train in place; append one metrics line per epoch; return the history.

    The metrics accuracy is measured against the pre-augmentation labels of
    each batch, so it is a running train-set figure, not a clean eval.
    """
    os.makedirs(out_dir, exist_ok=True)
    n = clips.shape[0]
    num_classes = net.config.num_classes
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ConfigError("training labels out of range for the configured head")
    clips = np.asarray(clips, dtype=net.config.dtype)
    soft = smooth_labels(labels, num_classes, cfg.label_smoothing)

    master = np.random.default_rng(cfg.seed)
    order_rng, aug_rng, path_rng = master.spawn(3)

    steps_per_epoch = math.ceil(n / cfg.batch_size)
    schedule = LrSchedule(cfg, steps_per_epoch)
    params = net.parameters()
    opt = SGD(params, momentum=cfg.momentum)

    net.train()
    history = []
    step = 0
    log_path = os.path.join(out_dir, log_name)
    with open(log_path, "w") as log:
        for epoch in range(cfg.epochs):
            order = order_rng.permutation(n)
            loss_sum = 0.0
            hits = 0
            lr = 0.0
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                xb = _random_flip(clips[idx], cfg.flip_prob, aug_rng)
                tb = soft[idx]
                if cfg.mixup_prob > 0 or cfg.cutmix_prob > 0:
                    xb, tb = mixup_cutmix(xb, tb, cfg, aug_rng)
                logits = net.forward(xb, rng=path_rng)
                loss = F.softmax_cross_entropy(logits, tb)
                if not np.isfinite(loss.data):
                    raise NumericFault(f"non-finite loss at step {step}")
                ComputationGraph(loss).backward(params)
                lr = schedule.lr_at(step)
                opt.step(lr)
                opt.zero_grad()
                loss_sum += loss.item() * len(idx)
                hits += int((logits.data.argmax(axis=1) == labels[idx]).sum())
                step += 1
            epoch_loss = loss_sum / n
            epoch_acc = hits / n
            log.write(f"epoch {epoch} loss {epoch_loss:.6f} "
                      f"acc {epoch_acc:.6f} lr {lr:.8f}\n")
            log.flush()
            history.append(dict(epoch=epoch, loss=epoch_loss, acc=epoch_acc, lr=lr))
    net.eval()
    return history


def evaluate(net: FocalVideoNetwork, clips: np.ndarray, labels: np.ndarray,
             batch_size: int = 64) -> float:
    """Deterministic top-1 accuracy."""
    net.eval()
    clips = np.asarray(clips, dtype=net.config.dtype)
    hits = 0
    with no_grad():
        for start in range(0, clips.shape[0], batch_size):
            xb = clips[start:start + batch_size]
            yb = labels[start:start + batch_size]
            logits = net.forward(xb)
            hits += int((logits.data.argmax(axis=1) == yb).sum())
    return hits / clips.shape[0]


def parse_metrics(path) -> list:
    """Read a metrics log back into the history structure train() returns."""
    out = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.split()
            if len(parts) != 8 or parts[0] != "epoch" or parts[2] != "loss" \
                    or parts[4] != "acc" or parts[6] != "lr":
                raise OSError(f"{path}:{line_no}: malformed metrics line")
            out.append(dict(epoch=int(parts[1]), loss=float(parts[3]),
                            acc=float(parts[5]), lr=float(parts[7])))
    return out
