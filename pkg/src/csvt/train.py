"""Supervised fine-tuning and batched prediction."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import label_smooth, mixup, one_hot, train_augment
from .fileio import atomic_write_csv
from .model import CsvtModel, no_decay_names
from .tensor import NonFiniteError
from .tensor.optim import AdamW, clip_grad_norm, warmup_cosine

TRAIN_LOG_HEADER = ("step", "epoch", "lr", "loss")


@dataclass
class FinetuneConfig:
    epochs: int = 100
    warmup_epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    min_lr: float = 1e-6
    weight_decay: float = 0.05
    mixup_alpha: float = 0.2
    label_smoothing: float = 0.1
    crop_scale: tuple = (0.35, 1.0)
    clip_grad: float = 0.0
    seed: int = 0


def finetune(model: CsvtModel, images: np.ndarray, labels, cfg: FinetuneConfig,
             log_path=None) -> list[tuple]:
    """Cross-entropy training on smoothed, mixed-up labels; returns the step log."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(cfg.seed)
    params = model.params
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                no_decay=no_decay_names(params))
    n = len(images)
    b = min(cfg.batch_size, n)
    steps_per_epoch = n // b if b >= 2 else 0
    total = cfg.epochs * steps_per_epoch
    warmup = min(cfg.warmup_epochs * steps_per_epoch, total)
    size = model.cfg.image_size
    targets = label_smooth(one_hot(labels, model.cfg.num_classes), cfg.label_smoothing)
    log = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for it in range(steps_per_epoch):
            idx = order[it * b:(it + 1) * b]
            x = np.stack([train_augment(images[i], size, rng, cfg.crop_scale) for i in idx])
            y = targets[idx]
            if cfg.mixup_alpha > 0:
                x, y = mixup(x, y, cfg.mixup_alpha, rng)
            lr = warmup_cosine(step, total, warmup, cfg.lr, cfg.min_lr)
            T.reset_tape()
            loss = T.soft_cross_entropy(model.forward(x, training=True), y)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteError(f"non-finite loss at step {step}")
            opt.zero_grad()
            T.backward(loss)
            if cfg.clip_grad:
                clip_grad_norm(params.values(), cfg.clip_grad)
            opt.lr = lr
            opt.step()
            log.append((step, epoch, lr, value))
            step += 1
    if log_path is not None:
        atomic_write_csv(log_path, TRAIN_LOG_HEADER,
                         [(s, e, repr(float(lr)), repr(float(v))) for s, e, lr, v in log])
    return log


def predict_logits(model: CsvtModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model.forward(images[i:i + batch_size], training=False).data)
    if not out:
        return np.zeros((0, model.cfg.num_classes))
    return np.concatenate(out)


def predict(model: CsvtModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    return predict_logits(model, images, batch_size).argmax(axis=-1)
