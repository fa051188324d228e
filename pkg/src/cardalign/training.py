"""Shared optimization recipe: AdamW, warm-up + cosine schedule, early stopping."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cardalign.tensor import Tensor


class OptimizerError(RuntimeError):
    pass


@dataclass
class ScheduleConfig:
    """Per-step learning-rate schedule: linear warm-up, then half-cycle cosine."""

    base_lr: float
    steps_per_epoch: int
    warmup_epochs: int = 40
    max_epochs: int = 200
    min_lr: float | None = None  # None -> base_lr / 100

    def __post_init__(self):
        if self.warmup_epochs >= self.max_epochs:
            raise ValueError(
                f"warmup_epochs ({self.warmup_epochs}) must be < max_epochs ({self.max_epochs})"
            )
        if self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")
        if self.min_lr is None:
            self.min_lr = self.base_lr / 100.0

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.max_epochs * self.steps_per_epoch


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Learning rate at a global optimizer step.

    Warm-up covers steps 0..warmup_steps-1 with lr = base_lr*(step+1)/warmup_steps
    (the off-by-one rule: the ramp reaches base_lr on its last step). The cosine
    branch starts at base_lr and reaches min_lr exactly on the final step.
    """
    step = max(0, min(step, cfg.total_steps))
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.base_lr * (step + 1) / cfg.warmup_steps
    span = cfg.total_steps - 1 - cfg.warmup_steps
    if span <= 0:
        progress = 1.0
    else:
        progress = min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict.

    Parameters are immutable tensors; each step replaces the entries of the
    dict it was constructed around. Weight decay multiplies parameters by
    (1 - lr*weight_decay) directly, outside the moment path.
    """

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.05):
        self.params = params
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise OptimizerError(f"non-finite gradient for parameter {name!r}; step aborted")
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            new = p.data * (1.0 - lr * self.weight_decay) - lr * update
            self.params[name] = Tensor(new, requires_grad=True, dtype=p.dtype)


@dataclass
class EarlyStop:
    """Stops after `patience` consecutive epochs without strict improvement.

    Ties count as non-improvement. `mode` is "min" for losses, "max" for
    R2/AUROC-style metrics.
    """

    patience: int = 15
    mode: str = "min"
    best_metric: float | None = None
    best_epoch: int = -1
    epochs_since_improve: int = 0

    def update(self, value: float, epoch: int) -> str:
        improved = self.best_metric is None or (
            value < self.best_metric if self.mode == "min" else value > self.best_metric
        )
        if improved:
            self.best_metric = value
            self.best_epoch = epoch
            self.epochs_since_improve = 0
            return "continue"
        self.epochs_since_improve += 1
        return "stop" if self.epochs_since_improve >= self.patience else "continue"


class TrainLog:
    """CSV training log: step, epoch, lr, train loss, val metric."""

    def __init__(self, path):
        self.path = Path(path)
        self.rows: list[str] = ["step,epoch,lr,train_loss,val_metric"]

    def log(self, step: int, epoch: int, lr: float, train_loss: float, val_metric: float | None):
        val = "" if val_metric is None else repr(float(val_metric))
        self.rows.append(f"{step},{epoch},{lr!r},{float(train_loss)!r},{val}")

    def flush(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("\n".join(self.rows) + "\n")


def checkpoint_name(stage: str, epoch: int, metric: float) -> str:
    return f"{stage}-{epoch:04d}-{metric:.6f}.ckpt"
