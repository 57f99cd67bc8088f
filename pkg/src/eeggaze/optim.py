"""Adam with L2-coupled weight decay, and the mean-squared-error loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 5e-4
    epsilon: float = 1e-8
    decay_all: bool = False
    """Decay every parameter instead of conv/linear weights only."""
    decoupled: bool = False
    """Shrink parameters directly (AdamW style) instead of adding to the gradient."""

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def decays(name: str) -> bool:
    """Conv and linear kernels decay; biases and batchnorm gamma/beta do not."""
    return name.endswith(".weight")


class Adam:
    """Per-parameter first/second moments and a shared step counter.

    ``schedule(t)`` returns the learning rate for step ``t``; the default
    keeps ``cfg.lr`` constant.
    """

    def __init__(self, params: list[tuple[str, Tensor]], cfg: AdamConfig = AdamConfig(),
                 schedule: Callable[[int], float] | None = None):
        self.params = params
        self.cfg = cfg
        self.schedule = schedule or (lambda t: cfg.lr)
        self.m = [np.zeros_like(t.values) for _, t in params]
        self.v = [np.zeros_like(t.values) for _, t in params]
        self.t = 0

    def step(self) -> None:
        cfg = self.cfg
        self.t += 1
        lr = self.schedule(self.t)
        bc1 = 1 - cfg.beta1 ** self.t
        bc2 = 1 - cfg.beta2 ** self.t
        for (name, p), m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                raise RuntimeError(f"parameter {name} has no gradient")
            g = p.grad
            wd = cfg.weight_decay if (cfg.decay_all or decays(name)) else 0.0
            if wd and not cfg.decoupled:
                g = g + wd * p.values
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            with np.errstate(invalid="ignore", over="ignore"):
                update = lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)
            if wd and cfg.decoupled:
                update = update + lr * wd * p.values
            if not np.all(np.isfinite(update)):
                raise NonFiniteError(f"non-finite Adam update for {name} at step {self.t}")
            p.values -= update.astype(p.values.dtype, copy=False)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean of squared errors over all entries, and its gradient w.r.t. ``pred``."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    return loss, (2.0 / diff.size) * diff
