"""AdamW with decoupled weight decay and the linear-warmup cosine schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import Tensor


@dataclass(frozen=True)
class OptimConfig:
    peak_lr: float = 1e-4
    warmup_lr: float = 1e-6
    warmup_steps: int = 500
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.warmup_lr > self.peak_lr:
            raise ConfigError(f"warmup_lr {self.warmup_lr} exceeds peak_lr {self.peak_lr}")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")


def lr_at(step: int, total_steps: int, cfg: OptimConfig) -> float:
    """Linear warmup to peak over ``warmup_steps``, then cosine decay back to
    ``warmup_lr`` at ``total_steps``; clamps beyond the end."""
    if step < 0:
        raise ConfigError("negative step")
    span = cfg.peak_lr - cfg.warmup_lr
    step = min(step, total_steps)
    if step <= cfg.warmup_steps:
        if cfg.warmup_steps == 0:
            return cfg.peak_lr
        return cfg.warmup_lr + span * (step / cfg.warmup_steps)
    if total_steps <= cfg.warmup_steps:
        return cfg.peak_lr
    progress = (step - cfg.warmup_steps) / (total_steps - cfg.warmup_steps)
    return cfg.warmup_lr + span * 0.5 * (1.0 + float(np.cos(np.pi * progress)))


class AdamW:
    """Decoupled-weight-decay adaptive-moment update.

    Decay applies to matrix-shaped parameters only (biases and normalization
    gains are 1-D). Frozen parameters and parameters without grads are left
    untouched.
    """

    def __init__(self, cfg: OptimConfig):
        self.cfg = cfg
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        self.t += 1
        c = self.cfg
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name, p in params.items():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self._m[name] = m
                self._v[name] = np.zeros_like(p.data)
            v = self._v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            if c.weight_decay and p.data.ndim >= 2:
                update = update + c.weight_decay * p.data
            p.data = p.data - lr * update
