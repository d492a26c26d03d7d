"""Momentum SGD with fixed or cosine-decayed learning rate."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float
    momentum: float = 0.0
    schedule: str = "fixed"  # "fixed" | "cosine"
    total_steps: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.schedule not in ("fixed", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.schedule == "cosine" and self.total_steps < 1:
            raise ConfigError("cosine schedule needs total_steps >= 1")

    def lr_at(self, step: int) -> float:
        if self.schedule == "fixed":
            return self.learning_rate
        t = min(max(step, 0), self.total_steps)
        return 0.5 * self.learning_rate * (1.0 + math.cos(math.pi * t / self.total_steps))


class SGD:
    """``v <- momentum * v + g``; ``p <- p - lr(step) * v``; then grads are cleared.

    Parameters whose ``requires_grad`` is off (frozen) are skipped entirely.
    """

    def __init__(self, params: Iterable[Tensor], config: SgdConfig):
        self.params = list(params)
        self.config = config
        self._velocity: dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, step: int) -> float:
        lr = self.config.lr_at(step)
        mom = self.config.momentum
        for p in self.params:
            if not p.requires_grad:
                continue
            if p.grad is None:
                raise ContractError(f"parameter {p.name or p.node_id} has no gradient")
            v = self._velocity.get(p.node_id)
            v = p.grad.copy() if v is None or mom == 0.0 else mom * v + p.grad
            self._velocity[p.node_id] = v
            if lr != 0.0:
                p.data = p.data - lr * v
            p.grad = None
        return lr


def sgd_step(params: Iterable[Tensor], config: SgdConfig, step: int) -> float:
    """Stateless single update (no momentum history carried between calls)."""
    return SGD(params, config).step(step)
