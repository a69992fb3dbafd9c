"""SGD with momentum, L2 weight decay, and stepped learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    lr_decay_factor: float = 1.0
    lr_decay_every: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate: must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum: must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay: must be nonnegative, got {self.weight_decay}")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ConfigError(f"lr_decay_factor: must lie in (0, 1], got {self.lr_decay_factor}")
        if self.lr_decay_every < 0:
            raise ConfigError(f"lr_decay_every: must be nonnegative, got {self.lr_decay_every}")

    def effective_lr(self, epoch: int) -> float:
        if self.lr_decay_every > 0:
            return self.learning_rate * self.lr_decay_factor ** (epoch // self.lr_decay_every)
        return self.learning_rate


@dataclass
class OptimizerState:
    """Per-parameter momentum buffers plus the epoch counter driving lr decay.

    Single-owner mutable: each training loop keeps its own state and bumps
    ``epoch`` once per data pass.
    """

    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0


def sgd_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    cfg: SgdConfig,
) -> dict[str, Tensor]:
    """One update: v <- m*v + (grad + wd*param); param <- param - lr_epoch * v."""
    lr = cfg.effective_lr(state.epoch)
    out: dict[str, Tensor] = {}
    for name, p in params.items():
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise DimensionError(f"sgd_step: gradient {g.shape} does not match parameter {name!r} {p.shape}")
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        if cfg.momentum:
            v = state.velocity.get(name)
            v = g if v is None else cfg.momentum * v + g
            state.velocity[name] = v
        else:
            v = g
        out[name] = Tensor._wrap(p.data - lr * v)
    return out
