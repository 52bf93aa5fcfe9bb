"""Adam optimizer and the step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_decay: float = 0.5
    lr_decay_every: int = 10
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    gamma: float = 2.0
    alpha: tuple | None = None  # None -> inverse class frequency from the data
    crops_per_epoch: int = 128
    val_fraction: float = 0.1

    def validate(self) -> None:
        if self.lr <= 0 or self.lr_decay <= 0 or self.lr_decay_every < 1:
            raise ConfigError("learning-rate schedule values must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.crops_per_epoch < 1:
            raise ConfigError("epochs, batch_size and crops_per_epoch must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for a 0-indexed epoch: decayed once per decay window."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(named_params: dict) -> AdamState:
    state = AdamState()
    for name, t in named_params.items():
        state.m[name] = np.zeros_like(t.data)
        state.v[name] = np.zeros_like(t.data)
    return state


def adam_step(named_params: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update over every parameter in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**state.step
    bias2 = 1.0 - b2**state.step
    for name, t in named_params.items():
        g = t.grad
        if g is None:
            g = np.zeros_like(t.data)
        m, v = state.m[name], state.v[name]
        if m.shape != t.data.shape:
            raise ShapeError(f"Adam state for {name} has shape {m.shape}, param {t.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        t.data -= (lr * update).astype(t.data.dtype, copy=False)
