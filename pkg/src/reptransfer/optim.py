"""SGD with momentum, weight decay and the "poly" learning-rate policy."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Mapping

import numpy as np

from .exceptions import InputError, InvariantError
from .tensor import Tensor

DEFAULT_BASE_LR = 2.5e-4
DEFAULT_MOMENTUM = 0.9
DEFAULT_POWER = 0.9
# The reported decay of 0.5 cannot be right for SGD on weights; 5e-4 is the DeepLab value.
DEFAULT_WEIGHT_DECAY = 5e-4


@dataclass(frozen=True)
class SGDConfig:
    base_lr: float = DEFAULT_BASE_LR
    momentum: float = DEFAULT_MOMENTUM
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    power: float = DEFAULT_POWER
    max_iter: int = 3000
    batch_size: int = 8
    head_lr_mult: float = 1.0   # classifier head steps at head_lr_mult * lr

    def __post_init__(self):
        if not self.base_lr > 0:
            raise InputError(f"base_lr must be > 0, got {self.base_lr}")
        if not 0 <= self.momentum < 1:
            raise InputError(f"momentum must be in [0, 1), got {self.momentum}")
        if not self.power > 0:
            raise InputError(f"power must be > 0, got {self.power}")
        if self.weight_decay < 0:
            raise InputError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.max_iter < 1 or self.batch_size < 1:
            raise InputError("max_iter and batch_size must be positive")
        if not self.head_lr_mult > 0:
            raise InputError(f"head_lr_mult must be > 0, got {self.head_lr_mult}")

    def to_dict(self) -> dict:
        return asdict(self)


def poly_lr(cfg: SGDConfig, it: int) -> float:
    """base_lr * (1 - it/max_iter) ** power."""
    if not 0 <= it <= cfg.max_iter:
        raise InputError(f"iteration {it} outside [0, {cfg.max_iter}]")
    return cfg.base_lr * (1.0 - it / cfg.max_iter) ** cfg.power


def _decays(name: str) -> bool:
    # biases are not decayed
    return not name.endswith(".bias")


def sgd_step(params: Mapping[str, Tensor], velocity: dict[str, np.ndarray], cfg: SGDConfig,
             it: int, frozen: Iterable[str] = (), lr: float | None = None) -> None:
    """One in-place update of every non-frozen parameter, then zero its gradient.

    v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v
    (lr scaled by ``cfg.head_lr_mult`` for the classifier head)
    """
    frozen = set(frozen)
    rate = poly_lr(cfg, it) if lr is None else lr
    for name, p in params.items():
        if name in frozen:
            continue
        if p.grad is None:
            raise InvariantError(f"trainable parameter {name} has no gradient")
        step = p.grad
        if cfg.weight_decay and _decays(name):
            step = step + p.data.dtype.type(cfg.weight_decay) * p.data
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v *= p.data.dtype.type(cfg.momentum)
        v += step
        velocity[name] = v
        r = rate * cfg.head_lr_mult if name.startswith("head.") else rate
        p.data -= p.data.dtype.type(r) * v
        p.grad.fill(0)
