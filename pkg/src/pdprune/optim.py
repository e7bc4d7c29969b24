"""SGD with momentum and a cosine learning-rate schedule."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .errors import StateError


class SGD:
    """Heavy-ball SGD, weight decay folded into the gradient.

    v <- momentum * v + grad + weight_decay * param
    param <- param - lr * v
    """

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        for p in self.params:
            if p.grad is None:
                raise StateError("sgd step without gradients; run backward first")
        for p, v in zip(self.params, self.velocity):
            d = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v *= self.momentum
            v += d
            p.data -= lr * v


def sgd_step(params: Sequence[Tensor], lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0, optimizer: SGD | None = None) -> SGD:
    """One update; pass the returned optimizer back in to keep momentum state."""
    opt = optimizer or SGD(params, momentum, weight_decay)
    opt.step(lr)
    return opt


def cosine_lr(base_lr: float, progress_epochs: float, total_epochs: int, warmup_epochs: float = 0.0,
              final_lr: float = 0.0) -> float:
    """Linear warm-up to ``base_lr`` then cosine decay to ``final_lr``.

    ``progress_epochs`` is fractional (epoch + step / steps_per_epoch).
    """
    if warmup_epochs > 0 and progress_epochs < warmup_epochs:
        return base_lr * (progress_epochs + 1e-12) / warmup_epochs
    span = max(total_epochs - warmup_epochs, 1e-12)
    frac = min(max((progress_epochs - warmup_epochs) / span, 0.0), 1.0)
    return final_lr + 0.5 * (base_lr - final_lr) * (1.0 + math.cos(math.pi * frac))
