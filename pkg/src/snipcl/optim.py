"""SGD with momentum and L2 weight decay over a parameter tree."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError


class SGD:
    """Heavy-ball SGD: ``buf = mu * buf + (g + wd * p)``, ``p -= lr * buf``.

    With ``clip_norm > 0`` the raw gradients are first rescaled so their
    global L2 norm is at most ``clip_norm``.

    Only the names in ``params`` are ever touched; anything else (frozen
    modules, key copies) is left bit-identical.
    """

    def __init__(self, params: dict, lr: float, momentum: float = 0.9, weight_decay: float = 1e-4,
                 clip_norm: float = 0.0):
        if lr <= 0 or not 0 <= momentum < 1 or weight_decay < 0 or clip_norm < 0:
            raise ConfigError(f"bad SGD settings lr={lr} momentum={momentum} wd={weight_decay} clip={clip_norm}")
        self.params = params
        self.lr = lr
        self.clip_norm = clip_norm
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float(np.sum(p.grad * p.grad))
        return total ** 0.5

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        factor = 1.0
        if self.clip_norm > 0:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                factor = self.clip_norm / norm
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = factor * p.grad + self.weight_decay * p.data
            buf = self.buffers[name]
            buf *= self.momentum
            buf += g
            p.data = p.data - lr * buf
