"""AdamW with decoupled weight decay, a constant learning rate and optional
global gradient-norm clipping."""

from __future__ import annotations

import numpy as np

from .autodiff import NonFiniteError


class AdamW:
    def __init__(self, named_params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, clip_norm: float = 0.0):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        if clip_norm < 0:
            raise ValueError("clip_norm must be non-negative (0 disables clipping)")
        self.params = list(named_params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def grad_norm(self) -> float:
        """Global L2 norm over every parameter gradient, in a fixed order."""
        total = 0.0
        for _, p in self.params:
            if p.grad is not None:
                total += float(np.sum(np.square(p.grad, dtype=np.float64)))
        return float(np.sqrt(total))

    def step(self) -> None:
        scale = 1.0
        if self.clip_norm:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for (name, p), m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad if scale == 1.0 else p.grad * p.grad.dtype.type(scale)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.lr == 0:
                continue
            p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
            if not np.all(np.isfinite(p.data)):
                raise NonFiniteError(f"parameter {name} became non-finite")

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None
