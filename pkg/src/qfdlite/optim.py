"""Momentum SGD with parameter-kind-aware weight decay, plus LR schedules.

Weight decay touches weights and biases only; norm affine parameters and
quantizer scalars are exempt. Quantizer bounds/scales are re-projected to
their validity floors after every step.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NumericalError


class SGD:
    """Classic momentum update: m <- mu*m + g + wd*theta; theta <- theta - lr*m."""

    def __init__(self, params, quantizers=(), momentum: float = 0.9,
                 weight_decay: float = 0.0, quantizer_lr_scale: float = 1.0,
                 grad_clip: float | None = None):
        self.params = list(params)            # (name, Tensor, kind)
        names = [n for n, _, _ in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.quantizers = list(quantizers)    # (name, QuantParams)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.quantizer_lr_scale = quantizer_lr_scale
        self.grad_clip = grad_clip
        self._velocity = {name: np.zeros_like(t.values) for name, t, _ in self.params}

    def zero_grad(self):
        for _, t, _ in self.params:
            t.grad = None

    def _check_finite(self):
        for name, t, _ in self.params:
            if t.grad is not None and not np.isfinite(t.grad).all():
                bad = t.grad[~np.isfinite(t.grad)]
                raise NumericalError(
                    f"non-finite gradient in {name!r}: {bad.size} of {t.grad.size} "
                    f"entries (first: {bad.flat[0]})")

    def step(self, lr: float):
        self._check_finite()
        if self.grad_clip is not None:
            total = 0.0
            for _, t, _ in self.params:
                if t.grad is not None:
                    total += float((t.grad.astype(np.float64) ** 2).sum())
            norm = math.sqrt(total)
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
                for _, t, _ in self.params:
                    if t.grad is not None:
                        t.grad *= scale
        for name, t, kind in self.params:
            if t.grad is None:
                g = np.zeros_like(t.values)
            else:
                g = t.grad
            if self.weight_decay and kind in ("weight", "bias"):
                g = g + self.weight_decay * t.values
            v = self._velocity[name]
            v *= self.momentum
            v += g
            eff_lr = lr * (self.quantizer_lr_scale if kind == "quant" else 1.0)
            t.values -= np.asarray(eff_lr * v, dtype=t.values.dtype)
        for _, q in self.quantizers:
            q.project()


def lr_at(schedule: str, base_lr: float, epoch: int, epochs: int) -> float:
    """Learning rate for the given epoch index (0-based)."""
    if not 0 <= epoch < epochs:
        raise ValueError(f"epoch {epoch} outside [0,{epochs})")
    if schedule == "cosine":
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))
    if schedule == "step":
        if epoch >= 0.75 * epochs:
            return base_lr * 0.01
        if epoch >= 0.5 * epochs:
            return base_lr * 0.1
        return base_lr
    if schedule == "constant":
        return base_lr
    raise ValueError(f"unknown schedule {schedule!r}")
