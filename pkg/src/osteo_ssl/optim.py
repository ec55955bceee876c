"""Cosine learning-rate schedule and the clipped layer-wise adaptive optimizer."""

from __future__ import annotations

import math

import numpy as np
import torch


class OptimizerError(ValueError):
    pass


class NonFiniteGradientError(OptimizerError):
    pass


def cosine_lr(step: int, total_steps: int, base_lr: float, final_lr: float = 0.0) -> float:
    if total_steps < 1:
        raise OptimizerError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise OptimizerError(f"step {step} outside [0, {total_steps}]")
    return final_lr + (base_lr - final_lr) * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def local_lr(w_norm: float, g_norm: float, trust_coeff: float, weight_decay: float) -> float:
    """Layer-wise rate ``trust * |w| / (|g| + wd * |w|)``, clipped at 1; 1 if a norm is 0."""
    if w_norm > 0 and g_norm > 0:
        return min(trust_coeff * w_norm / (g_norm + weight_decay * w_norm), 1.0)
    return 1.0


def lars_update(
    weights: list[np.ndarray],
    grads: list[np.ndarray],
    lr: float,
    trust_coeff: float = 0.001,
    weight_decay: float = 0.0,
    momentum_state: list[np.ndarray] | None = None,
    momentum: float = 0.9,
):
    """One step over a list of layers; returns ``(weights, momentum_state, local_lrs)``.

    Per layer: ``v = momentum * v + local_lr * (g + wd * w)`` then ``w -= lr * v``.
    """
    if lr <= 0:
        raise OptimizerError("lr must be positive")
    if momentum_state is None:
        momentum_state = [np.zeros_like(w, dtype=np.float64) for w in weights]
    new_w, new_state, rates = [], [], []
    for k, (w, g, v) in enumerate(zip(weights, grads, momentum_state)):
        w = np.asarray(w, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if w.shape != g.shape:
            raise OptimizerError(f"layer {k}: weight {w.shape} vs grad {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"layer {k}: non-finite gradient (|g| = {np.linalg.norm(g)})")
        rate = local_lr(float(np.linalg.norm(w)), float(np.linalg.norm(g)), trust_coeff, weight_decay)
        v = momentum * v + rate * (g + weight_decay * w)
        new_w.append(w - lr * v)
        new_state.append(v)
        rates.append(rate)
    return new_w, new_state, rates


class LARC(torch.optim.Optimizer):
    """Torch version of :func:`lars_update`; each parameter tensor is one layer."""

    def __init__(self, params, lr=0.1, momentum=0.9, weight_decay=0.0, trust_coeff=0.001):
        if lr <= 0:
            raise OptimizerError("lr must be positive")
        super().__init__(params, dict(lr=lr, momentum=momentum, weight_decay=weight_decay, trust_coeff=trust_coeff))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                g = p.grad
                if not torch.isfinite(g).all():
                    raise NonFiniteGradientError(f"non-finite gradient in parameter of shape {tuple(p.shape)}")
                rate = local_lr(float(p.norm()), float(g.norm()), group["trust_coeff"], group["weight_decay"])
                d = g.add(p, alpha=group["weight_decay"]).mul_(rate)
                state = self.state[p]
                buf = state.get("momentum_buffer")
                if buf is None:
                    buf = state["momentum_buffer"] = torch.zeros_like(p)
                buf.mul_(group["momentum"]).add_(d)
                p.add_(buf, alpha=-group["lr"])
        return loss
