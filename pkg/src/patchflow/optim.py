"""Optimization: decoupled-weight-decay Adam and LR schedules."""

from __future__ import annotations

import math
from typing import Iterable

import torch


class AdamW(torch.optim.Optimizer):
    """AdamW with bias correction; weight decay is applied to the
    parameter before the moment update (decoupled)."""

    def __init__(self, params: Iterable, lr: float = 3e-4,
                 betas: tuple[float, float] = (0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.1):
        if lr < 0 or eps <= 0:
            raise ValueError("lr must be >= 0 and eps > 0")
        if not (0 <= betas[0] < 1 and 0 <= betas[1] < 1):
            raise ValueError(f"betas must lie in [0, 1), got {betas}")
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None if closure is None else closure()
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            lr, eps, wd = group["lr"], group["eps"], group["weight_decay"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                grad = p.grad
                if not torch.isfinite(grad).all():
                    raise ValueError(
                        f"non-finite gradient for tensor of shape {tuple(p.shape)}"
                    )
                state = self.state[p]
                if len(state) == 0:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                state["step"] += 1
                t = state["step"]
                p.mul_(1.0 - lr * wd)
                state["exp_avg"].mul_(beta1).add_(grad, alpha=1.0 - beta1)
                state["exp_avg_sq"].mul_(beta2).addcmul_(grad, grad, value=1.0 - beta2)
                bias1 = 1.0 - beta1**t
                bias2 = 1.0 - beta2**t
                denom = (state["exp_avg_sq"] / bias2).sqrt_().add_(eps)
                p.addcdiv_(state["exp_avg"], denom, value=-lr / bias1)
        return loss

    def set_lr(self, lr: float):
        for group in self.param_groups:
            group["lr"] = lr


def clip_grad_norm(parameters: Iterable[torch.Tensor], max_norm: float) -> float:
    """Global-norm clipping; returns the pre-clip norm."""
    grads = [p.grad for p in parameters if p.grad is not None]
    if not grads:
        return 0.0
    total = torch.sqrt(sum((g.detach() ** 2).sum() for g in grads))
    if float(total) > max_norm:
        scale = max_norm / (float(total) + 1e-12)
        for g in grads:
            g.detach().mul_(scale)
    return float(total)


def lr_at(step: int, warmup_steps: int, total_steps: int, lr_max: float,
          lr_min: float = 0.0, schedule: str = "constant") -> float:
    """Linear warmup 0 -> lr_max over warmup_steps, then constant lr_max
    or cosine decay lr_max -> lr_min over the remaining steps.
    Continuous at the warmup boundary."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > total_steps:
        raise ValueError("warmup_steps must be <= total_steps")
    if step < warmup_steps:
        return lr_max * step / warmup_steps
    if schedule == "constant":
        return lr_max
    if schedule == "cosine":
        span = total_steps - warmup_steps
        progress = (step - warmup_steps) / span if span > 0 else 1.0
        return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * progress))
    raise ValueError(f"unknown schedule {schedule!r}")
