"""AdamW with a finite-gradient guard, and the warmup + cosine schedule."""

from __future__ import annotations

import math

import torch

BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class NonFiniteGradientError(RuntimeError):
    pass


def make_optimizer(params, lr: float = 1e-4, weight_decay: float = 1e-4) -> torch.optim.AdamW:
    # foreach=False keeps the per-parameter update order fixed.
    return torch.optim.AdamW(params, lr=lr, betas=BETAS, eps=ADAM_EPS, weight_decay=weight_decay, foreach=False)


def named_parameters_of(optimizer: torch.optim.Optimizer):
    for group in optimizer.param_groups:
        yield from group["params"]


def optimizer_step(optimizer: torch.optim.Optimizer, lr: float | None = None) -> None:
    """One decoupled-weight-decay Adam step; refuses to touch weights on NaN/Inf gradients."""
    bad = []
    for i, p in enumerate(named_parameters_of(optimizer)):
        if p.grad is not None and not torch.isfinite(p.grad).all():
            bad.append(i)
    if bad:
        optimizer.zero_grad(set_to_none=True)
        raise NonFiniteGradientError(f"non-finite gradient in parameter slot(s) {bad}; step skipped")
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    optimizer.step()


def lr_schedule(epoch: int, max_epochs: int, warmup_epochs: int, base_lr: float, warmup_start: float = 0.1) -> float:
    """Linear warmup from ``warmup_start * base_lr``, then cosine decay to zero."""
    if not 0 <= epoch < max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {max_epochs})")
    if epoch < warmup_epochs:
        return base_lr * (warmup_start + (1.0 - warmup_start) * epoch / warmup_epochs)
    span = max_epochs - warmup_epochs
    progress = (epoch - warmup_epochs) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
