"""Small shared helpers for the torch training loops."""

from __future__ import annotations

import math

import torch

from .errors import TrainingDivergedError


def seed_all(seed: int) -> None:
    torch.manual_seed(seed)


def warmup_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    """Linear warmup to base_lr, constant afterwards. step is 0-based."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, (step + 1) / warmup_steps)


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def check_finite_loss(loss: torch.Tensor, step: int, stage: str) -> float:
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingDivergedError(f"{stage}: loss became {value} at step {step}")
    return value


def parameter_count(module: torch.nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters()
               if (p.requires_grad or not trainable_only))


def lengths_to_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    """(B,) lengths -> (B, max_len) bool mask, True on valid positions."""
    ar = torch.arange(max_len, device=lengths.device)
    return ar[None, :] < lengths[:, None]
