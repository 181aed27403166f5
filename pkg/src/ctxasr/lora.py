"""Low-rank adapters on the decoder's attention projections.

inject_lora wraps each named target linear map W as W + (alpha/r) * B @ A
with A small-random and B zero, so the wrapped model computes exactly the
base function at injection time. merge_lora folds the product back into W
and removes the wrappers.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .decoder import TextDecoder
from .errors import InvalidConfigError, InvalidInputError

ATTENTION_TARGETS = ("q_proj", "k_proj", "v_proj", "o_proj")


@dataclass(frozen=True)
class LoraSpec:
    rank: int = 8
    alpha: float = 16.0
    targets: tuple[str, ...] = ("q_proj", "k_proj", "v_proj", "o_proj")

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise InvalidConfigError(f"LoRA rank must be >= 1, got {self.rank}")
        if self.alpha <= 0:
            raise InvalidConfigError(f"LoRA alpha must be positive, got {self.alpha}")
        if not self.targets:
            raise InvalidConfigError("LoRA target set must not be empty")
        object.__setattr__(self, "targets", tuple(self.targets))

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


class LoraLinear(nn.Module):
    def __init__(self, base: nn.Linear, spec: LoraSpec) -> None:
        super().__init__()
        if spec.rank >= min(base.in_features, base.out_features):
            raise InvalidConfigError(
                f"rank {spec.rank} must be below min layer dim "
                f"{min(base.in_features, base.out_features)}")
        self.base = base
        self.base.weight.requires_grad_(False)
        if self.base.bias is not None:
            self.base.bias.requires_grad_(False)
        self.scaling = spec.scaling
        self.lora_A = nn.Parameter(torch.randn(spec.rank, base.in_features,
                                               dtype=base.weight.dtype) * 0.02)
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, spec.rank,
                                               dtype=base.weight.dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scaling * F.linear(F.linear(x, self.lora_A), self.lora_B)

    def merged_weight(self) -> torch.Tensor:
        return self.base.weight + self.scaling * (self.lora_B @ self.lora_A)


def has_lora(decoder: TextDecoder) -> bool:
    return any(isinstance(m, LoraLinear) for m in decoder.modules())


def iter_lora_modules(decoder: TextDecoder):
    for name, module in decoder.named_modules():
        if isinstance(module, LoraLinear):
            yield name, module


def inject_lora(decoder: TextDecoder, spec: LoraSpec) -> TextDecoder:
    """Wrap the named attention projections in every block; mutates in place."""
    if has_lora(decoder):
        raise InvalidInputError("decoder already carries LoRA adapters")
    for target in spec.targets:
        if target not in ATTENTION_TARGETS:
            raise InvalidInputError(
                f"unknown LoRA target {target!r}; known targets: {ATTENTION_TARGETS}")
    for block in decoder.blocks:
        for target in spec.targets:
            base = getattr(block.attn, target)
            setattr(block.attn, target, LoraLinear(base, spec))
    decoder.lora_spec = spec
    return decoder


def merge_lora(decoder: TextDecoder) -> TextDecoder:
    """Fold adapters into the base weights and restore plain linear layers."""
    if not has_lora(decoder):
        raise InvalidInputError("decoder has no LoRA adapters to merge")
    for block in decoder.blocks:
        for target in ATTENTION_TARGETS:
            module = getattr(block.attn, target)
            if isinstance(module, LoraLinear):
                with torch.no_grad():
                    module.base.weight.copy_(module.merged_weight())
                module.base.weight.requires_grad_(True)
                setattr(block.attn, target, module.base)
    decoder.lora_spec = None
    return decoder


def lora_parameter_count(decoder: TextDecoder) -> int:
    """Actual trainable adapter parameters currently attached."""
    return sum(m.lora_A.numel() + m.lora_B.numel() for _, m in iter_lora_modules(decoder))


def expected_lora_parameter_count(spec: LoraSpec, embed_dim: int, layers: int) -> int:
    """Closed form: sum over targets of rank * (d_in + d_out) per layer."""
    return layers * len(spec.targets) * spec.rank * (embed_dim + embed_dim)
