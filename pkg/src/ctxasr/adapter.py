"""Bridge from encoder frames to decoder embedding space.

Temporal downsampling works by concatenating ``stack_factor`` consecutive
frames (right-padded with zeros, so no acoustic evidence is dropped) and
projecting the stack through a two-layer nonlinearity to the decoder
dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import EncoderOutput
from .errors import InvalidConfigError, InvalidInputError


@dataclass(frozen=True)
class AdapterConfig:
    stack_factor: int = 2
    in_dim: int = 64
    out_dim: int = 64
    hidden_dim: int = 128

    def __post_init__(self) -> None:
        if min(self.stack_factor, self.in_dim, self.out_dim, self.hidden_dim) < 1:
            raise InvalidConfigError("all adapter dimensions must be positive")


def adapter_parameter_count(cfg: AdapterConfig) -> int:
    """Closed-form trainable parameter count (used by freeze accounting)."""
    first = (cfg.stack_factor * cfg.in_dim + 1) * cfg.hidden_dim
    second = (cfg.hidden_dim + 1) * cfg.out_dim
    return first + second


def adapted_length(encoder_frames: int, stack_factor: int) -> int:
    if encoder_frames < 1 or stack_factor < 1:
        raise InvalidInputError(
            f"need positive frames and stack factor, got ({encoder_frames}, {stack_factor})")
    return -(-encoder_frames // stack_factor)


class Adapter(nn.Module):
    def __init__(self, cfg: AdapterConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.fc1 = nn.Linear(cfg.stack_factor * cfg.in_dim, cfg.hidden_dim)
        self.fc2 = nn.Linear(cfg.hidden_dim, cfg.out_dim)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, T', in_dim) -> (B, S, out_dim) with S = ceil(valid / k) per row."""
        if x.shape[-1] != self.cfg.in_dim:
            raise InvalidInputError(f"adapter expects dim {self.cfg.in_dim}, got {x.shape[-1]}")
        b, t, d = x.shape
        k = self.cfg.stack_factor
        # Frames past each row's valid length must not influence its output.
        ar = torch.arange(t, device=x.device)
        x = x * (ar[None, :, None] < lengths[:, None, None]).to(x.dtype)
        pad = (-t) % k
        if pad:
            x = F.pad(x, (0, 0, 0, pad))
        stacked = x.reshape(b, (t + pad) // k, k * d)
        out = self.fc2(F.silu(self.fc1(stacked)))
        out_lengths = -(-lengths // k)
        return out, out_lengths


def adapt(enc: EncoderOutput, adapter: Adapter) -> tuple[torch.Tensor, int]:
    """Single-utterance convenience wrapper returning (S x out_dim, S)."""
    x = enc.embeddings[None]
    lengths = torch.tensor([enc.length], device=x.device)
    out, out_lengths = adapter(x, lengths)
    s = int(out_lengths[0])
    return out[0, :s], s
