"""Tiny autoregressive text decoder with spliced audio embeddings.

Stands in for a large pretrained LLM: prompt tokens and adapted audio frames
enter one embedding sequence ([prompt] + [audio] + [begin] + [targets]) and
the decoder predicts transcription tokens autoregressively. Rotary position
encoding and a tied embedding/output head keep the model small and make
prompt-copying behaviour learnable at toy scale.

Generation is greedy with a repetition guard: once the same n-gram has been
emitted m times in a row the output is truncated and flagged rather than left
to loop.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidConfigError, InvalidInputError


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 2
    embed_dim: int = 64
    heads: int = 4
    ffn_expansion: int = 4
    max_sequence: int = 160

    def __post_init__(self) -> None:
        if self.embed_dim % self.heads != 0:
            raise InvalidConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if (self.embed_dim // self.heads) % 2 != 0:
            raise InvalidConfigError("head dimension must be even for rotary positions")
        if min(self.layers, self.ffn_expansion, self.max_sequence) < 1:
            raise InvalidConfigError("layers, ffn_expansion and max_sequence must be positive")


def _rope_tables(seq_len: int, head_dim: int, dtype: torch.dtype,
                 device: torch.device) -> tuple[torch.Tensor, torch.Tensor]:
    pos = torch.arange(seq_len, dtype=torch.float64, device=device)
    inv = 1.0 / (10000.0 ** (torch.arange(0, head_dim, 2, dtype=torch.float64,
                                          device=device) / head_dim))
    freqs = pos[:, None] * inv[None, :]
    return torch.cos(freqs).to(dtype), torch.sin(freqs).to(dtype)


def _apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x: (B, H, T, Dh); cos/sin: (T, Dh/2)
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    even = x1 * cos - x2 * sin
    odd = x1 * sin + x2 * cos
    return torch.stack((even, odd), dim=-1).flatten(-2)


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: DecoderConfig) -> None:
        super().__init__()
        self.heads = cfg.heads
        self.head_dim = cfg.embed_dim // cfg.heads
        self.q_proj = nn.Linear(cfg.embed_dim, cfg.embed_dim, bias=False)
        self.k_proj = nn.Linear(cfg.embed_dim, cfg.embed_dim, bias=False)
        self.v_proj = nn.Linear(cfg.embed_dim, cfg.embed_dim, bias=False)
        self.o_proj = nn.Linear(cfg.embed_dim, cfg.embed_dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        q = self.q_proj(x).view(b, t, self.heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(x).view(b, t, self.heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(x).view(b, t, self.heads, self.head_dim).transpose(1, 2)
        cos, sin = _rope_tables(t, self.head_dim, x.dtype, x.device)
        q = _apply_rope(q, cos, sin)
        k = _apply_rope(k, cos, sin)
        scores = q @ k.transpose(-2, -1) / self.head_dim ** 0.5
        causal = torch.full((t, t), float("-inf"), device=x.device, dtype=x.dtype).triu(1)
        attn = torch.softmax(scores + causal, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.o_proj(out)


class DecoderBlock(nn.Module):
    def __init__(self, cfg: DecoderConfig) -> None:
        super().__init__()
        self.attn_norm = nn.LayerNorm(cfg.embed_dim)
        self.attn = CausalSelfAttention(cfg)
        self.mlp_norm = nn.LayerNorm(cfg.embed_dim)
        self.fc_in = nn.Linear(cfg.embed_dim, cfg.embed_dim * cfg.ffn_expansion)
        self.fc_out = nn.Linear(cfg.embed_dim * cfg.ffn_expansion, cfg.embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.attn_norm(x))
        x = x + self.fc_out(F.silu(self.fc_in(self.mlp_norm(x))))
        return x


class TextDecoder(nn.Module):
    """Decoder-only transformer over embedding sequences; tied output head."""

    def __init__(self, cfg: DecoderConfig, vocab_size: int) -> None:
        super().__init__()
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.token_embedding = nn.Embedding(vocab_size, cfg.embed_dim)
        # Tied embedding/head wants the usual small init or logits explode.
        nn.init.normal_(self.token_embedding.weight, std=0.02)
        self.blocks = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.layers))
        self.final_norm = nn.LayerNorm(cfg.embed_dim)
        self.lora_spec = None  # set by inject_lora

    def embed_tokens(self, ids: Sequence[int]) -> torch.Tensor:
        device = self.token_embedding.weight.device
        idx = torch.as_tensor(list(ids), dtype=torch.long, device=device)
        return self.token_embedding(idx)

    def forward_embeddings(self, x: torch.Tensor) -> torch.Tensor:
        """(B, L, D) embeddings -> (B, L, V) logits."""
        if x.shape[1] > self.cfg.max_sequence:
            raise InvalidInputError(
                f"sequence length {x.shape[1]} exceeds max_sequence {self.cfg.max_sequence}")
        for block in self.blocks:
            x = block(x)
        x = self.final_norm(x)
        return x @ self.token_embedding.weight.t()


@dataclass
class AssembledInput:
    """Spliced decoder input plus the positions whose predictions are scored."""

    embeddings: torch.Tensor  # (L, D)
    loss_mask: torch.Tensor   # (L,) bool; True exactly on target-prediction positions
    labels: torch.Tensor      # (L,) long; meaningful only where loss_mask is True
    prompt_len: int
    audio_len: int
    target_len: int

    @property
    def length(self) -> int:
        return int(self.embeddings.shape[0])


def assemble_input(decoder: TextDecoder,
                   prompt_tokens: Sequence[int],
                   audio_embeds: torch.Tensor,
                   target_tokens: Sequence[int] | None = None,
                   *,
                   bos_id: int = 1,
                   pad_id: int = 0) -> AssembledInput:
    """Build [prompt] + [audio] + [begin] (+ [targets]) with its loss mask.

    Position i predicts the token at i+1, so the masked-in positions run from
    the begin token through the next-to-last target: exactly len(targets)
    ones, never covering prompt or audio positions. Callers wanting the model
    to learn termination append the end token to ``target_tokens``.
    """
    if audio_embeds.dim() != 2 or audio_embeds.shape[1] != decoder.cfg.embed_dim:
        raise InvalidInputError(
            f"audio embeddings must be (A, {decoder.cfg.embed_dim}), got {tuple(audio_embeds.shape)}")
    targets = list(target_tokens) if target_tokens is not None else []
    p, a, t = len(prompt_tokens), audio_embeds.shape[0], len(targets)
    total = p + a + 1 + t
    if total > decoder.cfg.max_sequence:
        raise InvalidInputError(
            f"assembled length {total} (prompt {p} + audio {a} + 1 + targets {t}) "
            f"exceeds max_sequence {decoder.cfg.max_sequence}")
    parts = []
    if p:
        parts.append(decoder.embed_tokens(prompt_tokens))
    parts.append(audio_embeds.to(decoder.token_embedding.weight.dtype))
    parts.append(decoder.embed_tokens([bos_id] + targets))
    embeddings = torch.cat(parts, dim=0)
    loss_mask = torch.zeros(total, dtype=torch.bool)
    labels = torch.full((total,), pad_id, dtype=torch.long)
    if t:
        loss_mask[p + a:p + a + t] = True
        labels[p + a:p + a + t] = torch.as_tensor(targets, dtype=torch.long)
    return AssembledInput(embeddings=embeddings, loss_mask=loss_mask, labels=labels,
                          prompt_len=p, audio_len=a, target_len=t)


def sft_loss(decoder: TextDecoder, assembled: Sequence[AssembledInput]) -> torch.Tensor:
    """Mean cross-entropy over masked-in positions, pooled across the batch."""
    if not assembled:
        raise InvalidInputError("empty SFT batch")
    if not any(bool(a.loss_mask.any()) for a in assembled):
        raise InvalidInputError("SFT batch has an all-zero loss mask")
    l_max = max(a.length for a in assembled)
    dim = decoder.cfg.embed_dim
    dtype = decoder.token_embedding.weight.dtype
    device = decoder.token_embedding.weight.device
    x = torch.zeros(len(assembled), l_max, dim, dtype=dtype, device=device)
    mask = torch.zeros(len(assembled), l_max, dtype=torch.bool, device=device)
    labels = torch.zeros(len(assembled), l_max, dtype=torch.long, device=device)
    for i, a in enumerate(assembled):
        x[i, :a.length] = a.embeddings
        mask[i, :a.length] = a.loss_mask
        labels[i, :a.length] = a.labels
    logits = decoder.forward_embeddings(x)
    flat = logits.reshape(-1, logits.shape[-1])[mask.reshape(-1)]
    gold = labels.reshape(-1)[mask.reshape(-1)]
    return F.cross_entropy(flat, gold)


@dataclass(frozen=True)
class GenerationConfig:
    max_new_tokens: int = 24
    repetition_window: int = 4   # n-gram size the guard watches
    repetition_limit: int = 4    # consecutive repeats before truncation
    strategy: str = "greedy"

    def __post_init__(self) -> None:
        if self.max_new_tokens < 1 or self.repetition_window < 1 or self.repetition_limit < 2:
            raise InvalidConfigError("invalid generation config")
        if self.strategy != "greedy":
            raise InvalidConfigError(f"unsupported decoding strategy: {self.strategy}")


@dataclass
class GenerationResult:
    tokens: list[int]
    reason: str  # one of: end, length, repetition

    @property
    def flags(self) -> tuple[str, ...]:
        return (self.reason,)


def _tail_is_looping(tokens: list[int], n: int, m: int) -> bool:
    if len(tokens) < n * m:
        return False
    tail = tokens[-n * m:]
    first = tail[:n]
    return all(tail[k * n:(k + 1) * n] == first for k in range(1, m))


@torch.no_grad()
def generate(decoder: TextDecoder,
             prompt_tokens: Sequence[int],
             audio_embeds: torch.Tensor,
             gen: GenerationConfig,
             *,
             bos_id: int = 1,
             eos_id: int = 2) -> GenerationResult:
    """Greedy decoding with end-token, length, and repetition termination."""
    decoder.eval()
    assembled = assemble_input(decoder, prompt_tokens, audio_embeds, None, bos_id=bos_id)
    seq = assembled.embeddings
    tokens: list[int] = []
    reason = "length"
    for _ in range(gen.max_new_tokens):
        if seq.shape[0] + 1 > decoder.cfg.max_sequence:
            reason = "length"
            break
        logits = decoder.forward_embeddings(seq[None])[0, -1]
        next_id = int(torch.argmax(logits))
        if next_id == eos_id:
            reason = "end"
            break
        tokens.append(next_id)
        if _tail_is_looping(tokens, gen.repetition_window, gen.repetition_limit):
            reason = "repetition"
            break
        seq = torch.cat([seq, decoder.embed_tokens([next_id])], dim=0)
    return GenerationResult(tokens=tokens, reason=reason)
