"""Conformer-style acoustic encoder and the AED model that pre-trains it.

The encoder is trained inside a small attention encoder-decoder (Conformer
encoder, Transformer decoder) on the toy corpus; afterwards the encoder
parameters are exported to initialize the prompted-decoder system.

Padding discipline: padded frames are kept at exactly zero before every
convolution and masked out of attention, so batched encoding matches
per-utterance encoding on the valid rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import FeatureMatrix, Manifest
from .errors import CheckpointError, InvalidConfigError, InvalidInputError
from .nnutil import check_finite_loss, lengths_to_mask, seed_all, set_lr, warmup_lr
from .tokenizer import Tokenizer


def subsampled_length(num_frames: int, factor: int) -> int:
    """Frames remaining after striding: ceil(T / factor), right-padded."""
    if num_frames < 1 or factor < 1:
        raise InvalidInputError(f"need positive frames and factor, got ({num_frames}, {factor})")
    return -(-num_frames // factor)


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    model_dim: int = 64
    heads: int = 4
    conv_kernel: int = 7
    subsample_factor: int = 4
    ffn_expansion: int = 4
    input_bins: int = 40
    rel_pos_max_distance: int = 16

    def __post_init__(self) -> None:
        if self.model_dim % self.heads != 0:
            raise InvalidConfigError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.conv_kernel % 2 == 0 or self.conv_kernel < 1:
            raise InvalidConfigError(f"conv_kernel must be odd and positive, got {self.conv_kernel}")
        if self.subsample_factor < 1 or (self.subsample_factor & (self.subsample_factor - 1)) != 0:
            raise InvalidConfigError(
                f"subsample_factor must be a power of two >= 1, got {self.subsample_factor}")
        if min(self.layers, self.ffn_expansion, self.input_bins) < 1:
            raise InvalidConfigError("layers, ffn_expansion and input_bins must be positive")


@dataclass
class EncoderOutput:
    embeddings: torch.Tensor  # (T', model_dim)
    length: int

    def __post_init__(self) -> None:
        if self.embeddings.dim() != 2 or self.embeddings.shape[0] != self.length:
            raise InvalidInputError("encoder output shape inconsistent with its length")
        if not torch.isfinite(self.embeddings).all():
            raise InvalidInputError("encoder output contains non-finite values")


def _apply_mask(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return x * mask[:, :, None].to(x.dtype)


class ConvSubsampler(nn.Module):
    """Input projection followed by stride-2 convolutions (log2(factor) stages)."""

    def __init__(self, cfg: EncoderConfig) -> None:
        super().__init__()
        self.proj = nn.Linear(cfg.input_bins, cfg.model_dim)
        stages = int(math.log2(cfg.subsample_factor))
        self.convs = nn.ModuleList(
            nn.Conv1d(cfg.model_dim, cfg.model_dim, kernel_size=3, stride=2)
            for _ in range(stages)
        )

    def forward(self, feats: torch.Tensor, lengths: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = self.proj(feats)
        x = _apply_mask(x, lengths_to_mask(lengths, x.shape[1]))
        for conv in self.convs:
            t = x.shape[1]
            out_t = -(-t // 2)
            pad = 2 * out_t - 2 + 3 - t  # right pad so output length is ceil(t/2)
            x = x.transpose(1, 2)
            x = F.pad(x, (0, pad))
            x = F.gelu(conv(x))
            x = x.transpose(1, 2)
            lengths = -(-lengths // 2)
            x = _apply_mask(x, lengths_to_mask(lengths, x.shape[1]))
        return x, lengths


class RelPosSelfAttention(nn.Module):
    """Multi-head self-attention with a clipped relative-position bias per head."""

    def __init__(self, cfg: EncoderConfig) -> None:
        super().__init__()
        self.heads = cfg.heads
        self.head_dim = cfg.model_dim // cfg.heads
        self.max_dist = cfg.rel_pos_max_distance
        self.q_proj = nn.Linear(cfg.model_dim, cfg.model_dim)
        self.k_proj = nn.Linear(cfg.model_dim, cfg.model_dim)
        self.v_proj = nn.Linear(cfg.model_dim, cfg.model_dim)
        self.o_proj = nn.Linear(cfg.model_dim, cfg.model_dim)
        self.rel_bias = nn.Parameter(torch.zeros(cfg.heads, 2 * self.max_dist + 1))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        q = self.q_proj(x).view(b, t, self.heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(x).view(b, t, self.heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(x).view(b, t, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        pos = torch.arange(t, device=x.device)
        rel = (pos[None, :] - pos[:, None]).clamp(-self.max_dist, self.max_dist) + self.max_dist
        scores = scores + self.rel_bias[:, rel]
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.o_proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, expansion: int) -> None:
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * expansion)
        self.fc2 = nn.Linear(dim * expansion, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.silu(self.fc1(x)))


class ConvModule(nn.Module):
    """Pointwise GLU, depthwise conv, norm, swish, pointwise projection."""

    def __init__(self, cfg: EncoderConfig) -> None:
        super().__init__()
        d = cfg.model_dim
        self.norm = nn.LayerNorm(d)
        self.pointwise1 = nn.Conv1d(d, 2 * d, kernel_size=1)
        self.depthwise = nn.Conv1d(d, d, kernel_size=cfg.conv_kernel,
                                   padding=cfg.conv_kernel // 2, groups=d)
        self.channel_norm = nn.LayerNorm(d)
        self.pointwise2 = nn.Conv1d(d, d, kernel_size=1)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = self.norm(x)
        x = x.transpose(1, 2)
        x = F.glu(self.pointwise1(x), dim=1)
        # Zero padded columns so depthwise windows match unbatched zero padding.
        x = x * mask[:, None, :].to(x.dtype)
        x = self.depthwise(x)
        x = F.silu(self.channel_norm(x.transpose(1, 2)).transpose(1, 2))
        x = self.pointwise2(x)
        return x.transpose(1, 2)


class ConformerBlock(nn.Module):
    def __init__(self, cfg: EncoderConfig) -> None:
        super().__init__()
        self.ffn1_norm = nn.LayerNorm(cfg.model_dim)
        self.ffn1 = FeedForward(cfg.model_dim, cfg.ffn_expansion)
        self.attn_norm = nn.LayerNorm(cfg.model_dim)
        self.attn = RelPosSelfAttention(cfg)
        self.conv = ConvModule(cfg)
        self.ffn2_norm = nn.LayerNorm(cfg.model_dim)
        self.ffn2 = FeedForward(cfg.model_dim, cfg.ffn_expansion)
        self.final_norm = nn.LayerNorm(cfg.model_dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = x + 0.5 * self.ffn1(self.ffn1_norm(x))
        x = _apply_mask(x, mask)
        x = x + self.attn(self.attn_norm(x), mask)
        x = _apply_mask(x, mask)
        x = x + self.conv(x, mask)
        x = x + 0.5 * self.ffn2(self.ffn2_norm(x))
        x = self.final_norm(x)
        return _apply_mask(x, mask)


class ConformerEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.subsampler = ConvSubsampler(cfg)
        self.blocks = nn.ModuleList(ConformerBlock(cfg) for _ in range(cfg.layers))

    def forward(self, feats: torch.Tensor, lengths: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if feats.shape[-1] != self.cfg.input_bins:
            raise InvalidInputError(
                f"feature dim {feats.shape[-1]} != configured input_bins {self.cfg.input_bins}")
        x, out_lengths = self.subsampler(feats, lengths)
        mask = lengths_to_mask(out_lengths, x.shape[1])
        for block in self.blocks:
            x = block(x, mask)
        return x, out_lengths

    @torch.no_grad()
    def encode(self, features: FeatureMatrix) -> EncoderOutput:
        """Single-utterance inference-mode encoding."""
        self.eval()
        dtype = next(self.parameters()).dtype
        feats = torch.from_numpy(np.ascontiguousarray(features.frames)).to(dtype)[None]
        lengths = torch.tensor([features.num_frames])
        emb, out_lengths = self.forward(feats, lengths)
        n = int(out_lengths[0])
        return EncoderOutput(embeddings=emb[0, :n].clone(), length=n)


def _sinusoidal_positions(max_len: int, dim: int, dtype: torch.dtype) -> torch.Tensor:
    position = torch.arange(max_len, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(max_len, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div)
    return pe.to(dtype)


class AedDecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, expansion: int) -> None:
        super().__init__()
        self.self_norm = nn.LayerNorm(dim)
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.cross_norm = nn.LayerNorm(dim)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ffn_norm = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, expansion)

    def forward(self, x: torch.Tensor, memory: torch.Tensor,
                causal_mask: torch.Tensor, memory_padding: torch.Tensor) -> torch.Tensor:
        h = self.self_norm(x)
        x = x + self.self_attn(h, h, h, attn_mask=causal_mask, need_weights=False)[0]
        h = self.cross_norm(x)
        x = x + self.cross_attn(h, memory, memory, key_padding_mask=memory_padding,
                                need_weights=False)[0]
        x = x + self.ffn(self.ffn_norm(x))
        return x


class AedModel(nn.Module):
    """Conformer encoder + Transformer decoder for encoder pre-training."""

    MAX_TARGET_LEN = 512

    def __init__(self, encoder_cfg: EncoderConfig, vocab_size: int, decoder_layers: int = 2) -> None:
        super().__init__()
        self.encoder_cfg = encoder_cfg
        self.vocab_size = vocab_size
        self.encoder = ConformerEncoder(encoder_cfg)
        d = encoder_cfg.model_dim
        self.token_embedding = nn.Embedding(vocab_size, d)
        self.decoder_layers = nn.ModuleList(
            AedDecoderLayer(d, encoder_cfg.heads, encoder_cfg.ffn_expansion)
            for _ in range(decoder_layers)
        )
        self.out_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, vocab_size)

    def forward(self, feats: torch.Tensor, feat_lengths: torch.Tensor,
                decoder_input: torch.Tensor) -> torch.Tensor:
        memory, mem_lengths = self.encoder(feats, feat_lengths)
        mem_padding = ~lengths_to_mask(mem_lengths, memory.shape[1])
        u = decoder_input.shape[1]
        if u > self.MAX_TARGET_LEN:
            raise InvalidInputError(f"target length {u} exceeds {self.MAX_TARGET_LEN}")
        pos = _sinusoidal_positions(u, memory.shape[-1], memory.dtype).to(memory.device)
        x = self.token_embedding(decoder_input) + pos[None]
        causal = torch.full((u, u), float("-inf"), device=x.device, dtype=x.dtype).triu(1)
        for layer in self.decoder_layers:
            x = layer(x, memory, causal, mem_padding)
        return self.head(self.out_norm(x))


@dataclass
class AedBatch:
    features: torch.Tensor        # (B, T, F)
    feature_lengths: torch.Tensor
    decoder_input: torch.Tensor   # (B, U) starts with bos
    labels: torch.Tensor          # (B, U) ends with eos
    label_mask: torch.Tensor      # (B, U) bool, True on real label positions


def collate_aed_batch(utterances, tokenizer: Tokenizer, dtype: torch.dtype = torch.float32) -> AedBatch:
    targets = [tokenizer.encode(u.transcript) for u in utterances]
    if any(len(t) == 0 for t in targets):
        raise InvalidInputError("empty target transcript in AED batch")
    t_max = max(u.features.num_frames for u in utterances)
    u_max = max(len(t) for t in targets) + 1
    b = len(utterances)
    f = utterances[0].features.num_bins
    feats = torch.zeros(b, t_max, f, dtype=dtype)
    feat_lengths = torch.zeros(b, dtype=torch.long)
    dec_in = torch.full((b, u_max), tokenizer.pad_id, dtype=torch.long)
    labels = torch.full((b, u_max), tokenizer.pad_id, dtype=torch.long)
    label_mask = torch.zeros(b, u_max, dtype=torch.bool)
    for i, (utt, tgt) in enumerate(zip(utterances, targets)):
        n = utt.features.num_frames
        feats[i, :n] = torch.from_numpy(utt.features.frames).to(dtype)
        feat_lengths[i] = n
        seq = torch.tensor(tgt, dtype=torch.long)
        dec_in[i, 0] = tokenizer.bos_id
        dec_in[i, 1:len(tgt) + 1] = seq
        labels[i, :len(tgt)] = seq
        labels[i, len(tgt)] = tokenizer.eos_id
        label_mask[i, :len(tgt) + 1] = True
    return AedBatch(feats, feat_lengths, dec_in, labels, label_mask)


def aed_loss(model: AedModel, batch: AedBatch) -> torch.Tensor:
    """Mean token cross-entropy over non-padding target positions."""
    if not bool(batch.label_mask.any()):
        raise InvalidInputError("AED batch has no target positions")
    logits = model(batch.features, batch.feature_lengths, batch.decoder_input)
    flat = logits.reshape(-1, logits.shape[-1])[batch.label_mask.reshape(-1)]
    gold = batch.labels.reshape(-1)[batch.label_mask.reshape(-1)]
    return F.cross_entropy(flat, gold)


@dataclass(frozen=True)
class TrainSchedule:
    steps: int = 400
    batch_size: int = 32
    learning_rate: float = 2e-3
    warmup_steps: int = 40
    holdout_fraction: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0


@dataclass
class AedTrainResult:
    model: AedModel
    loss_log: list[float] = field(default_factory=list)
    holdout_loss: float = 0.0
    holdout_accuracy: float = 0.0


def _holdout_metrics(model: AedModel, utterances, tokenizer: Tokenizer,
                     batch_size: int) -> tuple[float, float]:
    model.eval()
    total_loss = 0.0
    total = correct = 0
    with torch.no_grad():
        for i in range(0, len(utterances), batch_size):
            batch = collate_aed_batch(utterances[i:i + batch_size], tokenizer)
            logits = model(batch.features, batch.feature_lengths, batch.decoder_input)
            mask = batch.label_mask
            flat = logits[mask]
            gold = batch.labels[mask]
            total_loss += float(F.cross_entropy(flat, gold, reduction="sum"))
            correct += int((flat.argmax(-1) == gold).sum())
            total += int(mask.sum())
    model.train()
    return total_loss / max(total, 1), correct / max(total, 1)


def train_aed(manifest: Manifest, cfg: EncoderConfig, schedule: TrainSchedule,
              tokenizer: Tokenizer, decoder_layers: int = 2) -> AedTrainResult:
    """Train the AED model on a toy manifest; deterministic given the seed."""
    if len(manifest) < 2:
        raise InvalidInputError("AED training needs at least two utterances")
    seed_all(schedule.seed)
    model = AedModel(cfg, tokenizer.vocab_size, decoder_layers=decoder_layers)
    rng = np.random.default_rng(schedule.seed)
    order = rng.permutation(len(manifest))
    holdout_n = max(1, int(len(manifest) * schedule.holdout_fraction))
    holdout = [manifest.entries[int(i)] for i in order[:holdout_n]]
    train = [manifest.entries[int(i)] for i in order[holdout_n:]] or holdout

    result = AedTrainResult(model=model)
    if schedule.steps == 0:
        result.holdout_loss, result.holdout_accuracy = _holdout_metrics(
            model, holdout, tokenizer, schedule.batch_size)
        return result

    optimizer = torch.optim.Adam(model.parameters(), lr=schedule.learning_rate)
    model.train()
    cursor = len(train)
    epoch_order = np.arange(len(train))
    for step in range(schedule.steps):
        if cursor + schedule.batch_size > len(train):
            epoch_order = rng.permutation(len(train))
            cursor = 0
        idx = epoch_order[cursor:cursor + schedule.batch_size]
        cursor += schedule.batch_size
        batch = collate_aed_batch([train[int(i)] for i in idx], tokenizer)
        set_lr(optimizer, warmup_lr(schedule.learning_rate, step, schedule.warmup_steps))
        optimizer.zero_grad()
        loss = aed_loss(model, batch)
        loss.backward()
        if schedule.grad_clip > 0:
            nn.utils.clip_grad_norm_(model.parameters(), schedule.grad_clip)
        optimizer.step()
        result.loss_log.append(check_finite_loss(loss, step, "train-aed"))
    result.holdout_loss, result.holdout_accuracy = _holdout_metrics(
        model, holdout, tokenizer, schedule.batch_size)
    return result


@dataclass
class EncoderExport:
    """Encoder parameters exported from a trained AED model."""

    config: EncoderConfig
    state: dict[str, np.ndarray]


def export_encoder(aed: AedModel) -> EncoderExport:
    """Copy out the encoder parameter set; decoder parameters are dropped."""
    state = {name: tensor.detach().cpu().numpy().astype(np.float32, copy=True)
             for name, tensor in aed.encoder.state_dict().items()}
    return EncoderExport(config=aed.encoder_cfg, state=state)


def load_encoder_from_export(export: EncoderExport) -> ConformerEncoder:
    """Rebuild an encoder from an export; shape mismatches are rejected."""
    encoder = ConformerEncoder(export.config)
    expected = encoder.state_dict()
    if set(expected) != set(export.state):
        missing = sorted(set(expected) ^ set(export.state))
        raise CheckpointError(f"encoder export parameter names mismatch: {missing[:5]}")
    for name, ref in expected.items():
        arr = export.state[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(
                f"encoder export shape mismatch at {name}: {arr.shape} vs {tuple(ref.shape)}")
    encoder.load_state_dict({k: torch.from_numpy(v) for k, v in export.state.items()})
    return encoder
