"""Staged fine-tuning orchestration.

Three stages with a fixed freeze plan per component:

  sft1          encoder frozen,  adapter full,  decoder frozen
  sft2          encoder full,    adapter full,  decoder via LoRA
  context_sft   encoder full,    adapter full,  decoder via LoRA

Stage prerequisites are enforced through the bundle's recorded provenance
(sft1 needs the exported AED encoder, sft2 needs sft1, context_sft needs
sft2). Anything outside the stage's trainable set keeps requires_grad=False
and stays out of the optimizer, so frozen parameters are bit-identical across
the whole run, not just approximately unchanged.

Because the stand-in decoder starts from scratch rather than from a
pretrained LLM, the bundle-assembly step optionally pre-trains it as a plain
text LM on the corpus transcripts; freezing it in sft1 is only meaningful if
it already has a usable semantic space for the adapter to align to.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .bundle import STAGE_AED_EXPORT, STAGE_LM_PRETRAIN, ModelBundle, save_bundle
from .contextforge import DEFAULT_INSTRUCTION, render_prompt
from .corpus import Manifest, Utterance
from .decoder import AssembledInput, assemble_input, sft_loss
from .errors import InvalidConfigError, InvalidInputError, MissingPrerequisiteError
from .lora import LoraSpec, has_lora, inject_lora
from .nnutil import check_finite_loss, seed_all, set_lr, warmup_lr

STAGE_SFT1 = "sft1"
STAGE_SFT2 = "sft2"
STAGE_CONTEXT = "context_sft"

FROZEN = "frozen"
FULL = "full"
LORA = "lora"

#: Per-stage (encoder, adapter, decoder) modes; the freeze plan is not configurable.
STAGE_MODES = {
    STAGE_SFT1: (FROZEN, FULL, FROZEN),
    STAGE_SFT2: (FULL, FULL, LORA),
    STAGE_CONTEXT: (FULL, FULL, LORA),
}

_PREREQUISITES = {
    STAGE_SFT1: (STAGE_AED_EXPORT, "train-aed"),
    STAGE_SFT2: (STAGE_SFT1, "train-sft --stage 1"),
    STAGE_CONTEXT: (STAGE_SFT2, "train-sft --stage 2"),
}


@dataclass(frozen=True)
class StagePlan:
    stage: str
    steps: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    warmup_steps: int = 20
    grad_clip: float = 1.0
    lora: LoraSpec | None = None
    plain_fraction: float = 0.5
    instruction: str = DEFAULT_INSTRUCTION
    checkpoint_every: int = 0
    loss_log_filename: str = "loss.log"

    def __post_init__(self) -> None:
        if self.stage not in STAGE_MODES:
            raise InvalidInputError(
                f"unknown stage {self.stage!r}; known stages: {sorted(STAGE_MODES)}")
        if self.steps < 0 or self.batch_size < 1:
            raise InvalidConfigError("steps must be >= 0 and batch_size >= 1")
        if not (0.0 <= self.plain_fraction <= 1.0):
            raise InvalidConfigError("plain_fraction must lie in [0, 1]")
        if self.decoder_mode == LORA and self.lora is None:
            object.__setattr__(self, "lora", LoraSpec())

    @property
    def encoder_mode(self) -> str:
        return STAGE_MODES[self.stage][0]

    @property
    def adapter_mode(self) -> str:
        return STAGE_MODES[self.stage][1]

    @property
    def decoder_mode(self) -> str:
        return STAGE_MODES[self.stage][2]


@dataclass
class TrainRun:
    stage: str
    seed: int
    steps_executed: int
    plan: StagePlan | None = None
    loss_log: list[float] = field(default_factory=list)
    initial_checkpoint: Path | None = None
    final_checkpoint: Path | None = None


def trainable_set(plan: StagePlan, bundle: ModelBundle) -> dict[str, torch.nn.Parameter]:
    """Exactly the parameters the stage trains, keyed by prefixed name."""
    selected: dict[str, torch.nn.Parameter] = {}
    for name, param in bundle.named_parameters():
        component = name.split("/", 1)[0]
        mode = {"encoder": plan.encoder_mode, "adapter": plan.adapter_mode,
                "decoder": plan.decoder_mode}[component]
        if mode == FULL:
            selected[name] = param
        elif mode == LORA and "lora_" in name:
            selected[name] = param
    return selected


def _require_stage(bundle: ModelBundle, stage: str) -> None:
    required, upstream = _PREREQUISITES[stage]
    if required not in bundle.completed_stages:
        raise MissingPrerequisiteError(
            f"stage {stage!r} requires a bundle that completed {required!r}, "
            f"have {bundle.completed_stages}", upstream_command=upstream)


def encode_and_adapt(bundle: ModelBundle, utterances: list[Utterance]) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched encoder+adapter forward: (B, S, embed_dim) and per-row lengths."""
    t_max = max(u.features.num_frames for u in utterances)
    bins = utterances[0].features.num_bins
    dtype = next(bundle.encoder.parameters()).dtype
    feats = torch.zeros(len(utterances), t_max, bins, dtype=dtype)
    lengths = torch.zeros(len(utterances), dtype=torch.long)
    for i, u in enumerate(utterances):
        feats[i, :u.features.num_frames] = torch.from_numpy(u.features.frames).to(dtype)
        lengths[i] = u.features.num_frames
    enc, enc_lengths = bundle.encoder(feats, lengths)
    return bundle.adapter(enc, enc_lengths)


def assemble_batch(bundle: ModelBundle, utterances: list[Utterance],
                   instruction: str, *, use_context: bool = True) -> list[AssembledInput]:
    audio, audio_lengths = encode_and_adapt(bundle, utterances)
    tok = bundle.tokenizer
    assembled = []
    for i, u in enumerate(utterances):
        prompt = render_prompt(instruction, u.context if use_context else None)
        targets = tok.encode(u.transcript) + [tok.eos_id]
        assembled.append(assemble_input(
            bundle.decoder, tok.encode(prompt), audio[i, :int(audio_lengths[i])],
            targets, bos_id=tok.bos_id, pad_id=tok.pad_id))
    return assembled


def sft_forward_loss(bundle: ModelBundle, utterances: list[Utterance],
                     instruction: str = DEFAULT_INSTRUCTION) -> torch.Tensor:
    """Full differentiable path: encoder -> adapter -> spliced decoder loss."""
    return sft_loss(bundle.decoder, assemble_batch(bundle, utterances, instruction))


def _write_loss_log(path: Path, losses: list[float]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for step, loss in enumerate(losses):
            f.write(f"{step}\t{loss!r}\n")


def run_stage(plan: StagePlan, bundle: ModelBundle, manifest: Manifest, seed: int,
              run_dir: Path | None = None) -> TrainRun:
    """Execute one stage in place; only the stage's trainable set may change."""
    _require_stage(bundle, plan.stage)
    if len(manifest) == 0:
        raise InvalidInputError(f"stage {plan.stage} received an empty manifest")
    seed_all(seed)
    if plan.decoder_mode == LORA and not has_lora(bundle.decoder):
        inject_lora(bundle.decoder, plan.lora)

    trainable = trainable_set(plan, bundle)
    for name, param in bundle.named_parameters():
        param.requires_grad_(name in trainable)

    run = TrainRun(stage=plan.stage, seed=seed, steps_executed=0, plan=plan)
    if run_dir is not None:
        run_dir = Path(run_dir)
        run.initial_checkpoint = save_bundle(run_dir / "bundle_initial.ckpt", bundle)

    if plan.steps > 0:
        optimizer = torch.optim.Adam(trainable.values(), lr=plan.learning_rate)
        rng = np.random.default_rng(seed)
        entries = manifest.entries
        for module in bundle.modules().values():
            module.train()
        cursor = len(entries)
        order = np.arange(len(entries))
        for step in range(plan.steps):
            if cursor + plan.batch_size > len(entries):
                order = rng.permutation(len(entries))
                cursor = 0
            idx = order[cursor:cursor + min(plan.batch_size, len(entries))]
            cursor += plan.batch_size
            batch = [entries[int(i)] for i in idx]
            set_lr(optimizer, warmup_lr(plan.learning_rate, step, plan.warmup_steps))
            optimizer.zero_grad()
            loss = sft_forward_loss(bundle, batch, plan.instruction)
            loss.backward()
            if plan.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(trainable.values(), plan.grad_clip)
            optimizer.step()
            run.loss_log.append(check_finite_loss(loss, step, plan.stage))
            run.steps_executed += 1
            if (run_dir is not None and plan.checkpoint_every > 0
                    and (step + 1) % plan.checkpoint_every == 0
                    and step + 1 < plan.steps):
                save_bundle(run_dir / f"bundle_step{step + 1:06d}.ckpt", bundle)
        for module in bundle.modules().values():
            module.eval()

    if plan.stage not in bundle.completed_stages:
        bundle.completed_stages.append(plan.stage)
    if run_dir is not None:
        run.final_checkpoint = save_bundle(run_dir / "bundle_final.ckpt", bundle)
        _write_loss_log(run_dir / plan.loss_log_filename, run.loss_log)
    return run


def pretrain_text_lm(bundle: ModelBundle, manifest: Manifest, steps: int, seed: int,
                     *, batch_size: int = 32, learning_rate: float = 2e-3,
                     warmup_steps: int = 20, grad_clip: float = 1.0) -> list[float]:
    """Next-token pretraining of the decoder on bare transcripts.

    Gives the stand-in LLM a working embedding space before it gets frozen in
    sft1, mirroring the role a pretrained backbone plays at full scale.
    """
    if steps < 0:
        raise InvalidConfigError("steps must be >= 0")
    if steps == 0:
        return []
    seed_all(seed)
    tok = bundle.tokenizer
    decoder = bundle.decoder
    no_audio = torch.zeros(0, bundle.decoder_cfg.embed_dim)
    optimizer = torch.optim.Adam(decoder.parameters(), lr=learning_rate)
    rng = np.random.default_rng(seed)
    entries = [u for u in manifest.entries if u.transcript.strip()]
    if not entries:
        raise InvalidInputError("no non-empty transcripts to pretrain on")
    decoder.train()
    losses: list[float] = []
    cursor = len(entries)
    order = np.arange(len(entries))
    for step in range(steps):
        if cursor + batch_size > len(entries):
            order = rng.permutation(len(entries))
            cursor = 0
        idx = order[cursor:cursor + min(batch_size, len(entries))]
        cursor += batch_size
        assembled = []
        for i in idx:
            targets = tok.encode(entries[int(i)].transcript) + [tok.eos_id]
            assembled.append(assemble_input(decoder, [], no_audio, targets,
                                            bos_id=tok.bos_id, pad_id=tok.pad_id))
        set_lr(optimizer, warmup_lr(learning_rate, step, warmup_steps))
        optimizer.zero_grad()
        loss = sft_loss(decoder, assembled)
        loss.backward()
        if grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(decoder.parameters(), grad_clip)
        optimizer.step()
        losses.append(check_finite_loss(loss, step, "lm-pretrain"))
    decoder.eval()
    if STAGE_LM_PRETRAIN not in bundle.completed_stages:
        bundle.completed_stages.append(STAGE_LM_PRETRAIN)
    return losses


def mix_datasets(context_manifest: Manifest, plain_manifest: Manifest,
                 plain_fraction: float, seed: int) -> Manifest:
    """Interleave context and plain samples at the requested plain fraction.

    Output size equals the context manifest's (or the plain one's if no
    context entries exist). Plain entries whose ids collide with kept context
    entries get a ``::plain`` suffix so the mixed manifest stays well-formed.
    """
    if not (0.0 <= plain_fraction <= 1.0):
        raise InvalidInputError(f"plain_fraction must lie in [0, 1], got {plain_fraction}")
    if len(context_manifest) == 0 and len(plain_manifest) == 0:
        raise InvalidInputError("both manifests are empty; nothing to mix")
    rng = np.random.default_rng(seed)
    n = len(context_manifest) or len(plain_manifest)
    n_plain = int(round(plain_fraction * n))
    n_plain = min(n_plain, n) if len(context_manifest) else n
    n_ctx = n - n_plain if len(context_manifest) else 0

    ctx_pool = context_manifest.entries
    picked_ctx = [ctx_pool[int(i)] for i in rng.permutation(len(ctx_pool))[:n_ctx]] if n_ctx else []
    picked_plain: list[Utterance] = []
    if n_plain:
        if len(plain_manifest) == 0:
            raise InvalidInputError("plain_fraction > 0 but the plain manifest is empty")
        shuffled = [plain_manifest.entries[int(i)]
                    for i in rng.permutation(len(plain_manifest))]
        while len(picked_plain) < n_plain:
            picked_plain.extend(shuffled[:n_plain - len(picked_plain)])
    ctx_ids = {u.id for u in picked_ctx}
    renamed: list[Utterance] = []
    seen: set[str] = set(ctx_ids)
    for u in picked_plain:
        new_id = u.id
        while new_id in seen:
            new_id = f"{new_id}::plain"
        seen.add(new_id)
        renamed.append(Utterance(id=new_id, features=u.features, transcript=u.transcript,
                                 group_id=u.group_id, context=None, snr_db=u.snr_db))
    combined = picked_ctx + renamed
    order = rng.permutation(len(combined))
    return Manifest(entries=[combined[int(i)] for i in order])
