from __future__ import annotations

import numpy as np
import pytest

from ctxasr.bundle import load_bundle, save_bundle
from ctxasr.corpus import ContextBundle, Manifest, Utterance
from ctxasr.errors import InvalidInputError, MissingPrerequisiteError
from ctxasr.lora import LoraSpec
from ctxasr.trainer import (STAGE_CONTEXT, STAGE_SFT1, STAGE_SFT2, StagePlan, mix_datasets,
                            pretrain_text_lm, run_stage, trainable_set)


def _plan(stage: str, steps: int = 2, **kw) -> StagePlan:
    defaults = dict(steps=steps, batch_size=8, learning_rate=1e-3, warmup_steps=1,
                    lora=LoraSpec(rank=4, alpha=8.0))
    defaults.update(kw)
    return StagePlan(stage=stage, **defaults)


def _snapshot(bundle) -> dict[str, np.ndarray]:
    return bundle.state_arrays()


# ------------------------------------------------------------ trainable sets

def test_sft1_trains_adapter_only(micro_bundle):
    names = set(trainable_set(_plan(STAGE_SFT1), micro_bundle))
    assert names
    assert all(n.startswith("adapter/") for n in names)
    all_adapter = {n for n, _ in micro_bundle.named_parameters() if n.startswith("adapter/")}
    assert names == all_adapter


def test_sft2_trains_encoder_adapter_and_lora(micro_bundle):
    from ctxasr.lora import inject_lora

    inject_lora(micro_bundle.decoder, LoraSpec(rank=4, alpha=8.0))
    names = set(trainable_set(_plan(STAGE_SFT2), micro_bundle))
    assert any(n.startswith("encoder/") for n in names)
    assert any(n.startswith("adapter/") for n in names)
    decoder_names = {n for n in names if n.startswith("decoder/")}
    assert decoder_names
    assert all("lora_" in n for n in decoder_names)


def test_context_stage_matches_sft2_pattern(micro_bundle):
    from ctxasr.lora import inject_lora

    inject_lora(micro_bundle.decoder, LoraSpec(rank=4, alpha=8.0))
    assert set(trainable_set(_plan(STAGE_CONTEXT), micro_bundle)) == \
        set(trainable_set(_plan(STAGE_SFT2), micro_bundle))


def test_unknown_stage_rejected():
    with pytest.raises(InvalidInputError, match="unknown stage"):
        StagePlan(stage="sft3")


# ----------------------------------------------------------------- run_stage

def test_sft1_freeze_soundness(micro_bundle, tiny_manifest):
    before = _snapshot(micro_bundle)
    run_stage(_plan(STAGE_SFT1, steps=4), micro_bundle, tiny_manifest, seed=0)
    after = _snapshot(micro_bundle)
    for name in before:
        same = np.array_equal(before[name], after[name])
        if name.startswith("adapter/"):
            continue  # adapter may (and does) change
        assert same, f"frozen parameter changed: {name}"
    assert any(not np.array_equal(before[n], after[n]) for n in before
               if n.startswith("adapter/"))


def test_sft2_keeps_decoder_base_frozen(micro_bundle, tiny_manifest):
    run_stage(_plan(STAGE_SFT1, steps=1), micro_bundle, tiny_manifest, seed=0)
    before = None
    run = run_stage(_plan(STAGE_SFT2, steps=0), micro_bundle, tiny_manifest, seed=0)
    before = _snapshot(micro_bundle)  # post-injection baseline
    run_stage(_plan(STAGE_SFT2, steps=4), micro_bundle, tiny_manifest, seed=0)
    after = _snapshot(micro_bundle)
    base_decoder = [n for n in before if n.startswith("decoder/") and "lora_" not in n]
    assert base_decoder
    for name in base_decoder:
        assert np.array_equal(before[name], after[name]), name
    lora_a = [n for n in before if "lora_A" in n]
    assert lora_a
    assert any(not np.array_equal(before[n], after[n]) for n in lora_a)
    assert run.steps_executed == 0


def test_zero_step_run_changes_nothing(micro_bundle, tiny_manifest):
    before = _snapshot(micro_bundle)
    run = run_stage(_plan(STAGE_SFT1, steps=0), micro_bundle, tiny_manifest, seed=5)
    after = _snapshot(micro_bundle)
    assert run.loss_log == []
    for name in before:
        assert np.array_equal(before[name], after[name]), name


def test_missing_prerequisite_rejected(micro_bundle, tiny_manifest):
    with pytest.raises(MissingPrerequisiteError, match="train-sft --stage 1"):
        run_stage(_plan(STAGE_SFT2, steps=1), micro_bundle, tiny_manifest, seed=0)
    micro_bundle.completed_stages.clear()  # drop aed_export provenance
    with pytest.raises(MissingPrerequisiteError, match="train-aed"):
        run_stage(_plan(STAGE_SFT1, steps=1), micro_bundle, tiny_manifest, seed=0)


def test_freeze_holds_at_intermediate_checkpoints(tmp_path, micro_bundle, tiny_manifest):
    run_stage(_plan(STAGE_SFT1, steps=6, checkpoint_every=2), micro_bundle, tiny_manifest,
              seed=0, run_dir=tmp_path)
    initial = load_bundle(tmp_path / "bundle_initial.ckpt").state_arrays()
    mids = sorted(tmp_path.glob("bundle_step*.ckpt"))
    assert mids, "expected intermediate checkpoints"
    for path in mids + [tmp_path / "bundle_final.ckpt"]:
        arrays = load_bundle(path).state_arrays()
        for name, value in initial.items():
            if not name.startswith("adapter/"):
                assert np.array_equal(value, arrays[name]), f"{name} drifted in {path.name}"


def test_run_stage_deterministic(micro_bundle, tiny_manifest, tiny_spec, tiny_tokenizer):
    from ctxasr.adapter import AdapterConfig
    from ctxasr.bundle import build_bundle
    from ctxasr.decoder import DecoderConfig
    from ctxasr.encoder import EncoderConfig, TrainSchedule, export_encoder, train_aed

    def fresh():
        enc_cfg = EncoderConfig(layers=1, model_dim=32, heads=2, conv_kernel=5,
                                input_bins=tiny_spec.feature_dim)
        aed = train_aed(tiny_manifest, enc_cfg, TrainSchedule(steps=0, seed=0), tiny_tokenizer)
        return build_bundle(export_encoder(aed.model),
                            AdapterConfig(stack_factor=2, in_dim=32, out_dim=32, hidden_dim=48),
                            DecoderConfig(layers=1, embed_dim=32, heads=2, max_sequence=96),
                            tiny_tokenizer, seed=3)

    logs = []
    for _ in range(2):
        bundle = fresh()
        run = run_stage(_plan(STAGE_SFT1, steps=3), bundle, tiny_manifest, seed=11)
        logs.append(run.loss_log)
    assert logs[0] == logs[1]


def test_training_on_empty_manifest_rejected(micro_bundle):
    with pytest.raises(InvalidInputError, match="empty"):
        run_stage(_plan(STAGE_SFT1, steps=1), micro_bundle, Manifest(entries=[]), seed=0)


# ------------------------------------------------------------- LM pretraining

def test_lm_pretrain_reduces_loss_and_records_stage(micro_bundle, tiny_manifest):
    losses = pretrain_text_lm(micro_bundle, tiny_manifest, steps=30, seed=3)
    assert len(losses) == 30
    assert losses[-1] < losses[0]
    assert "lm_pretrain" in micro_bundle.completed_stages


# ---------------------------------------------------------------- mix_datasets

def _context_manifest(manifest: Manifest) -> Manifest:
    entries = [Utterance(id=u.id, features=u.features, transcript=u.transcript,
                         group_id=u.group_id,
                         context=ContextBundle(hotwords=(u.transcript.split()[0],)))
               for u in manifest.entries]
    return Manifest(entries=entries)


def test_mix_zero_fraction_keeps_context_set(tiny_manifest):
    ctx = _context_manifest(tiny_manifest)
    mixed = mix_datasets(ctx, tiny_manifest, 0.0, seed=4)
    assert sorted(u.id for u in mixed) == sorted(u.id for u in ctx)
    assert [u.id for u in mixed] != [u.id for u in ctx]  # shuffled per seed
    assert all(u.context is not None for u in mixed)


def test_mix_half_fraction_counts(tiny_manifest):
    ctx = _context_manifest(tiny_manifest)
    mixed = mix_datasets(ctx, tiny_manifest, 0.5, seed=4)
    assert len(mixed) == len(ctx)
    plain = sum(1 for u in mixed if u.context is None)
    assert abs(plain - len(ctx) // 2) <= 1


def test_mix_deterministic(tiny_manifest):
    ctx = _context_manifest(tiny_manifest)
    a = mix_datasets(ctx, tiny_manifest, 0.5, seed=9)
    b = mix_datasets(ctx, tiny_manifest, 0.5, seed=9)
    assert [u.id for u in a] == [u.id for u in b]


def test_mix_rejects_empty_inputs():
    with pytest.raises(InvalidInputError, match="empty"):
        mix_datasets(Manifest(entries=[]), Manifest(entries=[]), 0.5, seed=0)


def test_mix_rejects_bad_fraction(tiny_manifest):
    ctx = _context_manifest(tiny_manifest)
    with pytest.raises(InvalidInputError, match="plain_fraction"):
        mix_datasets(ctx, tiny_manifest, 1.5, seed=0)


# ------------------------------------------------------------------ checkpoints

def test_bundle_checkpoint_round_trip_bit_exact(tmp_path, micro_bundle):
    path = save_bundle(tmp_path / "b.ckpt", micro_bundle)
    loaded = load_bundle(path)
    original = micro_bundle.state_arrays()
    restored = loaded.state_arrays()
    assert set(original) == set(restored)
    for name in original:
        assert np.array_equal(original[name], restored[name]), name
    assert loaded.completed_stages == micro_bundle.completed_stages


def test_checkpoint_bytes_deterministic(tmp_path, micro_bundle):
    p1 = save_bundle(tmp_path / "a.ckpt", micro_bundle)
    p2 = save_bundle(tmp_path / "b.ckpt", micro_bundle)
    assert p1.read_bytes() == p2.read_bytes()


def test_stage_pipeline_monotonicity(pipeline_runs):
    # Across seeds, unfreezing encoder + LoRA (sft2) must not hurt held-out WER.
    sft1 = [run["sft1_dev_wer"] for run in pipeline_runs]
    sft2 = [run["sft2_dev_wer"] for run in pipeline_runs]
    assert sum(b <= a for a, b in zip(sft1, sft2)) >= 2
    assert sum(sft2) / len(sft2) <= sum(sft1) / len(sft1)
