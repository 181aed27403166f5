"""Acceptance criteria, one test per criterion.

Each test prints a single pass line once its assertions hold; tolerances are
pinned here and nowhere else. The two training-heavy criteria consume the
session fixtures from conftest (three seeded pipelines each).
"""

from __future__ import annotations

import functools
import itertools
import math
import time

import numpy as np
import torch

from ctxasr import pipeline
from ctxasr.adapter import AdapterConfig
from ctxasr.bundle import build_bundle
from ctxasr.config import RunConfig
from ctxasr.corpus import (SNR_CLEAN, ToyCorpusSpec, Waveform, measured_snr_db,
                           mix_noise_at_snr, synth_toy_corpus)
from ctxasr.decoder import DecoderConfig, GenerationConfig, TextDecoder, generate
from ctxasr.encoder import (EncoderConfig, TrainSchedule, aed_loss, collate_aed_batch,
                            export_encoder, train_aed)
from ctxasr.evalsuite import (CONDITION_WITH, CONDITION_WITHOUT, SetMetrics, aggregate, align,
                              hallucination_flags, normalize_and_tokenize)
from ctxasr.lora import LoraSpec, expected_lora_parameter_count, inject_lora, lora_parameter_count, merge_lora
from ctxasr.trainer import STAGE_SFT1, STAGE_SFT2, StagePlan, run_stage, sft_forward_loss


def _announce(number: int, name: str) -> None:
    print(f"\n[acceptance] criterion {number} ({name}): PASS")


# --------------------------------------------------------------- criterion 1

def test_criterion_01_edit_distance_exhaustive():
    """align() matches brute-force edit distance on every pair with combined
    length <= 8 over a 3-symbol alphabet; runtime under one minute."""
    started = time.monotonic()
    alphabet = ("a", "b", "c")

    @functools.lru_cache(maxsize=None)
    def brute(ref: tuple, hyp: tuple) -> int:
        if not ref:
            return len(hyp)
        if not hyp:
            return len(ref)
        return min(brute(ref[1:], hyp[1:]) + (ref[0] != hyp[0]),
                   brute(ref[1:], hyp) + 1,
                   brute(ref, hyp[1:]) + 1)

    sequences: dict[int, list[tuple]] = {
        n: [tuple(p) for p in itertools.product(alphabet, repeat=n)] for n in range(0, 9)
    }
    checked = 0
    for ref_len in range(0, 9):
        for hyp_len in range(0, 9 - ref_len):
            for ref in sequences[ref_len]:
                for hyp in sequences[hyp_len]:
                    a = align(ref, hyp)
                    assert a.distance == brute(ref, hyp), (ref, hyp)
                    assert a.substitutions + a.deletions + a.insertions == a.distance
                    checked += 1
    elapsed = time.monotonic() - started
    assert checked == 83_653
    assert elapsed < 60.0, f"exhaustive check took {elapsed:.1f}s"
    _announce(1, "edit-distance oracle")


# --------------------------------------------------------------- criterion 2

def test_criterion_02_reference_aggregation_fixture():
    """Per-set WER/recall fixtures aggregate to the published averages and
    relative deltas exactly at 2-decimal / whole-percent precision."""
    names = ["hotword-set", "mandarin-set", "inhouse-set"]
    without = [SetMetrics(n, CONDITION_WITHOUT, w, r) for n, w, r in
               zip(names, [8.82, 4.60, 3.68], [39.90, 81.74, 81.21])]
    with_ctx = [SetMetrics(n, CONDITION_WITH, w, r) for n, w, r in
                zip(names, [2.99, 3.52, 3.25], [88.08, 95.33, 86.39])]
    report = aggregate(without + with_ctx)
    averages = {s.condition: s for s in report.averages}
    assert averages[CONDITION_WITHOUT].average_wer_percent == 5.70
    assert averages[CONDITION_WITH].average_wer_percent == 3.25
    assert averages[CONDITION_WITHOUT].average_recall_percent == 67.62
    assert averages[CONDITION_WITH].average_recall_percent == 89.93
    assert report.wer_reduction_percent == 43
    assert report.recall_gain_percent == 33
    _announce(2, "aggregation arithmetic fixture")


# --------------------------------------------------------------- criterion 3

def test_criterion_03_freeze_soundness(micro_bundle, tiny_manifest):
    """50-step sft1 leaves encoder+decoder bit-identical and changes the
    adapter; 50-step sft2 leaves decoder base weights bit-identical and
    changes LoRA matrices. Zero tolerance."""
    lora = LoraSpec(rank=4, alpha=8.0)
    before = micro_bundle.state_arrays()
    run_stage(StagePlan(stage=STAGE_SFT1, steps=50, batch_size=8, learning_rate=1e-3,
                        warmup_steps=5), micro_bundle, tiny_manifest, seed=0)
    after1 = micro_bundle.state_arrays()
    for name in before:
        if name.startswith(("encoder/", "decoder/")):
            assert np.array_equal(before[name], after1[name]), name
    assert any(not np.array_equal(before[n], after1[n])
               for n in before if n.startswith("adapter/"))

    run_stage(StagePlan(stage=STAGE_SFT2, steps=0, batch_size=8, learning_rate=1e-3,
                        warmup_steps=5, lora=lora), micro_bundle, tiny_manifest, seed=0)
    post_inject = micro_bundle.state_arrays()
    run_stage(StagePlan(stage=STAGE_SFT2, steps=50, batch_size=8, learning_rate=1e-3,
                        warmup_steps=5, lora=lora), micro_bundle, tiny_manifest, seed=0)
    after2 = micro_bundle.state_arrays()
    base_decoder = [n for n in post_inject if n.startswith("decoder/") and "lora_" not in n]
    lora_names = [n for n in post_inject if "lora_A" in n]
    assert base_decoder and lora_names
    for name in base_decoder:
        assert np.array_equal(post_inject[name], after2[name]), name
    assert any(not np.array_equal(post_inject[n], after2[n]) for n in lora_names)
    _announce(3, "freeze soundness")


# --------------------------------------------------------------- criterion 4

def test_criterion_04_lora_correctness():
    torch.manual_seed(0)
    cfg = DecoderConfig(layers=2, embed_dim=64, heads=4, max_sequence=64)
    decoder = TextDecoder(cfg, vocab_size=30)
    probe = torch.randn(1, 12, 64, generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        base_logits = decoder.forward_embeddings(probe)
    spec = LoraSpec(rank=8, alpha=16.0)
    inject_lora(decoder, spec)
    with torch.no_grad():
        injected_logits = decoder.forward_embeddings(probe)
    assert float((injected_logits - base_logits).abs().max()) <= 1e-7

    assert lora_parameter_count(decoder) == expected_lora_parameter_count(spec, 64, 2)
    assert lora_parameter_count(decoder) == 2 * 4 * 8 * (64 + 64)

    # Arbitrary adapter updates, then the dual-path check.
    g = torch.Generator().manual_seed(2)
    with torch.no_grad():
        for name, param in decoder.named_parameters():
            if "lora_" in name:
                param.copy_(torch.randn(param.shape, generator=g) * 0.05)
    with torch.no_grad():
        unmerged = decoder.forward_embeddings(probe)
    merge_lora(decoder)
    with torch.no_grad():
        merged = decoder.forward_embeddings(probe)
    rel = float((merged - unmerged).abs().max() / unmerged.abs().max())
    assert rel <= 1e-5
    _announce(4, "LoRA inject/merge correctness")


# --------------------------------------------------------------- criterion 5

def _finite_difference_check(params, loss_fn, rng, coords_per_tensor: int = 3,
                             eps: float = 1e-6) -> int:
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = [None if p.grad is None else p.grad.detach().clone() for p in params]
    checked = 0
    for param, grad in zip(params, grads):
        if grad is None:
            continue
        flat = param.detach().reshape(-1)
        gflat = grad.reshape(-1)
        for idx in rng.choice(flat.numel(), size=min(coords_per_tensor, flat.numel()),
                              replace=False):
            with torch.no_grad():
                flat[idx] += eps
                up = float(loss_fn())
                flat[idx] -= 2 * eps
                down = float(loss_fn())
                flat[idx] += eps
            fd = (up - down) / (2 * eps)
            an = float(gflat[idx])
            assert abs(an - fd) <= 1e-3 * max(abs(an), abs(fd)) + 1e-7, \
                f"gradient mismatch: analytic {an} vs fd {fd}"
            checked += 1
    return checked


def test_criterion_05_gradient_checks(tiny_spec, tiny_manifest, tiny_tokenizer):
    """Analytic gradients of both losses match central finite differences
    within relative 1e-3 on 2-layer micro-configs (double precision)."""
    started = time.monotonic()
    rng = np.random.default_rng(0)

    torch.manual_seed(0)
    enc_cfg = EncoderConfig(layers=2, model_dim=16, heads=2, conv_kernel=3,
                            subsample_factor=2, ffn_expansion=2,
                            input_bins=tiny_spec.feature_dim, rel_pos_max_distance=4)
    aed = train_aed(tiny_manifest, enc_cfg, TrainSchedule(steps=0, seed=0), tiny_tokenizer)
    model = aed.model.double()
    batch = collate_aed_batch(tiny_manifest.entries[:2], tiny_tokenizer, dtype=torch.float64)

    def aed_loss_fn():
        return aed_loss(model, batch)

    checked = _finite_difference_check(list(model.parameters()), aed_loss_fn, rng)
    assert checked > 50

    torch.manual_seed(1)
    bundle = build_bundle(export_encoder(aed.model),
                          AdapterConfig(stack_factor=2, in_dim=16, out_dim=16, hidden_dim=12),
                          DecoderConfig(layers=2, embed_dim=16, heads=2, max_sequence=96),
                          tiny_tokenizer, seed=1)
    inject_lora(bundle.decoder, LoraSpec(rank=2, alpha=4.0))
    for module in bundle.modules().values():
        module.double()
    g = torch.Generator().manual_seed(3)
    with torch.no_grad():
        for name, param in bundle.named_parameters():
            if "lora_" in name:  # nonzero B so gradients flow through both factors
                param.copy_(torch.randn(param.shape, generator=g, dtype=torch.float64) * 0.05)
    trainable = [p for n, p in bundle.named_parameters()
                 if n.startswith(("encoder/", "adapter/")) or "lora_" in n]
    for p in trainable:
        p.requires_grad_(True)
    utts = tiny_manifest.entries[:2]

    def sft_loss_fn():
        return sft_forward_loss(bundle, utts)

    checked = _finite_difference_check(trainable, sft_loss_fn, rng)
    assert checked > 50
    elapsed = time.monotonic() - started
    assert elapsed < 120.0, f"gradient checks took {elapsed:.1f}s"
    _announce(5, "gradient checks vs finite differences")


# --------------------------------------------------------------- criterion 6

def test_criterion_06_snr_accuracy():
    rng = np.random.default_rng(11)
    t = np.arange(12_000) / 16_000
    clean = Waveform(samples=0.35 * np.sin(2 * math.pi * 320 * t), sample_rate_hz=16_000)
    noise = Waveform(samples=0.05 * rng.standard_normal(12_000), sample_rate_hz=16_000)
    for target in (0.0, 10.0, 20.0):
        mixed = mix_noise_at_snr(clean, noise, target)
        measured = measured_snr_db(mixed, clean)
        assert abs(measured - target) <= 0.1, f"{target} dB -> measured {measured:.3f}"
    assert np.array_equal(mix_noise_at_snr(clean, noise, SNR_CLEAN).samples, clean.samples)
    _announce(6, "SNR mixing accuracy")


# --------------------------------------------------------------- criterion 7

def test_criterion_07_toy_end_to_end(pipeline_runs):
    """train-aed -> sft1 -> sft2 reaches held-out WER < 5% within 15 minutes
    per seed, for at least 2 of 3 seeds."""
    for run in pipeline_runs:
        assert run["elapsed_s"] < 900.0, f"seed {run['seed']} took {run['elapsed_s']:.0f}s"
        print(f"  seed {run['seed']}: sft2 dev WER {run['sft2_dev_wer']}% "
              f"({run['elapsed_s']:.0f}s)")
    passing = [run for run in pipeline_runs if run["sft2_dev_wer"] < 5.0]
    assert len(passing) >= 2, [run["sft2_dev_wer"] for run in pipeline_runs]
    _announce(7, "toy end-to-end WER")


# --------------------------------------------------------------- criterion 8

def test_criterion_08_contextual_gain(context_runs):
    """On the hotword-rich homophone test set, prompting with context must cut
    WER by >= 20% relative and lift recall by >= 15 points, 2 of 3 seeds."""
    passing = 0
    for run in context_runs:
        wer_without = run["without"]["wer_percent"]
        wer_with = run["with"]["wer_percent"]
        recall_without = run["without"]["recall_percent"] or 0.0
        recall_with = run["with"]["recall_percent"] or 0.0
        reduction = (wer_without - wer_with) / wer_without * 100.0
        gain = recall_with - recall_without
        ok = (wer_with < wer_without and recall_with > recall_without
              and reduction >= 20.0 and gain >= 15.0)
        passing += int(ok)
        print(f"  seed {run['seed']}: WER {wer_without} -> {wer_with} "
              f"({reduction:.0f}% rel), recall {recall_without} -> {recall_with} "
              f"(+{gain:.1f} pts) {'ok' if ok else 'MISS'}")
    assert passing >= 2
    _announce(8, "contextual WER/recall gain")


# --------------------------------------------------------------- criterion 9

class _LoopingDecoder(TextDecoder):
    """Rigged to emit a repeating 2-gram forever."""

    def set_loop(self, tokens: tuple[int, int], prefix_len: int):
        self._loop = tokens
        self._prefix_len = prefix_len
        return self

    def forward_embeddings(self, x):
        step = x.shape[1] - self._prefix_len
        token = self._loop[step % 2]
        logits = torch.full((x.shape[0], x.shape[1], self.vocab_size), -10.0)
        logits[:, -1, token] = 10.0
        return logits


def test_criterion_09_hallucination_guard():
    torch.manual_seed(0)
    cfg = DecoderConfig(layers=1, embed_dim=16, heads=2, max_sequence=256)
    gen = GenerationConfig(max_new_tokens=64, repetition_window=2, repetition_limit=4)
    flagged = 0
    for trial in range(100):
        audio = torch.randn(3, 16, generator=torch.Generator().manual_seed(trial))
        decoder = _LoopingDecoder(cfg, vocab_size=20).set_loop((5, 6), prefix_len=4)
        result = generate(decoder, [], audio, gen)
        hyp = normalize_and_tokenize(" ".join(f"t{t}" for t in result.tokens))
        ref = normalize_and_tokenize("t5 t6 t7")
        flags = hallucination_flags(ref, hyp, result.flags)
        flagged += int(result.reason == "repetition" and flags.repetition
                       and len(result.tokens) == 8)
    assert flagged == 100

    spec = ToyCorpusSpec(vocab_size=24, hotword_count=8, utterance_count=300,
                         feature_dim=8, frames_per_token=4)
    manifest = synth_toy_corpus(spec, seed=123)
    false_flags = 0
    for utt in manifest:
        ref = normalize_and_tokenize(utt.transcript)
        false_flags += int(hallucination_flags(ref, ref).any)
    assert false_flags == 0
    _announce(9, "hallucination guard")


# -------------------------------------------------------------- criterion 10

def _mini_run_config() -> RunConfig:
    return RunConfig.model_validate({
        "seed": 5,
        "corpus": {"train_count": 48, "dev_count": 8, "test_count": 8,
                   "vocab_size": 10, "hotword_count": 3, "feature_dim": 12},
        "encoder": {"layers": 1, "model_dim": 32, "heads": 2, "conv_kernel": 5},
        "adapter": {"hidden_dim": 48},
        "decoder": {"layers": 1, "embed_dim": 32, "heads": 2},
        "aed": {"steps": 6, "batch_size": 8},
        "lm_pretrain": {"steps": 4, "batch_size": 8},
        "stages": {"sft1": {"steps": 4, "batch_size": 8},
                   "sft2": {"steps": 4, "batch_size": 8},
                   "context": {"steps": 4, "batch_size": 8},
                   "lora": {"rank": 4, "alpha": 8.0}},
        "eval": {"max_new_tokens": 8},
    })


def _run_full_pipeline(ws, cfg):
    pipeline.prepare_data(ws, cfg)
    pipeline.train_aed_command(ws, cfg)
    pipeline.train_sft_command(ws, cfg, 1)
    pipeline.train_sft_command(ws, cfg, 2)
    pipeline.forge_context_command(ws, cfg)
    pipeline.train_context_command(ws, cfg)
    pipeline.evaluate_command(ws, cfg, "both")


def test_criterion_10_determinism(tmp_path):
    """Identical seeds and configs give byte-identical manifests, loss logs and
    reports, and bit-identical checkpoint parameter arrays."""
    cfg = _mini_run_config()
    ws_a = tmp_path / "run-a"
    ws_b = tmp_path / "run-b"
    _run_full_pipeline(ws_a, cfg)
    _run_full_pipeline(ws_b, cfg)

    byte_files = [
        "corpus/train/manifest.jsonl", "corpus/dev/manifest.jsonl",
        "corpus/test/manifest.jsonl", "context_corpus/train/manifest.jsonl",
        "aed/loss.log", "sft1/loss.log", "sft2/loss.log", "context/loss.log",
        "eval/both/report.jsonl", "eval/both/report.txt", "eval/both/details.jsonl",
    ]
    for rel in byte_files:
        a = (ws_a / rel).read_bytes()
        b = (ws_b / rel).read_bytes()
        assert a == b, f"{rel} differs between identical runs"

    feature_files = sorted(p.relative_to(ws_a) for p in (ws_a / "corpus").rglob("*.npy"))
    assert feature_files
    for rel in feature_files:
        assert (ws_a / rel).read_bytes() == (ws_b / rel).read_bytes(), rel

    for rel in ["sft1/bundle_final.ckpt", "sft2/bundle_final.ckpt",
                "context/bundle_final.ckpt"]:
        assert (ws_a / rel).read_bytes() == (ws_b / rel).read_bytes(), rel
    _announce(10, "seeded determinism")
