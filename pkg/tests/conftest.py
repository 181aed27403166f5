"""Shared fixtures.

The two session-scoped fixtures at the bottom run full training pipelines
(three seeds each) and are consumed by the acceptance tests plus a few
end-to-end checks; everything else is small and fast.
"""

from __future__ import annotations

import time

import pytest

from ctxasr import pipeline
from ctxasr.adapter import AdapterConfig
from ctxasr.bundle import build_bundle
from ctxasr.config import RunConfig
from ctxasr.contextforge import DEFAULT_INSTRUCTION, TEMPLATE_TOKENS
from ctxasr.corpus import ToyCorpusSpec, synth_toy_corpus, toy_vocabulary
from ctxasr.decoder import DecoderConfig
from ctxasr.encoder import EncoderConfig, TrainSchedule, export_encoder, train_aed
from ctxasr.tokenizer import Tokenizer


@pytest.fixture(scope="session")
def tiny_spec() -> ToyCorpusSpec:
    return ToyCorpusSpec(vocab_size=12, hotword_count=4, utterance_count=48,
                         min_tokens=3, max_tokens=6, frames_per_token=8,
                         feature_dim=16, group_count=4)


@pytest.fixture(scope="session")
def tiny_manifest(tiny_spec):
    return synth_toy_corpus(tiny_spec, seed=7)


@pytest.fixture(scope="session")
def tiny_tokenizer(tiny_spec, tiny_manifest) -> Tokenizer:
    common, hotwords = toy_vocabulary(tiny_spec)
    extras = list(TEMPLATE_TOKENS) + DEFAULT_INSTRUCTION.split()
    return Tokenizer(words=tuple(sorted(set(common + hotwords + extras))))


@pytest.fixture()
def micro_bundle(tiny_spec, tiny_manifest, tiny_tokenizer):
    """Small untrained-but-wired bundle with AED provenance."""
    enc_cfg = EncoderConfig(layers=1, model_dim=32, heads=2, conv_kernel=5,
                            input_bins=tiny_spec.feature_dim)
    aed = train_aed(tiny_manifest, enc_cfg,
                    TrainSchedule(steps=0, batch_size=8, seed=0), tiny_tokenizer)
    return build_bundle(export_encoder(aed.model),
                        AdapterConfig(stack_factor=2, in_dim=32, out_dim=32, hidden_dim=48),
                        DecoderConfig(layers=1, embed_dim=32, heads=2, max_sequence=96),
                        tiny_tokenizer, seed=0)


# --------------------------------------------------------------------------
# Heavy end-to-end fixtures (shared by the acceptance suite).

ACCEPT7_SEEDS = (0, 1, 2)
ACCEPT8_SEEDS = (0, 1, 2)


def accept7_config(seed: int) -> RunConfig:
    """Plain toy-corpus pipeline sized for the end-to-end WER gate."""
    return RunConfig.model_validate({"seed": seed, "corpus": {"train_count": 2400}})


def accept8_config(seed: int) -> RunConfig:
    """Homophone-hotword corpus: context is the only way to disambiguate."""
    return RunConfig.model_validate({
        "seed": seed,
        "corpus": {"train_count": 2400, "homophone_hotwords": True,
                   "hotword_fraction": 0.4, "test_hotword_fraction": 1.0,
                   "test_hotword_occurrences": 2},
        "context": {"max_hotwords": 1},
        "stages": {"plain_fraction": 0.4},
    })


def _records_by_kind(records: list[dict]) -> dict:
    out: dict = {"set": {}, "average": {}, "delta": None}
    for record in records:
        if record.get("kind") == "set":
            out["set"][record["condition"]] = record
        elif record.get("kind") == "average":
            out["average"][record["condition"]] = record
        elif record.get("kind") == "delta":
            out["delta"] = record
    return out


@pytest.fixture(scope="session")
def pipeline_runs(tmp_path_factory):
    """Three seeded train-aed -> sft1 -> sft2 pipelines on the plain corpus."""
    runs = []
    for seed in ACCEPT7_SEEDS:
        ws = tmp_path_factory.mktemp(f"pipe7-seed{seed}")
        cfg = accept7_config(seed)
        started = time.monotonic()
        pipeline.prepare_data(ws, cfg)
        aed = pipeline.train_aed_command(ws, cfg)
        sft1 = pipeline.train_sft_command(ws, cfg, 1)
        sft2 = pipeline.train_sft_command(ws, cfg, 2)
        elapsed = time.monotonic() - started
        runs.append({
            "seed": seed,
            "workspace": ws,
            "config": cfg,
            "elapsed_s": elapsed,
            "aed_holdout_accuracy": aed.metrics["holdout_token_accuracy"],
            "sft1_dev_wer": sft1.metrics["dev_wer_percent"],
            "sft2_dev_wer": sft2.metrics["dev_wer_percent"],
        })
    return runs


@pytest.fixture(scope="session")
def context_runs(tmp_path_factory):
    """Three seeded full pipelines (through context_sft) on the homophone corpus,
    evaluated with and without context."""
    runs = []
    for seed in ACCEPT8_SEEDS:
        ws = tmp_path_factory.mktemp(f"pipe8-seed{seed}")
        cfg = accept8_config(seed)
        pipeline.prepare_data(ws, cfg)
        pipeline.train_aed_command(ws, cfg)
        pipeline.train_sft_command(ws, cfg, 1)
        pipeline.train_sft_command(ws, cfg, 2)
        pipeline.forge_context_command(ws, cfg)
        pipeline.train_context_command(ws, cfg)
        result = pipeline.evaluate_command(ws, cfg, "both")
        summary = _records_by_kind(result.metrics["records"])
        runs.append({
            "seed": seed,
            "workspace": ws,
            "config": cfg,
            "without": summary["set"]["w/o context"],
            "with": summary["set"]["w/ context"],
            "delta": summary["delta"],
        })
    return runs
