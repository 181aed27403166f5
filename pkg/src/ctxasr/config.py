"""Declarative run configuration.

One RunConfig drives every pipeline command; unknown keys are rejected at
validation time and each command writes the resolved snapshot (plus its hash)
into its run directory so artifacts are traceable to the exact settings that
produced them.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from pydantic import BaseModel, ConfigDict, ValidationError

from .adapter import AdapterConfig
from .contextforge import ContextForgeConfig, DEFAULT_INSTRUCTION
from .corpus import ToyCorpusSpec
from .decoder import DecoderConfig, GenerationConfig
from .encoder import EncoderConfig, TrainSchedule
from .errors import InvalidConfigError
from .evalsuite import HallucinationConfig
from .lora import LoraSpec


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CorpusSection(StrictModel):
    vocab_size: int = 24
    hotword_count: int = 8
    train_count: int = 600
    dev_count: int = 64
    test_count: int = 96
    # Optional ingestion: JSONL of {id, transcript, wav|features, noise_wav?,
    # snr_db?, group_id?} written to corpus/ingested alongside the toy splits.
    ingest_jsonl: str | None = None
    ingest_sample_rate_hz: int = 16_000
    min_tokens: int = 3
    max_tokens: int = 8
    hotword_fraction: float = 0.3
    hotword_occurrences: int = 1
    test_hotword_fraction: float | None = None
    test_hotword_occurrences: int | None = None
    group_count: int = 12
    frames_per_token: int = 8
    feature_dim: int = 40
    pattern_scale: float = 1.0
    noise_std: float = 0.05
    homophone_hotwords: bool = False

    def split_spec(self, split: str) -> ToyCorpusSpec:
        counts = {"train": self.train_count, "dev": self.dev_count, "test": self.test_count}
        if split not in counts:
            raise InvalidConfigError(f"unknown split {split!r}")
        fraction = self.hotword_fraction
        occurrences = self.hotword_occurrences
        if split == "test":
            if self.test_hotword_fraction is not None:
                fraction = self.test_hotword_fraction
            if self.test_hotword_occurrences is not None:
                occurrences = self.test_hotword_occurrences
        return ToyCorpusSpec(
            vocab_size=self.vocab_size,
            hotword_count=self.hotword_count,
            utterance_count=counts[split],
            min_tokens=self.min_tokens,
            max_tokens=self.max_tokens,
            hotword_fraction=fraction,
            hotword_occurrences=occurrences,
            group_count=self.group_count,
            frames_per_token=self.frames_per_token,
            feature_dim=self.feature_dim,
            pattern_scale=self.pattern_scale,
            noise_std=self.noise_std,
            homophone_hotwords=self.homophone_hotwords,
        )


class EncoderSection(StrictModel):
    layers: int = 2
    model_dim: int = 64
    heads: int = 4
    conv_kernel: int = 7
    subsample_factor: int = 4
    ffn_expansion: int = 4
    rel_pos_max_distance: int = 16

    def build(self, input_bins: int) -> EncoderConfig:
        return EncoderConfig(input_bins=input_bins, **self.model_dump())


class AdapterSection(StrictModel):
    stack_factor: int = 2
    hidden_dim: int = 256

    def build(self, in_dim: int, out_dim: int) -> AdapterConfig:
        return AdapterConfig(stack_factor=self.stack_factor, in_dim=in_dim,
                             out_dim=out_dim, hidden_dim=self.hidden_dim)


class DecoderSection(StrictModel):
    layers: int = 2
    embed_dim: int = 64
    heads: int = 4
    ffn_expansion: int = 4
    max_sequence: int = 160

    def build(self) -> DecoderConfig:
        return DecoderConfig(**self.model_dump())


class LoraSection(StrictModel):
    rank: int = 24
    alpha: float = 48.0
    targets: tuple[str, ...] = ("q_proj", "k_proj", "v_proj", "o_proj")

    def build(self) -> LoraSpec:
        return LoraSpec(rank=self.rank, alpha=self.alpha, targets=tuple(self.targets))


class AedSection(StrictModel):
    steps: int = 800
    batch_size: int = 32
    learning_rate: float = 2e-3
    warmup_steps: int = 40
    holdout_fraction: float = 0.1
    decoder_layers: int = 2

    def schedule(self, seed: int) -> TrainSchedule:
        return TrainSchedule(steps=self.steps, batch_size=self.batch_size,
                             learning_rate=self.learning_rate, warmup_steps=self.warmup_steps,
                             holdout_fraction=self.holdout_fraction, seed=seed)


class LmPretrainSection(StrictModel):
    steps: int = 600
    batch_size: int = 32
    learning_rate: float = 2e-3
    warmup_steps: int = 20


class StageSection(StrictModel):
    steps: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    warmup_steps: int = 20
    checkpoint_every: int = 0


class StagesSection(StrictModel):
    sft1: StageSection = StageSection(steps=300, learning_rate=2e-3)
    sft2: StageSection = StageSection(steps=1200, learning_rate=1.5e-3, warmup_steps=50)
    context: StageSection = StageSection(steps=3000, learning_rate=1.5e-3, warmup_steps=50)
    lora: LoraSection = LoraSection()
    plain_fraction: float = 0.5


class ContextSection(StrictModel):
    max_hotwords: int = 4
    summary_max_tokens: int = 50
    with_summaries: bool = False
    stopwords: list[str] = []
    stopword_common_vocabulary: bool = False
    # LLM client settings; endpoint/key fall back to CTXASR_LLM_ENDPOINT and
    # CTXASR_LLM_API_KEY when unset here.
    llm_endpoint: str | None = None
    llm_api_key: str | None = None
    llm_timeout_s: float = 30.0
    llm_max_retries: int = 3
    llm_max_in_flight: int = 1

    def forge_config(self, common_vocabulary: list[str] | None = None) -> ContextForgeConfig:
        stopwords = set(self.stopwords)
        if self.stopword_common_vocabulary and common_vocabulary:
            stopwords.update(common_vocabulary)
        return ContextForgeConfig(max_hotwords=self.max_hotwords,
                                  summary_max_tokens=self.summary_max_tokens,
                                  stopwords=frozenset(stopwords))


class EvalSection(StrictModel):
    set_name: str = "toy-test"
    max_new_tokens: int = 24
    repetition_window: int = 4
    repetition_limit: int = 4
    length_ratio: float = 2.0
    distractor_count: int = 0
    distractor_seed: int = 13

    def generation(self) -> GenerationConfig:
        return GenerationConfig(max_new_tokens=self.max_new_tokens,
                                repetition_window=self.repetition_window,
                                repetition_limit=self.repetition_limit)

    def hallucination(self) -> HallucinationConfig:
        return HallucinationConfig(repetition_ngram=self.repetition_window,
                                   repetition_limit=self.repetition_limit,
                                   length_ratio=self.length_ratio)


class RunConfig(StrictModel):
    seed: int = 0
    instruction: str = DEFAULT_INSTRUCTION
    corpus: CorpusSection = CorpusSection()
    encoder: EncoderSection = EncoderSection()
    adapter: AdapterSection = AdapterSection()
    decoder: DecoderSection = DecoderSection()
    aed: AedSection = AedSection()
    lm_pretrain: LmPretrainSection = LmPretrainSection()
    stages: StagesSection = StagesSection()
    context: ContextSection = ContextSection()
    eval: EvalSection = EvalSection()


def load_run_config(path: Path) -> RunConfig:
    """Parse and strictly validate a JSON config file."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidConfigError(f"cannot read config {path}: {exc}") from exc
    return validate_run_config(data)


def validate_run_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise InvalidConfigError(f"invalid run config: {exc}") from exc


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_config_snapshot(cfg: RunConfig, directory: Path) -> str:
    """Persist the resolved config and return its hash."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    digest = config_hash(cfg)
    payload = {"config": cfg.model_dump(mode="json"), "config_hash": digest}
    (directory / "config.snapshot.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return digest
