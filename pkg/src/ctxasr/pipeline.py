"""Pipeline commands over a self-describing workspace directory.

Every command owns one run directory inside the workspace, writes its config
snapshot plus a ``done.json`` marker there, and skips itself on re-runs with
an unchanged config unless forced. Layout:

    <workspace>/
      corpus/{train,dev,test}/     toy manifests + feature payloads
      aed/                         encoder export, loss log, metrics
      sft1/ sft2/ context/         stage checkpoints and loss logs
      context_corpus/{train,test}/ forged context manifests
      eval/<mode>/                 reports (jsonl + rendered table) and details
"""

from __future__ import annotations

import hashlib
import json
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bundle import ModelBundle, build_bundle, load_bundle, load_encoder_export, save_encoder_export, transcribe
from .config import RunConfig, config_hash, write_config_snapshot
from .contextforge import (ContextForge, HttpLlmClient, TEMPLATE_TOKENS, add_distractors,
                           render_prompt)
from .corpus import (ContextBundle, FeatureConfig, FeatureMatrix, Manifest, ingest_utterances,
                     synth_toy_corpus, toy_vocabulary)
from .encoder import export_encoder, train_aed
from .errors import InvalidInputError, MissingPrerequisiteError
from .evalsuite import (CONDITION_WITH, CONDITION_WITHOUT, SetMetrics, aggregate,
                        hallucination_flags, hotword_recall, normalize_and_tokenize,
                        report_records, wer, write_report)
from .tokenizer import Tokenizer
from .trainer import (STAGE_CONTEXT, STAGE_SFT1, STAGE_SFT2, StagePlan, mix_datasets,
                      pretrain_text_lm, run_stage)

EVAL_MODES = ("on", "off", "both")

_STAGE_DIRS = {STAGE_SFT1: "sft1", STAGE_SFT2: "sft2", STAGE_CONTEXT: "context"}


@dataclass
class CommandResult:
    command: str
    status: str                       # completed | skipped
    outputs: dict[str, str] = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"command": self.command, "status": self.status,
                "outputs": self.outputs, "metrics": self.metrics}


def _digest(cfg: RunConfig, extra: dict | None = None) -> str:
    base = config_hash(cfg)
    if not extra:
        return base
    return hashlib.sha256((base + json.dumps(extra, sort_keys=True)).encode()).hexdigest()


def _maybe_skip(run_dir: Path, command: str, digest: str, force: bool) -> CommandResult | None:
    marker = run_dir / "done.json"
    if force or not marker.exists():
        return None
    try:
        done = json.loads(marker.read_text(encoding="utf-8"))
    except json.JSONDecodeError:
        return None
    if done.get("config_hash") != digest:
        return None
    return CommandResult(command=command, status="skipped",
                         outputs=done.get("outputs", {}), metrics=done.get("metrics", {}))


def _mark_done(run_dir: Path, command: str, digest: str, cfg: RunConfig,
               outputs: dict[str, str], metrics: dict) -> CommandResult:
    write_config_snapshot(cfg, run_dir)
    marker = {"command": command, "config_hash": digest, "outputs": outputs, "metrics": metrics}
    (run_dir / "done.json").write_text(json.dumps(marker, sort_keys=True, indent=2) + "\n",
                                       encoding="utf-8")
    return CommandResult(command=command, status="completed", outputs=outputs, metrics=metrics)


def build_tokenizer(cfg: RunConfig) -> Tokenizer:
    """Corpus inventory plus every token a rendered prompt can introduce."""
    common, hotwords = toy_vocabulary(cfg.corpus.split_spec("train"))
    extras = list(TEMPLATE_TOKENS) + cfg.instruction.split()
    return Tokenizer(words=tuple(sorted(set(common + hotwords + extras))))


# ---------------------------------------------------------------- prepare-data

def prepare_data(workspace: Path, cfg: RunConfig, force: bool = False) -> CommandResult:
    workspace = Path(workspace)
    run_dir = workspace / "corpus"
    digest = _digest(cfg)
    skipped = _maybe_skip(run_dir, "prepare-data", digest, force)
    if skipped:
        return skipped
    run_dir.mkdir(parents=True, exist_ok=True)
    outputs: dict[str, str] = {}
    counts: dict[str, int] = {}
    for i, split in enumerate(("train", "dev", "test")):
        spec = cfg.corpus.split_spec(split)
        manifest = synth_toy_corpus(spec, seed=cfg.seed + 1 + i,
                                    pattern_seed=cfg.seed, id_prefix=split)
        path = manifest.save(run_dir / split)
        outputs[split] = str(path)
        counts[split] = len(manifest)
    common, hotwords = toy_vocabulary(cfg.corpus.split_spec("train"))
    (run_dir / "vocab.json").write_text(
        json.dumps({"common": common, "hotwords": hotwords}, sort_keys=True) + "\n",
        encoding="utf-8")
    outputs["vocab"] = str(run_dir / "vocab.json")
    if cfg.corpus.ingest_jsonl:
        source = Path(cfg.corpus.ingest_jsonl)
        if not source.exists():
            raise InvalidInputError(f"ingest file not found: {source}")
        records = [json.loads(line) for line in
                   source.read_text(encoding="utf-8").splitlines() if line.strip()]
        feature_cfg = FeatureConfig(sample_rate_hz=cfg.corpus.ingest_sample_rate_hz,
                                    num_mels=cfg.corpus.feature_dim)
        ingested = ingest_utterances(records, feature_cfg, source.parent)
        outputs["ingested"] = str(ingested.save(run_dir / "ingested"))
        counts["ingested"] = len(ingested)
    return _mark_done(run_dir, "prepare-data", digest, cfg, outputs, {"utterances": counts})


def _load_split(workspace: Path, split: str, *, context: bool = False) -> Manifest:
    base = Path(workspace) / ("context_corpus" if context else "corpus") / split
    if not (base / "manifest.jsonl").exists():
        upstream = "forge-context" if context else "prepare-data"
        raise MissingPrerequisiteError(f"missing {split} manifest under {base}",
                                       upstream_command=upstream)
    return Manifest.load(base)


# ------------------------------------------------------------------- train-aed

def train_aed_command(workspace: Path, cfg: RunConfig, force: bool = False) -> CommandResult:
    workspace = Path(workspace)
    run_dir = workspace / "aed"
    digest = _digest(cfg)
    skipped = _maybe_skip(run_dir, "train-aed", digest, force)
    if skipped:
        return skipped
    manifest = _load_split(workspace, "train")
    tokenizer = build_tokenizer(cfg)
    encoder_cfg = cfg.encoder.build(input_bins=cfg.corpus.feature_dim)
    result = train_aed(manifest, encoder_cfg, cfg.aed.schedule(seed=cfg.seed),
                       tokenizer, decoder_layers=cfg.aed.decoder_layers)
    run_dir.mkdir(parents=True, exist_ok=True)
    export_path = save_encoder_export(run_dir / "encoder_export.ckpt", export_encoder(result.model))
    with (run_dir / "loss.log").open("w", encoding="utf-8") as f:
        for step, loss in enumerate(result.loss_log):
            f.write(f"{step}\t{loss!r}\n")
    metrics = {
        "holdout_loss": result.holdout_loss,
        "holdout_token_accuracy": result.holdout_accuracy,
        "final_loss": result.loss_log[-1] if result.loss_log else None,
    }
    (run_dir / "metrics.json").write_text(json.dumps(metrics, sort_keys=True) + "\n",
                                          encoding="utf-8")
    outputs = {"encoder_export": str(export_path), "loss_log": str(run_dir / "loss.log")}
    return _mark_done(run_dir, "train-aed", digest, cfg, outputs, metrics)


# ------------------------------------------------------------------- train-sft

def _stage_plan(cfg: RunConfig, stage: str) -> StagePlan:
    section = {STAGE_SFT1: cfg.stages.sft1, STAGE_SFT2: cfg.stages.sft2,
               STAGE_CONTEXT: cfg.stages.context}[stage]
    return StagePlan(stage=stage, steps=section.steps, batch_size=section.batch_size,
                     learning_rate=section.learning_rate, warmup_steps=section.warmup_steps,
                     checkpoint_every=section.checkpoint_every,
                     lora=cfg.stages.lora.build() if stage != STAGE_SFT1 else None,
                     plain_fraction=cfg.stages.plain_fraction,
                     instruction=cfg.instruction)


def _dev_wer(bundle: ModelBundle, workspace: Path, cfg: RunConfig) -> float:
    dev = _load_split(workspace, "dev")
    refs, hyps = [], []
    gen = cfg.eval.generation()
    for utt in dev:
        text, _ = transcribe(bundle, utt.features, cfg.instruction, gen)
        refs.append(normalize_and_tokenize(utt.transcript))
        hyps.append(normalize_and_tokenize(text))
    return wer(refs, hyps).percent


def _load_stage_bundle(workspace: Path, stage: str) -> ModelBundle:
    path = Path(workspace) / _STAGE_DIRS[stage] / "bundle_final.ckpt"
    if not path.exists():
        upstream = {STAGE_SFT1: "train-sft --stage 1", STAGE_SFT2: "train-sft --stage 2",
                    STAGE_CONTEXT: "train-context"}[stage]
        raise MissingPrerequisiteError(f"missing checkpoint {path}", upstream_command=upstream)
    return load_bundle(path)


def train_sft_command(workspace: Path, cfg: RunConfig, stage: int,
                      force: bool = False) -> CommandResult:
    if stage not in (1, 2):
        raise InvalidInputError(f"stage must be 1 or 2, got {stage}")
    workspace = Path(workspace)
    stage_name = STAGE_SFT1 if stage == 1 else STAGE_SFT2
    run_dir = workspace / _STAGE_DIRS[stage_name]
    digest = _digest(cfg, {"stage": stage})
    skipped = _maybe_skip(run_dir, f"train-sft --stage {stage}", digest, force)
    if skipped:
        return skipped
    manifest = _load_split(workspace, "train")
    if stage == 1:
        export_path = workspace / "aed" / "encoder_export.ckpt"
        if not export_path.exists():
            raise MissingPrerequisiteError(f"missing encoder export {export_path}",
                                           upstream_command="train-aed")
        tokenizer = build_tokenizer(cfg)
        encoder_export = load_encoder_export(export_path)
        bundle = build_bundle(
            encoder_export,
            cfg.adapter.build(in_dim=encoder_export.config.model_dim,
                              out_dim=cfg.decoder.embed_dim),
            cfg.decoder.build(), tokenizer, seed=cfg.seed)
        lm = cfg.lm_pretrain
        pretrain_text_lm(bundle, manifest, lm.steps, cfg.seed + 17,
                         batch_size=lm.batch_size, learning_rate=lm.learning_rate,
                         warmup_steps=lm.warmup_steps)
    else:
        bundle = _load_stage_bundle(workspace, STAGE_SFT1)
    run = run_stage(_stage_plan(cfg, stage_name), bundle, manifest,
                    seed=cfg.seed + 100 * stage, run_dir=run_dir)
    metrics = {
        "steps": run.steps_executed,
        "final_loss": run.loss_log[-1] if run.loss_log else None,
        "dev_wer_percent": _dev_wer(bundle, workspace, cfg),
    }
    (run_dir / "metrics.json").write_text(json.dumps(metrics, sort_keys=True) + "\n",
                                          encoding="utf-8")
    outputs = {"bundle": str(run.final_checkpoint), "loss_log": str(run_dir / "loss.log")}
    return _mark_done(run_dir, f"train-sft --stage {stage}", digest, cfg, outputs, metrics)


# --------------------------------------------------------------- forge-context

def _make_forge(cfg: RunConfig, manifest: Manifest) -> ContextForge:
    endpoint = cfg.context.llm_endpoint or os.environ.get("CTXASR_LLM_ENDPOINT")
    client = None
    if endpoint:
        client = HttpLlmClient(endpoint=endpoint,
                               api_key=cfg.context.llm_api_key
                               or os.environ.get("CTXASR_LLM_API_KEY"),
                               timeout_s=cfg.context.llm_timeout_s,
                               max_retries=cfg.context.llm_max_retries)
    common, _ = toy_vocabulary(cfg.corpus.split_spec("train"))
    return ContextForge(manifest, cfg.context.forge_config(common_vocabulary=common), client)


def forge_context_command(workspace: Path, cfg: RunConfig, force: bool = False) -> CommandResult:
    workspace = Path(workspace)
    run_dir = workspace / "context_corpus"
    digest = _digest(cfg)
    skipped = _maybe_skip(run_dir, "forge-context", digest, force)
    if skipped:
        return skipped
    train = _load_split(workspace, "train")
    forge = _make_forge(cfg, train)
    outputs: dict[str, str] = {}
    counts: dict[str, int] = {}
    for split in ("train", "test"):
        manifest = _load_split(workspace, split)
        forged = forge.forge_manifest(manifest, with_summaries=cfg.context.with_summaries,
                                      max_in_flight=cfg.context.llm_max_in_flight)
        outputs[split] = str(forged.save(run_dir / split))
        counts[split] = len(forged)
    return _mark_done(run_dir, "forge-context", digest, cfg, outputs,
                      {"context_utterances": counts})


# --------------------------------------------------------------- train-context

def train_context_command(workspace: Path, cfg: RunConfig, force: bool = False) -> CommandResult:
    workspace = Path(workspace)
    run_dir = workspace / _STAGE_DIRS[STAGE_CONTEXT]
    digest = _digest(cfg)
    skipped = _maybe_skip(run_dir, "train-context", digest, force)
    if skipped:
        return skipped
    context_train = _load_split(workspace, "train", context=True)
    plain_train = _load_split(workspace, "train")
    bundle = _load_stage_bundle(workspace, STAGE_SFT2)
    mixed = mix_datasets(context_train, plain_train, cfg.stages.plain_fraction,
                         seed=cfg.seed + 300)
    run = run_stage(_stage_plan(cfg, STAGE_CONTEXT), bundle, mixed,
                    seed=cfg.seed + 301, run_dir=run_dir)
    metrics = {
        "steps": run.steps_executed,
        "final_loss": run.loss_log[-1] if run.loss_log else None,
        "mixed_utterances": len(mixed),
        "dev_wer_percent": _dev_wer(bundle, workspace, cfg),
    }
    (run_dir / "metrics.json").write_text(json.dumps(metrics, sort_keys=True) + "\n",
                                          encoding="utf-8")
    outputs = {"bundle": str(run.final_checkpoint), "loss_log": str(run_dir / "loss.log")}
    return _mark_done(run_dir, "train-context", digest, cfg, outputs, metrics)


# ------------------------------------------------------------------ transcribe

def _latest_bundle(workspace: Path, model_stage: str | None = None) -> tuple[ModelBundle, str]:
    order = [STAGE_CONTEXT, STAGE_SFT2, STAGE_SFT1]
    if model_stage:
        name = {"context": STAGE_CONTEXT, "sft2": STAGE_SFT2, "sft1": STAGE_SFT1}.get(model_stage)
        if name is None:
            raise InvalidInputError(f"unknown model stage {model_stage!r}")
        order = [name]
    for stage in order:
        path = Path(workspace) / _STAGE_DIRS[stage] / "bundle_final.ckpt"
        if path.exists():
            return load_bundle(path), stage
    raise MissingPrerequisiteError("no trained bundle found in workspace",
                                   upstream_command="train-sft --stage 1")


def transcribe_command(workspace: Path, cfg: RunConfig, *,
                       utterance_id: str | None = None,
                       manifest_split: str = "test",
                       features_path: str | None = None,
                       hotwords: list[str] | None = None,
                       summary: str | None = None,
                       model_stage: str | None = None) -> dict:
    """Transcribe one utterance under an optional context prompt."""
    workspace = Path(workspace)
    bundle, stage = _latest_bundle(workspace, model_stage)
    if features_path:
        frames = np.load(features_path)
        features = FeatureMatrix(frames=frames, frame_shift_ms=10.0)
        utt_id = Path(features_path).stem
    elif utterance_id:
        manifest = _load_split(workspace, manifest_split)
        matches = [u for u in manifest if u.id == utterance_id]
        if not matches:
            raise InvalidInputError(f"utterance {utterance_id!r} not in {manifest_split} manifest")
        features = matches[0].features
        utt_id = utterance_id
    else:
        raise InvalidInputError("transcribe needs --utterance-id or --features")
    context = None
    if hotwords or summary:
        context = ContextBundle(hotwords=tuple(dict.fromkeys(hotwords or ())), summary=summary)
    prompt = render_prompt(cfg.instruction, context)
    text, result = transcribe(bundle, features, prompt, cfg.eval.generation())
    return {"utterance_id": utt_id, "model_stage": stage, "prompt": prompt,
            "transcript": text, "termination": result.reason}


# -------------------------------------------------------------------- evaluate

def _eval_condition(bundle: ModelBundle, manifest: Manifest,
                    context_by_id: dict[str, ContextBundle],
                    condition: str, cfg: RunConfig) -> tuple[SetMetrics, list[dict]]:
    gen = cfg.eval.generation()
    hall_cfg = cfg.eval.hallucination()
    refs, hyps, bundles, details = [], [], [], []
    flagged = 0
    use_context = condition == CONDITION_WITH
    for utt in manifest:
        context = context_by_id.get(utt.id)
        prompt = render_prompt(cfg.instruction, context if use_context else None)
        text, result = transcribe(bundle, utt.features, prompt, gen)
        ref = normalize_and_tokenize(utt.transcript)
        hyp = normalize_and_tokenize(text)
        flags = hallucination_flags(ref, hyp, result.flags, hall_cfg)
        flagged += int(flags.any)
        refs.append(ref)
        hyps.append(hyp)
        bundles.append(context)
        details.append({"id": utt.id, "condition": condition,
                        "ref": utt.transcript, "hyp": text,
                        "termination": result.reason,
                        "repetition_flag": flags.repetition, "length_flag": flags.length})
    wer_result = wer(refs, hyps)
    recall = hotword_recall(refs, hyps, bundles)
    type_rate = recall.type_rate
    metrics = SetMetrics(set_name=cfg.eval.set_name, condition=condition,
                         wer_percent=wer_result.percent, recall_percent=recall.percent,
                         utterance_count=len(manifest), hallucination_count=flagged,
                         recall_type_percent=None if type_rate is None
                         else round(type_rate * 100.0, 2))
    return metrics, details


def _context_bundles_for_eval(workspace: Path, cfg: RunConfig) -> dict[str, ContextBundle]:
    forged = _load_split(workspace, "test", context=True)
    _, inventory = toy_vocabulary(cfg.corpus.split_spec("test"))
    out: dict[str, ContextBundle] = {}
    for utt in forged:
        bundle = utt.context
        if bundle is None:
            continue
        if cfg.eval.distractor_count > 0:
            transcript_terms = set(utt.transcript.split())
            pool = [t for t in inventory
                    if t not in transcript_terms and t not in bundle.hotwords]
            count = min(cfg.eval.distractor_count, len(pool))
            if count:
                utt_seed = cfg.eval.distractor_seed + zlib.crc32(utt.id.encode()) % 10_000
                bundle = add_distractors(bundle, pool, count, seed=utt_seed)
        out[utt.id] = bundle
    return out


def evaluate_command(workspace: Path, cfg: RunConfig, context_mode: str,
                     force: bool = False, model_stage: str | None = None) -> CommandResult:
    if context_mode not in EVAL_MODES:
        raise InvalidInputError(f"context mode must be one of {EVAL_MODES}, got {context_mode!r}")
    workspace = Path(workspace)
    run_dir = workspace / "eval" / context_mode
    digest = _digest(cfg, {"mode": context_mode, "model_stage": model_stage})
    skipped = _maybe_skip(run_dir, f"evaluate --context {context_mode}", digest, force)
    if skipped:
        return skipped
    bundle, stage = _latest_bundle(workspace, model_stage)
    manifest = _load_split(workspace, "test")
    context_by_id: dict[str, ContextBundle] = {}
    if context_mode in ("on", "both"):
        context_by_id = _context_bundles_for_eval(workspace, cfg)
    conditions = {"on": [CONDITION_WITH], "off": [CONDITION_WITHOUT],
                  "both": [CONDITION_WITHOUT, CONDITION_WITH]}[context_mode]
    rows: list[SetMetrics] = []
    details: list[dict] = []
    for condition in conditions:
        metrics, cond_details = _eval_condition(bundle, manifest, context_by_id, condition, cfg)
        rows.append(metrics)
        details.extend(cond_details)
    report = aggregate(rows)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_report(report, run_dir / "report.jsonl", run_dir / "report.txt")
    with (run_dir / "details.jsonl").open("w", encoding="utf-8") as f:
        for record in details:
            f.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
    outputs = {"report": str(run_dir / "report.jsonl"), "table": str(run_dir / "report.txt"),
               "details": str(run_dir / "details.jsonl")}
    metrics_payload = {"model_stage": stage, "records": report_records(report)}
    return _mark_done(run_dir, f"evaluate --context {context_mode}", digest, cfg,
                      outputs, metrics_payload)
