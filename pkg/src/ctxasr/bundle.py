"""ModelBundle: encoder + adapter + decoder + tokenizer under one roof.

Parameters are checkpointed under distinct namespaces (encoder/, adapter/,
decoder/) so the trainer's freeze accounting can address whole components by
prefix. Stage provenance travels with the bundle: each completed pipeline
stage appends its name, and later stages check their prerequisites there.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .adapter import Adapter, AdapterConfig, adapt
from .checkpoint import read_container, write_container
from .corpus import FeatureMatrix
from .decoder import DecoderConfig, GenerationConfig, GenerationResult, TextDecoder, generate
from .encoder import ConformerEncoder, EncoderConfig, EncoderExport, load_encoder_from_export
from .errors import CheckpointError, InvalidConfigError
from .lora import LoraSpec, inject_lora
from .nnutil import seed_all
from .tokenizer import Tokenizer

STAGE_AED_EXPORT = "aed_export"
STAGE_LM_PRETRAIN = "lm_pretrain"


@dataclass
class ModelBundle:
    encoder: ConformerEncoder
    adapter: Adapter
    decoder: TextDecoder
    tokenizer: Tokenizer
    encoder_cfg: EncoderConfig
    adapter_cfg: AdapterConfig
    decoder_cfg: DecoderConfig
    completed_stages: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.adapter_cfg.in_dim != self.encoder_cfg.model_dim:
            raise InvalidConfigError("adapter in_dim must equal encoder model_dim")
        if self.adapter_cfg.out_dim != self.decoder_cfg.embed_dim:
            raise InvalidConfigError("adapter out_dim must equal decoder embed_dim")

    @property
    def lora_spec(self) -> LoraSpec | None:
        return self.decoder.lora_spec

    def modules(self) -> dict[str, torch.nn.Module]:
        return {"encoder": self.encoder, "adapter": self.adapter, "decoder": self.decoder}

    def named_parameters(self):
        """(prefixed name, parameter) across all components."""
        for prefix, module in self.modules().items():
            for name, param in module.named_parameters():
                yield f"{prefix}/{name}", param

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.detach().cpu().numpy().astype(np.float32, copy=True)
                for name, p in self.named_parameters()}


def build_bundle(encoder_init: EncoderExport | EncoderConfig,
                 adapter_cfg: AdapterConfig,
                 decoder_cfg: DecoderConfig,
                 tokenizer: Tokenizer,
                 seed: int = 0) -> ModelBundle:
    """Assemble a fresh bundle; encoder optionally from an AED export."""
    seed_all(seed)
    stages: list[str] = []
    if isinstance(encoder_init, EncoderExport):
        encoder = load_encoder_from_export(encoder_init)
        encoder_cfg = encoder_init.config
        stages.append(STAGE_AED_EXPORT)
    else:
        encoder = ConformerEncoder(encoder_init)
        encoder_cfg = encoder_init
    adapter = Adapter(adapter_cfg)
    decoder = TextDecoder(decoder_cfg, tokenizer.vocab_size)
    return ModelBundle(encoder=encoder, adapter=adapter, decoder=decoder,
                       tokenizer=tokenizer, encoder_cfg=encoder_cfg,
                       adapter_cfg=adapter_cfg, decoder_cfg=decoder_cfg,
                       completed_stages=stages)


def save_bundle(path: Path, bundle: ModelBundle) -> Path:
    meta = {
        "encoder_cfg": asdict(bundle.encoder_cfg),
        "adapter_cfg": asdict(bundle.adapter_cfg),
        "decoder_cfg": asdict(bundle.decoder_cfg),
        "tokenizer": bundle.tokenizer.to_json(),
        "lora_spec": (
            {"rank": bundle.lora_spec.rank, "alpha": bundle.lora_spec.alpha,
             "targets": list(bundle.lora_spec.targets)}
            if bundle.lora_spec else None),
        "completed_stages": list(bundle.completed_stages),
    }
    return write_container(path, "bundle", meta, bundle.state_arrays())


def load_bundle(path: Path) -> ModelBundle:
    _, meta, arrays = read_container(path, expected_kind="bundle")
    tokenizer = Tokenizer.from_json(meta["tokenizer"])
    bundle = build_bundle(EncoderConfig(**meta["encoder_cfg"]),
                          AdapterConfig(**meta["adapter_cfg"]),
                          DecoderConfig(**meta["decoder_cfg"]),
                          tokenizer)
    if meta.get("lora_spec"):
        spec = meta["lora_spec"]
        inject_lora(bundle.decoder, LoraSpec(rank=spec["rank"], alpha=spec["alpha"],
                                             targets=tuple(spec["targets"])))
    bundle.completed_stages = list(meta.get("completed_stages", []))
    expected = {name: p for name, p in bundle.named_parameters()}
    if set(expected) != set(arrays):
        diff = sorted(set(expected) ^ set(arrays))
        raise CheckpointError(f"bundle parameter names mismatch: {diff[:5]}")
    with torch.no_grad():
        for name, param in expected.items():
            arr = arrays[name]
            if tuple(arr.shape) != tuple(param.shape):
                raise CheckpointError(
                    f"bundle shape mismatch at {name}: {arr.shape} vs {tuple(param.shape)}")
            param.copy_(torch.from_numpy(arr))
    return bundle


def save_encoder_export(path: Path, export: EncoderExport) -> Path:
    meta = {"encoder_cfg": asdict(export.config)}
    return write_container(path, "encoder_export", meta, export.state)


def load_encoder_export(path: Path) -> EncoderExport:
    _, meta, arrays = read_container(path, expected_kind="encoder_export")
    return EncoderExport(config=EncoderConfig(**meta["encoder_cfg"]), state=arrays)


@torch.no_grad()
def transcribe(bundle: ModelBundle, features: FeatureMatrix,
               prompt_text: str, gen: GenerationConfig) -> tuple[str, GenerationResult]:
    """Encode, adapt, and greedily decode one utterance under a prompt."""
    bundle.encoder.eval()
    bundle.adapter.eval()
    enc = bundle.encoder.encode(features)
    audio, _ = adapt(enc, bundle.adapter)
    prompt_tokens = bundle.tokenizer.encode(prompt_text) if prompt_text else []
    result = generate(bundle.decoder, prompt_tokens, audio, gen,
                      bos_id=bundle.tokenizer.bos_id, eos_id=bundle.tokenizer.eos_id)
    return bundle.tokenizer.decode(result.tokens), result
