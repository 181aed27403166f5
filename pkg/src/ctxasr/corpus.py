"""Dataset layer: waveforms, log-mel features, SNR-controlled noise mixing,
synthetic toy corpora, and line-delimited manifests.

The toy corpus synthesizes feature matrices directly (one fixed pattern per
vocabulary token plus additive noise) so the training path never needs real
audio; waveform operations exist for ingestion and the augmentation tests.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InvalidConfigError, InvalidInputError

MANIFEST_SCHEMA_VERSION = 1
MANIFEST_FILENAME = "manifest.jsonl"
FEATURES_DIRNAME = "features"

#: Sentinel accepted by mix_noise_at_snr: no noise is added at all.
SNR_CLEAN = math.inf


@dataclass(frozen=True)
class Waveform:
    """Mono waveform with amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise InvalidInputError("waveform must be a non-empty 1-D array")
        if not np.all(np.isfinite(samples)):
            raise InvalidInputError("waveform contains non-finite samples")
        if float(np.max(np.abs(samples))) > 1.0 + 1e-9:
            raise InvalidInputError("waveform amplitudes must lie in [-1, 1]")
        if self.sample_rate_hz <= 0:
            raise InvalidInputError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", samples)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def energy(self) -> float:
        return float(np.sum(self.samples ** 2))


@dataclass(frozen=True)
class FeatureConfig:
    """Log-mel filter-bank front end: 80 bins, 25 ms window, 10 ms shift."""

    sample_rate_hz: int = 16_000
    num_mels: int = 80
    window_ms: float = 25.0
    shift_ms: float = 10.0
    fmin_hz: float = 0.0
    fmax_hz: float | None = None
    n_fft: int = 512
    floor: float = 1e-10

    def __post_init__(self) -> None:
        if self.num_mels < 1 or self.window_ms <= 0 or self.shift_ms <= 0:
            raise InvalidConfigError("feature config requires positive bins, window and shift")
        if self.window_length > self.n_fft:
            raise InvalidConfigError(
                f"n_fft={self.n_fft} shorter than window ({self.window_length} samples)")

    @property
    def window_length(self) -> int:
        return int(round(self.sample_rate_hz * self.window_ms / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate_hz * self.shift_ms / 1000.0))


@dataclass
class FeatureMatrix:
    """T x F feature frames plus the frame shift they were computed with."""

    frames: np.ndarray
    frame_shift_ms: float

    def __post_init__(self) -> None:
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise InvalidInputError("feature matrix must be 2-D with at least one frame")
        if not np.all(np.isfinite(frames)):
            raise InvalidInputError("feature matrix contains non-finite entries")
        if self.frame_shift_ms <= 0:
            raise InvalidInputError("frame_shift_ms must be positive")
        self.frames = frames

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def num_bins(self) -> int:
        return int(self.frames.shape[1])


def _mel_scale(hz: np.ndarray | float) -> np.ndarray | float:
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def _mel_to_hz(mel: np.ndarray) -> np.ndarray:
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def mel_filterbank(config: FeatureConfig) -> np.ndarray:
    """Triangular mel filters, shape (num_mels, n_fft // 2 + 1)."""
    fmax = config.fmax_hz if config.fmax_hz is not None else config.sample_rate_hz / 2.0
    mel_points = np.linspace(_mel_scale(config.fmin_hz), _mel_scale(fmax), config.num_mels + 2)
    hz_points = _mel_to_hz(mel_points)
    bin_freqs = np.fft.rfftfreq(config.n_fft, d=1.0 / config.sample_rate_hz)
    fb = np.zeros((config.num_mels, bin_freqs.size), dtype=np.float64)
    for m in range(config.num_mels):
        lo, mid, hi = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        up = (bin_freqs - lo) / max(mid - lo, 1e-12)
        down = (hi - bin_freqs) / max(hi - mid, 1e-12)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def mel_filter_edges(config: FeatureConfig) -> list[tuple[float, float]]:
    """(low, high) Hz passband per filter; used by tests to locate tones."""
    fmax = config.fmax_hz if config.fmax_hz is not None else config.sample_rate_hz / 2.0
    mel_points = np.linspace(_mel_scale(config.fmin_hz), _mel_scale(fmax), config.num_mels + 2)
    hz = _mel_to_hz(mel_points)
    return [(float(hz[m]), float(hz[m + 2])) for m in range(config.num_mels)]


def extract_features(waveform: Waveform, config: FeatureConfig | None = None) -> FeatureMatrix:
    """Log-mel filter-bank energies.

    Frame count is ceil(n_samples / hop): frames start every hop and the last
    window is right-padded with zeros, so no samples are dropped and frame
    count is monotone in duration.
    """
    cfg = config or FeatureConfig()
    if waveform.sample_rate_hz != cfg.sample_rate_hz:
        raise InvalidInputError(
            f"waveform rate {waveform.sample_rate_hz} != config rate {cfg.sample_rate_hz}")
    samples = waveform.samples
    hop = cfg.hop_length
    win = cfg.window_length
    num_frames = math.ceil(samples.size / hop)
    padded = np.zeros((num_frames - 1) * hop + win, dtype=np.float64)
    padded[:samples.size] = samples
    idx = np.arange(win)[None, :] + hop * np.arange(num_frames)[:, None]
    window = np.hanning(win)
    framed = padded[idx] * window[None, :]
    spectrum = np.fft.rfft(framed, n=cfg.n_fft, axis=1)
    power = np.abs(spectrum) ** 2
    mel = power @ mel_filterbank(cfg).T
    logmel = np.log(np.maximum(mel, cfg.floor))
    return FeatureMatrix(frames=logmel.astype(np.float32), frame_shift_ms=cfg.shift_ms)


def mix_noise_at_snr(clean: Waveform, noise: Waveform, snr_db: float,
                     *, loop_noise: bool = True) -> Waveform:
    """Add noise scaled so 10*log10(E_clean / E_scaled_noise) equals snr_db.

    ``snr_db=math.inf`` is the no-noise sentinel and returns the clean signal
    unchanged. The mix is hard-clipped to [-1, 1] (documented policy); callers
    wanting an exactly additive result must leave headroom.
    """
    if snr_db == SNR_CLEAN:
        return Waveform(samples=clean.samples.copy(), sample_rate_hz=clean.sample_rate_hz)
    if clean.sample_rate_hz != noise.sample_rate_hz:
        raise InvalidInputError("clean and noise sample rates differ")
    n = clean.samples.size
    noise_samples = noise.samples
    if noise_samples.size < n:
        if not loop_noise:
            raise InvalidInputError("noise shorter than clean and looping disabled")
        reps = math.ceil(n / noise_samples.size)
        noise_samples = np.tile(noise_samples, reps)
    noise_samples = noise_samples[:n]
    e_clean = float(np.sum(clean.samples ** 2))
    e_noise = float(np.sum(noise_samples ** 2))
    if e_clean <= 0.0 or e_noise <= 0.0:
        raise InvalidInputError("zero-energy clean or noise segment; SNR undefined")
    alpha = math.sqrt(e_clean / (e_noise * 10.0 ** (snr_db / 10.0)))
    mixed = np.clip(clean.samples + alpha * noise_samples, -1.0, 1.0)
    return Waveform(samples=mixed, sample_rate_hz=clean.sample_rate_hz)


def measured_snr_db(mixed: Waveform, clean: Waveform) -> float:
    """Energy-ratio SNR of an additive mix, recovered as E_clean / E_residual."""
    residual = mixed.samples - clean.samples
    e_res = float(np.sum(residual ** 2))
    e_clean = float(np.sum(clean.samples ** 2))
    if e_res <= 0.0:
        return math.inf
    return 10.0 * math.log10(e_clean / e_res)


@dataclass(frozen=True)
class ContextBundle:
    """Contextual cues attached to an utterance: hotword list and/or summary.

    ``distractor_count`` records how many of the listed hotwords were injected
    as negatives (terms absent from the audio); ``source`` is provenance for
    how the bundle was produced (llm client vs offline fallback).
    """

    hotwords: tuple[str, ...] = ()
    summary: str | None = None
    distractor_count: int = 0
    source: str | None = None

    def __post_init__(self) -> None:
        terms = tuple(self.hotwords)
        if any(not t for t in terms):
            raise InvalidInputError("hotword terms must be non-empty")
        if len(set(terms)) != len(terms):
            raise InvalidInputError("hotword terms must be deduplicated")
        if not (0 <= self.distractor_count <= len(terms)):
            raise InvalidInputError("distractor_count must lie in [0, len(hotwords)]")
        object.__setattr__(self, "hotwords", terms)


@dataclass
class Utterance:
    id: str
    features: FeatureMatrix
    transcript: str
    group_id: str | None = None
    context: ContextBundle | None = None
    snr_db: float | None = None


@dataclass
class Manifest:
    entries: list[Utterance] = field(default_factory=list)
    schema_version: int = MANIFEST_SCHEMA_VERSION

    def __post_init__(self) -> None:
        ids = [u.id for u in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise InvalidInputError(f"duplicate utterance ids in manifest: {dupes[:5]}")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def transcripts(self) -> list[str]:
        return [u.transcript for u in self.entries]

    def save(self, directory: Path) -> Path:
        """Write manifest.jsonl plus one .npy feature payload per utterance.

        Record fields: id, features_path, transcript, group_id?, hotwords?,
        summary?, distractor_count?, snr_db?. The first line is a header
        carrying schema_version and the corpus-wide frame shift.
        """
        directory = Path(directory)
        feat_dir = directory / FEATURES_DIRNAME
        feat_dir.mkdir(parents=True, exist_ok=True)
        shifts = {u.features.frame_shift_ms for u in self.entries}
        if len(shifts) > 1:
            raise InvalidInputError(f"mixed frame shifts in one manifest: {sorted(shifts)}")
        header = {
            "schema_version": self.schema_version,
            "frame_shift_ms": shifts.pop() if shifts else 10.0,
        }
        manifest_path = directory / MANIFEST_FILENAME
        with manifest_path.open("w", encoding="utf-8") as f:
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for u in self.entries:
                rel = f"{FEATURES_DIRNAME}/{u.id}.npy"
                np.save(feat_dir / f"{u.id}.npy", u.features.frames)
                record: dict = {
                    "id": u.id,
                    "features_path": rel,
                    "transcript": u.transcript,
                }
                if u.group_id is not None:
                    record["group_id"] = u.group_id
                if u.context is not None:
                    record["hotwords"] = list(u.context.hotwords)
                    if u.context.summary is not None:
                        record["summary"] = u.context.summary
                    if u.context.distractor_count:
                        record["distractor_count"] = u.context.distractor_count
                    if u.context.source is not None:
                        record["context_source"] = u.context.source
                if u.snr_db is not None:
                    record["snr_db"] = u.snr_db
                f.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
        return manifest_path

    @classmethod
    def load(cls, path: Path) -> "Manifest":
        """Read a manifest directory or manifest.jsonl file, features included."""
        path = Path(path)
        manifest_path = path / MANIFEST_FILENAME if path.is_dir() else path
        if not manifest_path.exists():
            raise InvalidInputError(f"manifest not found: {manifest_path}")
        base = manifest_path.parent
        lines = manifest_path.read_text(encoding="utf-8").splitlines()
        if not lines:
            raise InvalidInputError(f"empty manifest file: {manifest_path}")
        header = json.loads(lines[0])
        version = header.get("schema_version")
        if version != MANIFEST_SCHEMA_VERSION:
            raise InvalidInputError(f"unsupported manifest schema_version: {version}")
        shift = float(header.get("frame_shift_ms", 10.0))
        entries: list[Utterance] = []
        for line in lines[1:]:
            if not line.strip():
                continue
            rec = json.loads(line)
            feat_path = base / rec["features_path"]
            if not feat_path.exists():
                raise InvalidInputError(f"feature payload missing: {feat_path}")
            frames = np.load(feat_path)
            context = None
            if "hotwords" in rec or "summary" in rec:
                context = ContextBundle(
                    hotwords=tuple(rec.get("hotwords", ())),
                    summary=rec.get("summary"),
                    distractor_count=int(rec.get("distractor_count", 0)),
                    source=rec.get("context_source"),
                )
            entries.append(Utterance(
                id=rec["id"],
                features=FeatureMatrix(frames=frames, frame_shift_ms=shift),
                transcript=rec["transcript"],
                group_id=rec.get("group_id"),
                context=context,
                snr_db=rec.get("snr_db"),
            ))
        return cls(entries=entries, schema_version=version)


@dataclass(frozen=True)
class ToyCorpusSpec:
    """Generator config for the synthetic token-pattern corpus.

    Every vocabulary token maps to a fixed random feature pattern of
    ``frames_per_token`` frames; utterances are pattern concatenations plus
    white noise, so nearest-pattern classification recovers transcripts. With
    ``homophone_hotwords`` each hotword reuses the pattern of a designated
    common word: the audio alone is then ambiguous and only context can
    disambiguate, which is the regime the contextual stage trains for.
    """

    vocab_size: int = 24
    hotword_count: int = 8
    utterance_count: int = 200
    min_tokens: int = 3
    max_tokens: int = 8
    hotword_fraction: float = 0.3
    hotword_occurrences: int = 1
    group_count: int = 10
    frames_per_token: int = 8
    feature_dim: int = 40
    pattern_scale: float = 1.0
    noise_std: float = 0.05
    frame_shift_ms: float = 10.0
    homophone_hotwords: bool = False

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise InvalidConfigError(f"vocabulary must have at least 2 tokens, got {self.vocab_size}")
        if self.hotword_count < 0 or self.hotword_count > self.vocab_size:
            raise InvalidConfigError("hotword_count must lie in [0, vocab_size]")
        if not (0 <= self.hotword_fraction <= 1):
            raise InvalidConfigError("hotword_fraction must lie in [0, 1]")
        if self.min_tokens < 1 or self.max_tokens < self.min_tokens:
            raise InvalidConfigError("need 1 <= min_tokens <= max_tokens")
        if self.utterance_count < 1 or self.group_count < 1:
            raise InvalidConfigError("utterance_count and group_count must be positive")
        if self.frames_per_token < 1 or self.feature_dim < 1:
            raise InvalidConfigError("frames_per_token and feature_dim must be positive")


def toy_vocabulary(spec: ToyCorpusSpec) -> tuple[list[str], list[str]]:
    """(common words, hotwords) for a generator spec."""
    common = [f"w{i:02d}" for i in range(spec.vocab_size)]
    hotwords = [f"hw{i:02d}" for i in range(spec.hotword_count)]
    return common, hotwords


def homophone_partners(spec: ToyCorpusSpec) -> dict[str, str]:
    """hotword -> common word whose pattern it shares (homophone mode only)."""
    common, hotwords = toy_vocabulary(spec)
    return {hw: common[i % len(common)] for i, hw in enumerate(hotwords)}


def token_patterns(spec: ToyCorpusSpec, pattern_seed: int) -> dict[str, np.ndarray]:
    """Deterministic per-token feature patterns, shape (frames_per_token, F)."""
    common, hotwords = toy_vocabulary(spec)
    rng = np.random.default_rng(pattern_seed)
    patterns: dict[str, np.ndarray] = {}
    for token in common + hotwords:
        patterns[token] = (rng.standard_normal((spec.frames_per_token, spec.feature_dim))
                           * spec.pattern_scale).astype(np.float32)
    if spec.homophone_hotwords:
        for hw, partner in homophone_partners(spec).items():
            patterns[hw] = patterns[partner].copy()
    return patterns


def _sample_tokens(rng: np.random.Generator, words: list[str], length: int) -> list[str]:
    # Reject 3+ consecutive repeats so references never trip the repetition guard.
    tokens: list[str] = []
    while len(tokens) < length:
        tok = words[int(rng.integers(len(words)))]
        if len(tokens) >= 2 and tokens[-1] == tok and tokens[-2] == tok:
            continue
        tokens.append(tok)
    return tokens


def synth_toy_corpus(spec: ToyCorpusSpec, seed: int, *,
                     pattern_seed: int | None = None,
                     id_prefix: str = "utt") -> Manifest:
    """Generate a deterministic toy manifest.

    ``pattern_seed`` defaults to ``seed``; splits of one corpus must share it
    so all manifests speak the same feature language. The hotword fraction is
    exact by construction: round(fraction * count) utterances carry hotwords.
    """
    patterns = token_patterns(spec, seed if pattern_seed is None else pattern_seed)
    common, hotwords = toy_vocabulary(spec)
    partners = homophone_partners(spec) if spec.homophone_hotwords else {}
    rng = np.random.default_rng(seed)

    n = spec.utterance_count
    tagged_count = int(round(spec.hotword_fraction * n)) if hotwords else 0
    tagged = np.zeros(n, dtype=bool)
    tagged[rng.permutation(n)[:tagged_count]] = True

    entries: list[Utterance] = []
    for i in range(n):
        length = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
        tokens = _sample_tokens(rng, common, length)
        if tagged[i]:
            hotword = hotwords[int(rng.integers(len(hotwords)))]
            partner = partners.get(hotword)
            if partner is not None:
                # A homophone pair inside one utterance would be unresolvable
                # even with context; keep the partner word out.
                tokens = [t for t in tokens if t != partner] or _sample_tokens(
                    rng, [w for w in common if w != partner], 1)
            occurrences = min(spec.hotword_occurrences, max(1, len(tokens)))
            positions = rng.choice(len(tokens), size=occurrences, replace=False)
            for pos in np.sort(positions):
                tokens[int(pos)] = hotword
        frames = np.concatenate([patterns[t] for t in tokens], axis=0)
        frames = frames + rng.normal(0.0, spec.noise_std, frames.shape)
        group = f"vid{(i * spec.group_count) // n:03d}"
        entries.append(Utterance(
            id=f"{id_prefix}-{i:05d}",
            features=FeatureMatrix(frames=frames.astype(np.float32),
                                   frame_shift_ms=spec.frame_shift_ms),
            transcript=" ".join(tokens),
            group_id=group,
        ))
    return Manifest(entries=entries)


def with_utterance_count(spec: ToyCorpusSpec, count: int, **overrides) -> ToyCorpusSpec:
    return replace(spec, utterance_count=count, **overrides)


def read_wav(path: Path) -> Waveform:
    """Read a mono PCM16 WAV file into a normalized waveform."""
    import wave

    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"wav file not found: {path}")
    with wave.open(str(path), "rb") as f:
        if f.getsampwidth() != 2:
            raise InvalidInputError(f"only 16-bit PCM supported, got width {f.getsampwidth()}")
        if f.getnchannels() != 1:
            raise InvalidInputError(f"only mono audio supported, got {f.getnchannels()} channels")
        raw = f.readframes(f.getnframes())
        rate = f.getframerate()
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples=samples, sample_rate_hz=rate)


def ingest_utterances(records: list[dict], feature_config: FeatureConfig,
                      base_dir: Path) -> Manifest:
    """Build a manifest from raw records.

    Each record carries ``id`` and ``transcript`` plus either ``wav`` (PCM16
    file, features extracted here) or ``features`` (precomputed .npy matrix).
    Optional ``noise_wav`` + ``snr_db`` mix noise into the audio before
    feature extraction and record the SNR on the utterance.
    """
    base_dir = Path(base_dir)
    entries: list[Utterance] = []
    for rec in records:
        if "id" not in rec or "transcript" not in rec:
            raise InvalidInputError(f"ingest record needs id and transcript: {rec}")
        snr_db = rec.get("snr_db")
        if "wav" in rec:
            wav = read_wav(base_dir / rec["wav"])
            if "noise_wav" in rec:
                if snr_db is None:
                    raise InvalidInputError(f"record {rec['id']}: noise_wav without snr_db")
                noise = read_wav(base_dir / rec["noise_wav"])
                wav = mix_noise_at_snr(wav, noise, float(snr_db))
            features = extract_features(wav, feature_config)
        elif "features" in rec:
            frames = np.load(base_dir / rec["features"])
            features = FeatureMatrix(frames=frames, frame_shift_ms=feature_config.shift_ms)
        else:
            raise InvalidInputError(f"record {rec['id']} needs a wav or features field")
        entries.append(Utterance(id=rec["id"], features=features,
                                 transcript=rec["transcript"],
                                 group_id=rec.get("group_id"),
                                 snr_db=float(snr_db) if snr_db is not None else None))
    return Manifest(entries=entries)
