"""Contextual data construction: hotword lists, video-level summaries, and
prompt rendering.

Keyword and summary generation go through a pluggable text-LLM client; when
no client is configured or the client keeps failing, deterministic offline
extractors take over (rarest-token ranking for hotwords, leading-sentence
extraction for summaries) and the bundle records its provenance. Either way a
post-filter guarantees every hotword occurs verbatim in its transcript.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, replace
from typing import Protocol, Sequence

import numpy as np

from .corpus import ContextBundle, Manifest, Utterance
from .errors import InvalidConfigError, InvalidInputError, LlmClientError

PROMPT_TEMPLATE_VERSION = 1

#: Tokens the prompt template itself introduces; the tokenizer must know them.
TEMPLATE_TOKENS = ("hotwords", "summary", ":", ",")

DEFAULT_INSTRUCTION = "transcribe the audio"

SOURCE_CLIENT = "client"
SOURCE_FALLBACK = "fallback"
SOURCE_OFFLINE = "offline"


class LlmClient(Protocol):
    def complete(self, prompt: str) -> str: ...


@dataclass
class HttpLlmClient:
    """Text-completion client over a minimal HTTP contract.

    POSTs {"prompt": ...} to the endpoint and expects {"text": ...} back.
    Transport failures and 5xx responses are retried with exponential backoff
    before giving up with LlmClientError.
    """

    endpoint: str
    api_key: str | None = None
    timeout_s: float = 30.0
    max_retries: int = 3
    backoff_base_s: float = 0.5

    def complete(self, prompt: str) -> str:
        import httpx

        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error: Exception | None = None
        for attempt in range(self.max_retries):
            try:
                response = httpx.post(self.endpoint, json={"prompt": prompt},
                                      headers=headers, timeout=self.timeout_s)
                if response.status_code >= 500:
                    raise LlmClientError(f"server error {response.status_code}")
                response.raise_for_status()
                return str(response.json()["text"])
            except Exception as exc:  # noqa: BLE001 - any transport failure retries
                last_error = exc
                if attempt + 1 < self.max_retries:
                    time.sleep(self.backoff_base_s * 2 ** attempt)
        raise LlmClientError(f"llm endpoint failed after {self.max_retries} attempts: {last_error}")


@dataclass(frozen=True)
class ContextForgeConfig:
    max_hotwords: int = 4
    summary_max_tokens: int = 50
    stopwords: frozenset[str] = frozenset()
    hotword_prompt: str = "list the rare or domain-specific terms in this transcript: "
    summary_prompt: str = "write a one-line summary of this transcript: "

    def __post_init__(self) -> None:
        if self.max_hotwords < 1 or self.summary_max_tokens < 1:
            raise InvalidConfigError("max_hotwords and summary_max_tokens must be positive")


def normalize_term(term: str) -> str:
    """Canonical hotword form: collapse whitespace, drop delimiter characters."""
    cleaned = re.sub(r"[,\n\r]", " ", term)
    return " ".join(cleaned.split())


class ContextForge:
    """Builds context bundles over one corpus; holds its document frequencies."""

    def __init__(self, manifest: Manifest, config: ContextForgeConfig | None = None,
                 client: LlmClient | None = None) -> None:
        self.config = config or ContextForgeConfig()
        self.client = client
        self.document_frequency: dict[str, int] = {}
        for utt in manifest:
            for token in set(utt.transcript.split()):
                self.document_frequency[token] = self.document_frequency.get(token, 0) + 1

    # -- hotwords ---------------------------------------------------------

    def _offline_hotwords(self, transcript: str) -> list[str]:
        tokens = [t for t in dict.fromkeys(transcript.split())
                  if t not in self.config.stopwords]
        ranked = sorted(tokens, key=lambda t: (self.document_frequency.get(t, 0), t))
        return ranked[:self.config.max_hotwords]

    def _filter_terms(self, terms: Sequence[str], transcript: str) -> list[str]:
        # Post-filter contract: only terms that occur verbatim survive.
        words = transcript.split()
        text = " ".join(words)
        kept: list[str] = []
        for raw in terms:
            term = normalize_term(raw)
            if not term or term in kept:
                continue
            if len(term.split()) == 1:
                if term in words:
                    kept.append(term)
            elif f" {term} " in f" {text} ":
                kept.append(term)
            if len(kept) >= self.config.max_hotwords:
                break
        return kept

    def extract_hotwords(self, utterance: Utterance) -> tuple[list[str], str]:
        """(terms, provenance). Empty transcripts yield an empty list."""
        transcript = utterance.transcript.strip()
        if not transcript:
            return [], SOURCE_OFFLINE
        if self.client is None:
            return self._filter_terms(self._offline_hotwords(transcript), transcript), SOURCE_OFFLINE
        try:
            raw = self.client.complete(self.config.hotword_prompt + transcript)
            terms = [t for chunk in raw.splitlines() for t in chunk.split(",")]
            return self._filter_terms(terms, transcript), SOURCE_CLIENT
        except LlmClientError:
            return self._filter_terms(self._offline_hotwords(transcript), transcript), SOURCE_FALLBACK

    # -- summaries --------------------------------------------------------

    def _offline_summary(self, joined: str) -> str:
        sentences = [s.strip() for s in re.split(r"(?<=[.!?])\s+", joined) if s.strip()]
        out: list[str] = []
        budget = self.config.summary_max_tokens
        for sentence in sentences or [joined]:
            words = sentence.split()
            if not out and len(words) > budget:
                out = words[:budget]
                break
            if len(out) + len(words) > budget:
                break
            out.extend(words)
        return " ".join(out)

    def build_summary(self, group: list[Utterance]) -> tuple[str, str]:
        """Summarize one video group (utterances sharing a group_id)."""
        if not group:
            raise InvalidInputError("cannot summarize an empty utterance group")
        group_ids = {u.group_id for u in group}
        if len(group_ids) != 1:
            raise InvalidInputError(f"summary group mixes group_ids: {sorted(map(str, group_ids))}")
        joined = " ".join(u.transcript for u in group).strip()
        if self.client is None:
            return self._offline_summary(joined), SOURCE_OFFLINE
        try:
            summary = self.client.complete(self.config.summary_prompt + joined).strip()
            words = summary.split()
            if len(words) > self.config.summary_max_tokens:
                summary = " ".join(words[:self.config.summary_max_tokens])
            return summary, SOURCE_CLIENT
        except LlmClientError:
            return self._offline_summary(joined), SOURCE_FALLBACK

    # -- whole-manifest forging --------------------------------------------

    def forge_manifest(self, manifest: Manifest, *, with_summaries: bool = False,
                       max_in_flight: int = 1) -> Manifest:
        """Attach a context bundle to every utterance that yields hotwords.

        With a live client and ``max_in_flight`` > 1, extraction requests run
        concurrently up to that bound; all post-processing stays pure, so the
        output is identical either way.
        """
        summaries: dict[str | None, tuple[str, str]] = {}
        if with_summaries:
            groups: dict[str | None, list[Utterance]] = {}
            for utt in manifest:
                groups.setdefault(utt.group_id, []).append(utt)
            summaries = {gid: self.build_summary(group) for gid, group in groups.items()}
        if self.client is not None and max_in_flight > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
                extracted = list(pool.map(self.extract_hotwords, manifest.entries))
        else:
            extracted = [self.extract_hotwords(utt) for utt in manifest]
        entries: list[Utterance] = []
        for utt, (terms, source) in zip(manifest, extracted):
            summary = summaries.get(utt.group_id, (None, None))[0] if with_summaries else None
            if not terms and summary is None:
                continue
            bundle = ContextBundle(hotwords=tuple(terms), summary=summary, source=source)
            entries.append(Utterance(id=utt.id, features=utt.features,
                                     transcript=utt.transcript, group_id=utt.group_id,
                                     context=bundle, snr_db=utt.snr_db))
        return Manifest(entries=entries)


def add_distractors(bundle: ContextBundle, pool: Sequence[str], count: int,
                    seed: int) -> ContextBundle:
    """Merge ``count`` pool terms into the hotword list and reshuffle.

    The pool must be disjoint from the transcript's terms (caller's contract)
    and from the bundle itself; the sampled distractors are recorded only via
    ``distractor_count``.
    """
    candidates = [normalize_term(t) for t in dict.fromkeys(pool)]
    candidates = [t for t in candidates if t and t not in bundle.hotwords]
    if count < 0:
        raise InvalidInputError("distractor count must be non-negative")
    if count > len(candidates):
        raise InvalidInputError(
            f"distractor pool too small: need {count}, have {len(candidates)}")
    rng = np.random.default_rng(seed)
    picked = [candidates[int(i)] for i in rng.choice(len(candidates), size=count,
                                                     replace=False)] if count else []
    merged = list(bundle.hotwords) + picked
    order = rng.permutation(len(merged))
    return replace(bundle,
                   hotwords=tuple(merged[int(i)] for i in order),
                   distractor_count=bundle.distractor_count + count)


def render_prompt(instruction: str, bundle: ContextBundle | None = None) -> str:
    """Byte-stable prompt rendering (template v1).

    No bundle: the instruction alone. With a bundle: a ``hotwords :`` line
    (terms joined by `` , ``, order preserved) and, when present, a
    ``summary :`` line. Term normalization bans commas and newlines, so the
    rendering is injective over the prompt-visible bundle fields.
    """
    if bundle is None:
        return instruction
    terms = [normalize_term(t) for t in bundle.hotwords]
    lines = [instruction, ("hotwords : " + " , ".join(terms)).rstrip()]
    if bundle.summary is not None:
        lines.append("summary : " + " ".join(bundle.summary.split()))
    return "\n".join(lines)
