"""Whitespace word tokenizer with reserved special ids.

The toy language is closed-vocabulary, so encode() rejects out-of-vocabulary
words with a diagnostic instead of guessing. Special ids occupy the first
slots: pad, begin, end, and an audio-slot sentinel reserved for prompt
templates that mark where audio embeddings get spliced.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import InvalidInputError

PAD_TOKEN = "<pad>"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
AUDIO_TOKEN = "<audio>"
SPECIAL_TOKENS = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, AUDIO_TOKEN)


@dataclass(frozen=True)
class Tokenizer:
    words: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(set(self.words)) != len(self.words):
            raise InvalidInputError("tokenizer vocabulary contains duplicates")
        if any(w in SPECIAL_TOKENS for w in self.words):
            raise InvalidInputError("text tokens must not collide with special tokens")
        if any((not w) or any(c.isspace() for c in w) for w in self.words):
            raise InvalidInputError("text tokens must be non-empty and whitespace-free")
        object.__setattr__(self, "_to_id",
                           {w: i + len(SPECIAL_TOKENS) for i, w in enumerate(self.words)})

    @classmethod
    def from_texts(cls, texts: Iterable[str], extra_tokens: Sequence[str] = ()) -> "Tokenizer":
        vocab = {w for text in texts for w in text.split()}
        vocab.update(extra_tokens)
        return cls(words=tuple(sorted(vocab)))

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def audio_id(self) -> int:
        return 3

    @property
    def vocab_size(self) -> int:
        return len(self.words) + len(SPECIAL_TOKENS)

    def has(self, word: str) -> bool:
        return word in self._to_id  # type: ignore[attr-defined]

    def encode(self, text: str) -> list[int]:
        to_id = self._to_id  # type: ignore[attr-defined]
        ids: list[int] = []
        unknown: list[str] = []
        for w in text.split():
            if w in to_id:
                ids.append(to_id[w])
            else:
                unknown.append(w)
        if unknown:
            raise InvalidInputError(f"out-of-vocabulary tokens: {sorted(set(unknown))[:8]}")
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        words = []
        for i in ids:
            if i < len(SPECIAL_TOKENS):
                continue
            idx = i - len(SPECIAL_TOKENS)
            if idx >= len(self.words):
                raise InvalidInputError(f"token id out of range: {i}")
            words.append(self.words[idx])
        return " ".join(words)

    def token(self, token_id: int) -> str:
        if 0 <= token_id < len(SPECIAL_TOKENS):
            return SPECIAL_TOKENS[token_id]
        return self.words[token_id - len(SPECIAL_TOKENS)]

    def to_json(self) -> str:
        return json.dumps({"words": list(self.words)}, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, payload: str) -> "Tokenizer":
        data = json.loads(payload)
        return cls(words=tuple(data["words"]))
