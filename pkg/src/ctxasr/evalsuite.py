"""Transcription scoring: mixed-unit WER, hotword recall, hallucination flags.

Scoring units are deliberately script-aware so one metric serves Chinese and
English text: CJK ideographs count as single units, Latin/digit runs as whole
words. WER is corpus-pooled (error counts summed before dividing by total
reference length), which is the convention used throughout; the per-utterance
mean is also exposed because the two disagree on skewed corpora.
"""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import InvalidInputError

REPORT_SCHEMA_VERSION = 1

CONDITION_WITHOUT = "w/o context"
CONDITION_WITH = "w/ context"

# CJK ideograph blocks treated as one scoring unit per codepoint.
_CJK_RANGES = (
    (0x3400, 0x4DBF),   # Extension A
    (0x4E00, 0x9FFF),   # Unified Ideographs
    (0xF900, 0xFAFF),   # Compatibility Ideographs
)


def _is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _CJK_RANGES)


@dataclass(frozen=True)
class ScoringTokens:
    """Normalized scoring units plus the normalized text they came from."""

    units: tuple[str, ...]
    normalized_text: str

    def __len__(self) -> int:
        return len(self.units)


def normalize_and_tokenize(text: str) -> ScoringTokens:
    """Normalize text and split it into scoring units.

    Rules (idempotent by construction):
      * NFKC-normalize, then casefold.
      * CJK ideographs (blocks listed in ``_CJK_RANGES``) become single units.
      * Runs of other letters/digits become whole-word units.
      * Every remaining character (punctuation, whitespace, symbols) is a
        separator and is dropped.
    """
    folded = unicodedata.normalize("NFKC", text).casefold()
    units: list[str] = []
    current: list[str] = []
    for ch in folded:
        if _is_cjk(ch):
            if current:
                units.append("".join(current))
                current = []
            units.append(ch)
        elif ch.isalnum():
            current.append(ch)
        else:
            if current:
                units.append("".join(current))
                current = []
    if current:
        units.append("".join(current))
    return ScoringTokens(units=tuple(units), normalized_text=" ".join(units))


def _units(x: ScoringTokens | Sequence[str]) -> tuple[str, ...]:
    if isinstance(x, ScoringTokens):
        return x.units
    return tuple(x)


@dataclass(frozen=True)
class AlignedPair:
    """One step of an alignment: op is match/sub/del/ins."""

    ref: str | None
    hyp: str | None
    op: str


@dataclass(frozen=True)
class Alignment:
    substitutions: int
    deletions: int
    insertions: int
    matches: int
    pairs: tuple[AlignedPair, ...]

    @property
    def distance(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def align(ref: ScoringTokens | Sequence[str], hyp: ScoringTokens | Sequence[str]) -> Alignment:
    """Minimal-cost Levenshtein alignment with unit costs.

    Ties during backtrace are broken deterministically: substitution is
    preferred over deletion, deletion over insertion.
    """
    r = _units(ref)
    h = _units(hyp)
    n, m = len(r), len(h)
    # dist[i][j]: cost of aligning r[:i] with h[:j].
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dist[i][0] = i
    for j in range(1, m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        row = dist[i]
        prev = dist[i - 1]
        ri = r[i - 1]
        for j in range(1, m + 1):
            sub = prev[j - 1] + (0 if ri == h[j - 1] else 1)
            dele = prev[j] + 1
            ins = row[j - 1] + 1
            row[j] = min(sub, dele, ins)

    pairs: list[AlignedPair] = []
    subs = dels = inss = matches = 0
    i, j = n, m
    while i > 0 or j > 0:
        cost = dist[i][j]
        if i > 0 and j > 0 and cost == dist[i - 1][j - 1] + (0 if r[i - 1] == h[j - 1] else 1):
            if r[i - 1] == h[j - 1]:
                pairs.append(AlignedPair(r[i - 1], h[j - 1], "match"))
                matches += 1
            else:
                pairs.append(AlignedPair(r[i - 1], h[j - 1], "sub"))
                subs += 1
            i -= 1
            j -= 1
        elif i > 0 and cost == dist[i - 1][j] + 1:
            pairs.append(AlignedPair(r[i - 1], None, "del"))
            dels += 1
            i -= 1
        else:
            pairs.append(AlignedPair(None, h[j - 1], "ins"))
            inss += 1
            j -= 1
    pairs.reverse()
    return Alignment(
        substitutions=subs,
        deletions=dels,
        insertions=inss,
        matches=matches,
        pairs=tuple(pairs),
    )


@dataclass(frozen=True)
class WerResult:
    substitutions: int
    deletions: int
    insertions: int
    reference_length: int
    utterance_rates: tuple[float, ...] = field(default=(), repr=False)

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def rate(self) -> float:
        """Corpus-pooled error rate (canonical)."""
        return self.errors / self.reference_length

    @property
    def percent(self) -> float:
        return round(self.rate * 100.0, 2)

    @property
    def utterance_mean_percent(self) -> float:
        """Mean of per-utterance rates; differs from pooled on skewed corpora."""
        if not self.utterance_rates:
            return 0.0
        return round(sum(self.utterance_rates) / len(self.utterance_rates) * 100.0, 2)


def wer(refs: Sequence[ScoringTokens | Sequence[str]],
        hyps: Sequence[ScoringTokens | Sequence[str]]) -> WerResult:
    """Corpus-pooled word error rate over paired reference/hypothesis lists."""
    if len(refs) != len(hyps):
        raise InvalidInputError(f"paired lists required, got {len(refs)} refs vs {len(hyps)} hyps")
    total_ref = sum(len(_units(r)) for r in refs)
    if total_ref == 0:
        raise InvalidInputError("all references are empty; WER is undefined")
    subs = dels = inss = 0
    per_utt: list[float] = []
    for r, h in zip(refs, hyps):
        a = align(r, h)
        subs += a.substitutions
        dels += a.deletions
        inss += a.insertions
        rlen = len(_units(r))
        if rlen > 0:
            per_utt.append(a.distance / rlen)
    return WerResult(
        substitutions=subs,
        deletions=dels,
        insertions=inss,
        reference_length=total_ref,
        utterance_rates=tuple(per_utt),
    )


def cer(ref_texts: Sequence[str], hyp_texts: Sequence[str]) -> WerResult:
    """Character error rate: every normalized unit split into codepoints."""
    def chars(text: str) -> tuple[str, ...]:
        toks = normalize_and_tokenize(text)
        return tuple(ch for unit in toks.units for ch in unit)

    return wer([chars(t) for t in ref_texts], [chars(t) for t in hyp_texts])


def _count_occurrences(units: Sequence[str], needle: Sequence[str]) -> int:
    """Non-overlapping left-to-right occurrence count of needle in units."""
    if not needle:
        return 0
    count = 0
    i = 0
    n, k = len(units), len(needle)
    while i + k <= n:
        if tuple(units[i:i + k]) == tuple(needle):
            count += 1
            i += k
        else:
            i += 1
    return count


@dataclass(frozen=True)
class RecallResult:
    occurrence_hits: int
    occurrence_total: int
    type_hits: int
    type_total: int

    @property
    def rate(self) -> float | None:
        """Per-occurrence recall; None when no true hotword occurs in any reference."""
        if self.occurrence_total == 0:
            return None
        return self.occurrence_hits / self.occurrence_total

    @property
    def percent(self) -> float | None:
        r = self.rate
        return None if r is None else round(r * 100.0, 2)

    @property
    def type_rate(self) -> float | None:
        if self.type_total == 0:
            return None
        return self.type_hits / self.type_total


def hotword_recall(refs: Sequence[ScoringTokens],
                   hyps: Sequence[ScoringTokens],
                   bundles: Sequence["HotwordList | None"]) -> RecallResult:
    """Per-occurrence hotword recall.

    A listed term only enters the tally if it occurs in the reference, so
    distractors (terms absent from the audio) never move the rate. Hypothesis
    occurrences are capped per term at the reference count: over-generation
    cannot push recall above 1.
    """
    if not (len(refs) == len(hyps) == len(bundles)):
        raise InvalidInputError("refs, hyps and bundles must be aligned lists of equal length")
    occ_hits = occ_total = type_hits = type_total = 0
    for r, h, bundle in zip(refs, hyps, bundles):
        if bundle is None:
            continue
        terms = getattr(bundle, "hotwords", bundle)
        seen: set[tuple[str, ...]] = set()
        for term in terms:
            term_units = normalize_and_tokenize(term).units
            if not term_units or term_units in seen:
                continue
            seen.add(term_units)
            rc = _count_occurrences(r.units, term_units)
            if rc == 0:
                continue
            hc = _count_occurrences(h.units, term_units)
            occ_total += rc
            occ_hits += min(rc, hc)
            type_total += 1
            if hc > 0:
                type_hits += 1
    return RecallResult(occ_hits, occ_total, type_hits, type_total)


# hotword_recall accepts anything exposing .hotwords, or a bare term sequence.
HotwordList = Sequence[str]


@dataclass(frozen=True)
class HallucinationConfig:
    repetition_ngram: int = 4       # scan n-gram sizes 1..n
    repetition_limit: int = 4       # consecutive repeats that trip the flag
    length_ratio: float = 2.0       # |hyp| > ratio * |ref| trips the length flag

    def __post_init__(self) -> None:
        if self.repetition_ngram < 1 or self.repetition_limit < 2 or self.length_ratio <= 0:
            raise InvalidInputError("invalid hallucination config")


@dataclass(frozen=True)
class HallucinationFlags:
    repetition: bool
    length: bool
    generation: tuple[str, ...] = ()

    @property
    def any(self) -> bool:
        return self.repetition or self.length


def _has_consecutive_ngram_repeats(units: Sequence[str], n: int, m: int) -> bool:
    total = n * m
    for start in range(0, len(units) - total + 1):
        first = tuple(units[start:start + n])
        if all(tuple(units[start + k * n:start + (k + 1) * n]) == first for k in range(1, m)):
            return True
    return False


def hallucination_flags(ref: ScoringTokens,
                        hyp: ScoringTokens,
                        gen_flags: Iterable[str] = (),
                        config: HallucinationConfig | None = None) -> HallucinationFlags:
    """Flag repetitive or excessively long hypotheses.

    The decoder's own termination reasons are merged in: a generation-side
    repetition truncation marks the repetition flag even if the truncated text
    no longer exceeds the scan threshold.
    """
    cfg = config or HallucinationConfig()
    gen = tuple(gen_flags)
    repetition = any(
        _has_consecutive_ngram_repeats(hyp.units, n, cfg.repetition_limit)
        for n in range(1, cfg.repetition_ngram + 1)
    ) or "repetition" in gen
    length = len(hyp.units) > cfg.length_ratio * len(ref.units)
    return HallucinationFlags(repetition=repetition, length=length, generation=gen)


@dataclass(frozen=True)
class SetMetrics:
    """One row of the evaluation table: a test set under one condition.

    ``recall_percent`` is per-occurrence (canonical); the per-type variant
    rides along since neither convention is universal.
    """

    set_name: str
    condition: str
    wer_percent: float
    recall_percent: float | None = None
    utterance_count: int = 0
    hallucination_count: int = 0
    recall_type_percent: float | None = None


@dataclass(frozen=True)
class ConditionSummary:
    condition: str
    average_wer_percent: float
    average_recall_percent: float | None


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[SetMetrics, ...]
    averages: tuple[ConditionSummary, ...]
    wer_reduction_percent: int | None = None
    recall_gain_percent: int | None = None


def aggregate(rows: Sequence[SetMetrics]) -> EvalReport:
    """Average per-set rows per condition and compute relative deltas.

    Averages are unweighted means across sets (set-weighted, not
    utterance-weighted), rounded to 2 decimals. With both conditions present,
    the deltas are computed from the rounded averages and reported as whole
    percents: WER reduction (a-b)/a and recall gain (b-a)/a, where a is the
    no-context average.
    """
    if not rows:
        raise InvalidInputError("aggregate needs at least one row")
    by_condition: dict[str, list[SetMetrics]] = {}
    for row in rows:
        by_condition.setdefault(row.condition, []).append(row)
    if len(by_condition) > 2:
        raise InvalidInputError(f"at most two conditions supported, got {sorted(by_condition)}")
    if len(by_condition) == 2:
        sets = {cond: [r.set_name for r in rs] for cond, rs in by_condition.items()}
        names = list(sets.values())
        if sorted(names[0]) != sorted(names[1]):
            raise InvalidInputError(f"conditions cover different set lists: {sets}")
        if set(by_condition) != {CONDITION_WITHOUT, CONDITION_WITH}:
            raise InvalidInputError(
                f"two-condition reports must use {CONDITION_WITHOUT!r} and {CONDITION_WITH!r}")

    averages: list[ConditionSummary] = []
    for cond, rs in by_condition.items():
        wer_avg = round(sum(r.wer_percent for r in rs) / len(rs), 2)
        recalls = [r.recall_percent for r in rs if r.recall_percent is not None]
        recall_avg = round(sum(recalls) / len(recalls), 2) if recalls else None
        averages.append(ConditionSummary(cond, wer_avg, recall_avg))

    wer_reduction = recall_gain = None
    if len(by_condition) == 2:
        summary = {s.condition: s for s in averages}
        a = summary[CONDITION_WITHOUT]
        b = summary[CONDITION_WITH]
        if a.average_wer_percent > 0:
            wer_reduction = round(
                (a.average_wer_percent - b.average_wer_percent) / a.average_wer_percent * 100.0)
        if a.average_recall_percent and b.average_recall_percent is not None:
            recall_gain = round(
                (b.average_recall_percent - a.average_recall_percent)
                / a.average_recall_percent * 100.0)
    return EvalReport(
        rows=tuple(rows),
        averages=tuple(averages),
        wer_reduction_percent=wer_reduction,
        recall_gain_percent=recall_gain,
    )


def _fmt(value: float | None) -> str:
    return "-" if value is None else f"{value:.2f}"


def render_report_table(report: EvalReport) -> str:
    """Plain-text table: one row per set, columns per condition, average row."""
    conditions = [s.condition for s in report.averages]
    set_names: list[str] = []
    for row in report.rows:
        if row.set_name not in set_names:
            set_names.append(row.set_name)
    cell: dict[tuple[str, str], SetMetrics] = {
        (r.set_name, r.condition): r for r in report.rows
    }
    header = ["set"]
    for cond in conditions:
        header += [f"WER% ({cond})", f"Recall% ({cond})"]
    lines = []
    widths = [max(24, len(header[0]))] + [max(16, len(h)) for h in header[1:]]

    def emit(cells: list[str]) -> None:
        lines.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip())

    emit(header)
    emit(["-" * w for w in widths])
    for name in set_names:
        cells = [name]
        for cond in conditions:
            row = cell.get((name, cond))
            cells += [_fmt(row.wer_percent if row else None),
                      _fmt(row.recall_percent if row else None)]
        emit(cells)
    cells = ["Average"]
    for summary in report.averages:
        cells += [_fmt(summary.average_wer_percent), _fmt(summary.average_recall_percent)]
    emit(cells)
    if report.wer_reduction_percent is not None or report.recall_gain_percent is not None:
        delta_bits = []
        if report.wer_reduction_percent is not None:
            delta_bits.append(f"WER reduction {report.wer_reduction_percent}%")
        if report.recall_gain_percent is not None:
            delta_bits.append(f"recall gain {report.recall_gain_percent}%")
        emit(["relative delta", ", ".join(delta_bits)])
    return "\n".join(lines) + "\n"


def report_records(report: EvalReport) -> list[dict]:
    """Line-delimited record view of a report (deterministic ordering)."""
    records: list[dict] = [{"schema_version": REPORT_SCHEMA_VERSION, "kind": "header"}]
    for row in report.rows:
        records.append({
            "kind": "set",
            "set": row.set_name,
            "condition": row.condition,
            "wer_percent": row.wer_percent,
            "recall_percent": row.recall_percent,
            "recall_type_percent": row.recall_type_percent,
            "utterance_count": row.utterance_count,
            "hallucination_count": row.hallucination_count,
        })
    for summary in report.averages:
        records.append({
            "kind": "average",
            "condition": summary.condition,
            "wer_percent": summary.average_wer_percent,
            "recall_percent": summary.average_recall_percent,
        })
    if report.wer_reduction_percent is not None or report.recall_gain_percent is not None:
        records.append({
            "kind": "delta",
            "wer_reduction_percent": report.wer_reduction_percent,
            "recall_gain_percent": report.recall_gain_percent,
        })
    return records


def write_report(report: EvalReport, jsonl_path: Path, table_path: Path | None = None) -> None:
    jsonl_path = Path(jsonl_path)
    jsonl_path.parent.mkdir(parents=True, exist_ok=True)
    with jsonl_path.open("w", encoding="utf-8") as f:
        for record in report_records(report):
            f.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
    if table_path is not None:
        Path(table_path).write_text(render_report_table(report), encoding="utf-8")


def read_report_records(jsonl_path: Path) -> list[dict]:
    return [json.loads(line) for line in Path(jsonl_path).read_text(encoding="utf-8").splitlines()]
