from __future__ import annotations

import functools
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxasr.corpus import ContextBundle
from ctxasr.errors import InvalidInputError
from ctxasr.evalsuite import (CONDITION_WITH, CONDITION_WITHOUT, HallucinationConfig,
                              SetMetrics, aggregate, align, cer, hallucination_flags,
                              hotword_recall, normalize_and_tokenize, read_report_records,
                              render_report_table, report_records, wer, write_report)


def toks(text: str):
    return normalize_and_tokenize(text)


# --------------------------------------------------------------- normalization

def test_normalize_case_and_punctuation():
    assert toks("Hello, WORLD").units == ("hello", "world")


def test_normalize_mixed_script():
    assert toks("我爱ASR").units == ("我", "爱", "asr")


def test_normalize_keeps_digit_runs():
    assert toks("room 42b!").units == ("room", "42b")


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet=st.sampled_from(list("aBc> 3.,!？中文 我;'-")), max_size=30))
def test_normalize_idempotent(text):
    once = normalize_and_tokenize(text)
    twice = normalize_and_tokenize(once.normalized_text)
    assert twice.units == once.units


# ------------------------------------------------------------------- alignment

def test_align_identical_sequences():
    a = align(["a", "b", "c"], ["a", "b", "c"])
    assert (a.substitutions, a.deletions, a.insertions) == (0, 0, 0)


def test_align_deletion_case_by_hand():
    # Full DP table for ref=[the,cat,sat], hyp=[the,cat]:
    #        ""  the  cat
    #   ""    0    1    2
    #   the   1    0    1
    #   cat   2    1    0
    #   sat   3    2    1   -> distance 1, one deletion
    a = align(["the", "cat", "sat"], ["the", "cat"])
    assert (a.substitutions, a.deletions, a.insertions) == (0, 1, 0)
    result = wer([["the", "cat", "sat"]], [["the", "cat"]])
    assert result.rate == pytest.approx(1 / 3)


def brute_force_distance(ref: tuple, hyp: tuple) -> int:
    # Independent oracle: textbook recursive definition with memoization.
    @functools.lru_cache(maxsize=None)
    def rec(i: int, j: int) -> int:
        if i == 0:
            return j
        if j == 0:
            return i
        return min(rec(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1]),
                   rec(i - 1, j) + 1,
                   rec(i, j - 1) + 1)

    return rec(len(ref), len(hyp))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from("abc"), max_size=8), st.lists(st.sampled_from("abc"), max_size=8))
def test_align_cost_matches_brute_force(ref, hyp):
    assert align(ref, hyp).distance == brute_force_distance(tuple(ref), tuple(hyp))


def test_alignment_pairs_replay_both_sequences():
    ref = ["a", "b", "c", "d"]
    hyp = ["a", "x", "d", "e"]
    a = align(ref, hyp)
    assert [p.ref for p in a.pairs if p.ref is not None] == ref
    assert [p.hyp for p in a.pairs if p.hyp is not None] == hyp


def test_alignment_tie_break_prefers_substitution():
    a = align(["a"], ["b"])
    assert a.pairs[0].op == "sub"


# ------------------------------------------------------------------------ wer

def test_wer_perfect_hypotheses():
    refs = [toks("a b c"), toks("d e")]
    assert wer(refs, refs).percent == 0.00


def test_wer_pooling_differs_from_utterance_mean():
    # One-word utterance fully wrong, nine-word utterance perfect:
    # pooled = 1/10, per-utterance mean = (1 + 0)/2.
    refs = [["x"], ["a", "b", "c", "d", "e", "f", "g", "h", "i"]]
    hyps = [["y"], ["a", "b", "c", "d", "e", "f", "g", "h", "i"]]
    result = wer(refs, hyps)
    assert result.percent == 10.00
    assert result.utterance_mean_percent == 50.00


def test_wer_rejects_all_empty_references():
    with pytest.raises(InvalidInputError, match="empty"):
        wer([[]], [["a"]])


def test_wer_order_invariant():
    refs = [toks("a b"), toks("c"), toks("d e f")]
    hyps = [toks("a x"), toks("c"), toks("d f")]
    forward = wer(refs, hyps)
    backward = wer(refs[::-1], hyps[::-1])
    assert forward.percent == backward.percent
    assert forward.errors == backward.errors


def test_cer_splits_units_into_codepoints():
    result = cer(["ab cd"], ["ab ce"])
    assert result.reference_length == 4
    assert result.errors == 1


# ---------------------------------------------------------------------- recall

def test_recall_single_hotword_hit():
    refs = [toks("meet at zylph base")]
    hyps = [toks("meet at zylph base")]
    bundles = [ContextBundle(hotwords=("zylph",))]
    assert hotword_recall(refs, hyps, bundles).rate == 1.0


def test_recall_counts_occurrences():
    refs = [toks("ka x ka y ka z ka")]
    hyps = [toks("ka x q y ka z w")]
    bundles = [ContextBundle(hotwords=("ka",))]
    result = hotword_recall(refs, hyps, bundles)
    assert result.occurrence_total == 4
    assert result.occurrence_hits == 2
    assert result.rate == 0.5


def test_recall_undefined_reported_as_none():
    refs = [toks("a b")]
    hyps = [toks("a b")]
    bundles = [ContextBundle(hotwords=("zzz",))]  # never occurs in ref
    assert hotword_recall(refs, hyps, bundles).rate is None


def test_recall_multiword_terms():
    refs = [toks("the new york office")]
    hyps = [toks("the new york office")]
    bundles = [ContextBundle(hotwords=("new york",))]
    assert hotword_recall(refs, hyps, bundles).rate == 1.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(["aa", "bb", "cc"]), min_size=1, max_size=6))
def test_distractors_never_change_recall(ref_words):
    refs = [normalize_and_tokenize(" ".join(ref_words))]
    hyps = refs
    base = ContextBundle(hotwords=(ref_words[0],))
    with_distractor = ContextBundle(hotwords=(ref_words[0], "zdistract"), distractor_count=1)
    r1 = hotword_recall(refs, hyps, [base])
    r2 = hotword_recall(refs, hyps, [with_distractor])
    assert r1.rate == r2.rate
    assert r1.occurrence_total == r2.occurrence_total


# ----------------------------------------------------------------- flag logic

def test_no_flags_on_exact_match():
    ref = toks("a b c")
    flags = hallucination_flags(ref, ref)
    assert not flags.any


def test_repetition_flag_unigram_scan():
    flags = hallucination_flags(toks("ok"), toks("ok ok ok ok ok"),
                                config=HallucinationConfig(repetition_ngram=1,
                                                           repetition_limit=4))
    assert flags.repetition


def test_length_flag_threshold():
    flags = hallucination_flags(toks("a b"), toks("x y z u v w"),
                                config=HallucinationConfig(length_ratio=2.0))
    assert flags.length


def test_generation_repetition_flag_merged():
    flags = hallucination_flags(toks("a b c"), toks("a b"), gen_flags=("repetition",))
    assert flags.repetition
    assert flags.generation == ("repetition",)


def test_length_termination_not_a_hallucination_by_itself():
    flags = hallucination_flags(toks("a b c"), toks("a b c"), gen_flags=("length",))
    assert not flags.any


# ------------------------------------------------------------------- aggregate

def _rows(wers, recalls, condition):
    names = ["set-a", "set-b", "set-c"]
    return [SetMetrics(set_name=n, condition=condition, wer_percent=w, recall_percent=r)
            for n, w, r in zip(names, wers, recalls)]


def test_aggregate_two_condition_fixture():
    rows = (_rows([8.82, 4.60, 3.68], [39.90, 81.74, 81.21], CONDITION_WITHOUT)
            + _rows([2.99, 3.52, 3.25], [88.08, 95.33, 86.39], CONDITION_WITH))
    report = aggregate(rows)
    by_cond = {s.condition: s for s in report.averages}
    assert by_cond[CONDITION_WITHOUT].average_wer_percent == 5.70
    assert by_cond[CONDITION_WITH].average_wer_percent == 3.25
    assert by_cond[CONDITION_WITHOUT].average_recall_percent == 67.62
    assert by_cond[CONDITION_WITH].average_recall_percent == 89.93
    assert report.wer_reduction_percent == 43
    assert report.recall_gain_percent == 33


def test_aggregate_identical_rows_zero_delta():
    rows = [SetMetrics("s", CONDITION_WITHOUT, 4.0, 50.0),
            SetMetrics("s", CONDITION_WITH, 4.0, 50.0)]
    report = aggregate(rows)
    assert report.wer_reduction_percent == 0
    assert report.recall_gain_percent == 0


def test_aggregate_rejects_mismatched_set_lists():
    rows = [SetMetrics("a", CONDITION_WITHOUT, 4.0, None),
            SetMetrics("b", CONDITION_WITH, 4.0, None)]
    with pytest.raises(InvalidInputError, match="different set lists"):
        aggregate(rows)


def test_aggregate_single_condition_has_no_delta():
    report = aggregate(_rows([4.0, 5.0, 6.0], [None, None, None], CONDITION_WITHOUT))
    assert report.wer_reduction_percent is None
    assert report.averages[0].average_recall_percent is None


# --------------------------------------------------------------------- reports

def test_report_render_and_round_trip(tmp_path):
    rows = (_rows([8.82, 4.60, 3.68], [39.90, 81.74, 81.21], CONDITION_WITHOUT)
            + _rows([2.99, 3.52, 3.25], [88.08, 95.33, 86.39], CONDITION_WITH))
    report = aggregate(rows)
    table = render_report_table(report)
    assert "Average" in table and "5.70" in table and "89.93" in table
    write_report(report, tmp_path / "r.jsonl", tmp_path / "r.txt")
    records = read_report_records(tmp_path / "r.jsonl")
    assert records == report_records(report)
    assert records[0]["schema_version"] == 1
    assert (tmp_path / "r.txt").read_text().startswith("set")


def test_report_bytes_deterministic(tmp_path):
    rows = _rows([4.0, 5.0, 6.0], [10.0, 20.0, 30.0], CONDITION_WITHOUT)
    report = aggregate(rows)
    write_report(report, tmp_path / "a.jsonl", tmp_path / "a.txt")
    write_report(report, tmp_path / "b.jsonl", tmp_path / "b.txt")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
