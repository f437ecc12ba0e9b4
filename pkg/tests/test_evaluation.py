import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msda.data import Corpus, SyntheticShift, Vocabulary, make_corpora
from msda.evaluation import align, evaluate, greedy_decode, score, wer

from helpers import TINY_SHIFT, tiny_model_for_data, tiny_params

words = st.lists(st.sampled_from("abcde"), max_size=12)


def levenshtein(a, b):
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


@settings(max_examples=300, deadline=None)
@given(words, words)
def test_edit_counts_form_a_minimum_alignment(ref, hyp):
    s, d, i = align(ref, hyp)
    assert s + d + i == levenshtein(ref, hyp)
    correct = len(ref) - s - d
    assert correct >= 0 and correct == len(hyp) - s - i


@settings(max_examples=200, deadline=None)
@given(words, words)
def test_alignment_is_symmetric_under_swapping(ref, hyp):
    s, d, i = align(ref, hyp)
    assert align(hyp, ref) == (s, i, d)


@settings(max_examples=100, deadline=None)
@given(words.filter(bool))
def test_identity_and_empty_hypothesis(ref):
    assert wer(ref, ref).errors == 0
    row = wer(ref, [])
    assert (row.substitutions, row.deletions, row.insertions) == (0, len(ref), 0)
    assert row.wer == 1.0


def test_worked_example():
    # three edits either way; the tie goes to substitutions
    row = wer("the cat sat on the mat".split(), "the cat sit on mat today".split())
    assert (row.substitutions, row.deletions, row.insertions) == (3, 0, 0)
    assert row.wer == pytest.approx(3 / 6)
    row = wer("a b c d".split(), "a c d e".split())
    assert (row.substitutions, row.deletions, row.insertions) == (0, 1, 1)


def test_corpus_wer_pools_edits_and_skips_empty_references():
    report = score([["a", "b"], [], ["c"]], [["a"], ["x"], ["d", "e"]], ids=["1", "2", "3"])
    assert report.excluded_empty_reference == 1
    assert report.reference_tokens == 3
    assert report.wer == pytest.approx((1 + 2) / 3)
    d = report.to_dict()
    assert [u["id"] for u in d["utterances"]] == ["1", "3"]


def test_wer_can_exceed_one():
    assert score([["a"]], [["b", "c", "d"]]).wer == 3.0


def test_greedy_decode_collapses_and_drops_blanks():
    path = [0, 1, 1, 0, 1, 2, 2, 0]
    lp = np.log(np.eye(3)[path] * 0.98 + 0.01)
    assert greedy_decode(lp) == [1, 1, 2]
    assert greedy_decode(np.zeros((4, 3))) == []  # ties go to the blank


def test_evaluate_writes_a_complete_report(tmp_path):
    corpus = make_corpora(SyntheticShift(**TINY_SHIFT), 0)["target"].split("test")
    params = tiny_params(vocab_size=tiny_model_for_data().vocab_size)
    report = evaluate(params, corpus)
    report.meta = {"role": "student"}
    out = tmp_path / "r.json"
    report.write(out)
    data = json.loads(out.read_text())
    assert data["meta"]["role"] == "student"
    assert len(data["utterances"]) == len(corpus)
    assert data["wer"] == pytest.approx(report.wer)


def test_evaluate_is_deterministic():
    corpus = make_corpora(SyntheticShift(**TINY_SHIFT), 0)["source"].split("dev")
    params = tiny_params(vocab_size=tiny_model_for_data().vocab_size)
    assert evaluate(params, corpus).to_dict() == evaluate(params, corpus).to_dict()
    empty = Corpus(Vocabulary(["a"]), [])
    assert np.isnan(score([], []).wer) and len(empty) == 0
