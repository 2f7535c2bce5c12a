import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from drrag.classifier import (DISTRACTOR_DISTRACTOR, GOLD_DISTRACTOR, GOLD_GOLD, NEGATIVE, POSITIVE,
                              ClassifierVerdict, ConstantPairClassifier, LexicalPairClassifier,
                              classify, gen_training_pairs, lexical_score, parse_ratio, write_pairs)
from drrag.corpus import Corpus, Document
from drrag.evaluation import QueryRecord


def test_heiberg_jaccard():
    # left = {heiberg, son, spouse, johan}, right = {johan, wife, miquette}: 1 / 6
    score = lexical_score("heiberg son spouse", "heiberg son johan", "johan wife miquette")
    assert score == pytest.approx(1 / 6)
    a, b = Document("a", "heiberg son johan"), Document("b", "johan wife miquette")
    assert classify("heiberg son spouse", a, b, 0.2).label == NEGATIVE
    assert classify("heiberg son spouse", a, b, 0.1).label == POSITIVE


def test_lexical_edge_cases():
    assert lexical_score("", "", "") == 0.0
    assert lexical_score("son", "heiberg son", "heiberg son") == 1.0
    assert lexical_score("q", "a b", "c d") == 0.0
    assert lexical_score("q", "a b", "b a b") == lexical_score("q", "a b", "a b")


def test_identical_docs_positive_at_any_threshold():
    d = Document("a", "heiberg son johan")
    for t in (0.0, 0.5, 1.0):
        assert classify("son", d, d, t).positive


@given(st.text(), st.text(), st.text(), st.floats(0, 1), st.floats(0, 1))
def test_score_range_and_threshold_monotone(q, a, b, t1, t2):
    score = lexical_score(q, a, b)
    assert 0.0 <= score <= 1.0
    lo, hi = sorted((t1, t2))
    v_lo, v_hi = ClassifierVerdict(score, lo), ClassifierVerdict(score, hi)
    assert not (v_hi.positive and not v_lo.positive)


def test_verdict_round_trip():
    v = ClassifierVerdict(0.4, 0.5, "p", "c")
    d = v.to_dict()
    assert d["label"] == NEGATIVE
    assert ClassifierVerdict.from_dict(json.loads(json.dumps(d))) == v


def test_classify_threshold_validation():
    d = Document("a", "x")
    with pytest.raises(ValueError):
        classify("q", d, d, 1.5)


def test_estimator_api():
    clf = LexicalPairClassifier(threshold=0.4).fit()
    X = [("q", "a b", "a b"), ("q", "a", "z")]
    assert list(clf.predict(X)) == [POSITIVE, NEGATIVE]
    proba = clf.predict_proba(X)
    assert proba.shape == (2, 2) and np.allclose(proba.sum(axis=1), 1.0)
    assert ConstantPairClassifier(0.0).predict(X).tolist() == [NEGATIVE, NEGATIVE]
    assert clf.get_params() == {"threshold": 0.4}


# -- training pairs ------------------------------------------------------------

def _toy():
    corpus = Corpus.from_documents([Document(i, f"text {i}") for i in ("g1", "g2", "x1", "x2")])
    rec = QueryRecord("q1", "question", ("ans",), ("g1", "g2"), ("g1", "g2", "x1", "x2"))
    return corpus, rec


def test_pairs_toy_record_membership():
    corpus, rec = _toy()
    negatives = {("g1", "x1"), ("g1", "x2"), ("g2", "x1"), ("g2", "x2"), ("x1", "x2")}
    for seed in range(20):
        pairs, summary = gen_training_pairs([rec], corpus, ratio=(1, 1), seed=seed, n_pairs=2)
        pos = [p for p in pairs if p.label == POSITIVE]
        neg = [p for p in pairs if p.label == NEGATIVE]
        assert [(p.doc_a_id, p.doc_b_id) for p in pos] == [("g1", "g2")]
        assert len(neg) == 1 and (neg[0].doc_a_id, neg[0].doc_b_id) in negatives
        assert summary.positives == 1 and summary.negatives == 1


def test_pairs_skip_records_without_second_gold(caplog):
    corpus, _ = _toy()
    recs = [QueryRecord("a", "q", ("x",), ("g1",)), QueryRecord("b", "q", ("x",), ())]
    pairs, summary = gen_training_pairs(recs, corpus)
    assert pairs == [] and summary.skipped == 2
    assert "fewer than two gold" in caplog.text


def test_pairs_ratio_and_labels_on_synth(synth_small):
    corpus = Corpus.from_documents(synth_small.documents)
    dataset = synth_small.queries
    gold = {q.query_id: set(q.gold_doc_ids) for q in dataset}
    for ratio in ((1, 1), (1, 2), (2, 1)):
        pairs, summary = gen_training_pairs(dataset, corpus, ratio=ratio, seed=5)
        n_pos = sum(p.label == POSITIVE for p in pairs)
        n_neg = len(pairs) - n_pos
        assert abs(n_pos * ratio[1] - n_neg * ratio[0]) <= max(ratio)
        for p in pairs:
            g = gold[p.query_id]
            both = p.doc_a_id in g and p.doc_b_id in g
            assert (p.label == POSITIVE) == both
            expected_case = {2: GOLD_GOLD, 1: GOLD_DISTRACTOR, 0: DISTRACTOR_DISTRACTOR}[
                (p.doc_a_id in g) + (p.doc_b_id in g)]
            assert p.case == expected_case
            assert p.doc_a == corpus[p.doc_a_id].content


def test_pairs_corpus_sampling_excludes_gold():
    corpus = Corpus.from_documents([Document(f"d{i}", f"t{i}") for i in range(10)])
    rec = QueryRecord("q", "question", ("a",), ("d0", "d1"))
    pairs, _ = gen_training_pairs([rec], corpus, seed=1, corpus_distractors=3)
    for p in pairs:
        if p.label == NEGATIVE:
            assert {p.doc_a_id, p.doc_b_id} - {"d0", "d1"}


def test_pairs_deterministic(tmp_path, synth_small):
    corpus = Corpus.from_documents(synth_small.documents)
    out = []
    for name in ("a", "b"):
        pairs, _ = gen_training_pairs(synth_small.queries, corpus, seed=11)
        write_pairs(pairs, tmp_path / name)
        out.append((tmp_path / name).read_bytes())
    assert out[0] == out[1]


@pytest.mark.parametrize("text, expected", [("1:1", (1, 1)), ("1:2", (1, 2)), (" 3:1", (3, 1))])
def test_parse_ratio(text, expected):
    assert parse_ratio(text) == expected


@pytest.mark.parametrize("text", ["1", "a:b", "0:1", "1:2:3"])
def test_parse_ratio_rejects(text):
    with pytest.raises(ValueError):
        parse_ratio(text)


def test_pairs_n_cap():
    corpus = Corpus.from_documents([Document(f"d{i}", f"t{i}") for i in range(8)])
    recs = [QueryRecord(f"q{i}", "question", ("a",), ("d0", "d1", "d2"), tuple(f"d{j}" for j in range(8)))
            for i in range(3)]
    for n in range(1, 12):
        pairs, _ = gen_training_pairs(recs, corpus, seed=0, n_pairs=n)
        assert len(pairs) <= n
        n_pos = sum(p.label == POSITIVE for p in pairs)
        assert abs(n_pos - (len(pairs) - n_pos)) <= 1
