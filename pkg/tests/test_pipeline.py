import json
import random

import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

import oracles
from stubs import HashJudge
from drrag.classifier import ClassifierTransportError, ConstantPairClassifier, LexicalPairClassifier, PairClassifier
from drrag.corpus import Corpus, Document
from drrag.evaluation import QueryRecord
from drrag.llm import LLMTransportError, MockLLM
from drrag.pipeline import (DRRAG, PipelineConfig, RetrievalTrace, answer_many, answer_query,
                            assemble_prompt, retrieve_context, run_first_stage)
from drrag.retrievers import BM25Retriever, SimilarityRetriever

Q = QueryRecord("q1", "heiberg son spouse", ("Miquette",), ("d1", "d2"))
WORDS = "alpha beta gamma delta eps zeta eta theta iota kappa lam mu nu xi".split()


class Recorder(PairClassifier):
    """Scores by a fixed rule and remembers argument order."""

    def __init__(self, threshold=0.5, rule=None):
        self.threshold = threshold
        self.rule = rule
        self.calls = []

    def score_pair(self, query, doc_a, doc_b):
        self.calls.append((query, doc_a, doc_b))
        return self.rule(query, doc_a, doc_b) if self.rule else 1.0


class Failing(PairClassifier):
    def score_pair(self, query, doc_a, doc_b):
        raise ClassifierTransportError("boom")


def random_corpus(rng, n):
    docs = [Document(f"d{i:03d}", " ".join(rng.choice(WORDS) for _ in range(rng.randint(1, 6))),
                     rng.choice(["", rng.choice(WORDS)])) for i in range(n)]
    return Corpus.from_documents(docs)


def test_config_defaults():
    assert (PipelineConfig("cfs", 3).k1, PipelineConfig("cfs", 3).k2) == (2, 1)
    assert (PipelineConfig("qdc", 4).k1, PipelineConfig("qdc", 4).k2) == (2, 2)
    assert (PipelineConfig("cis", 6).k1, PipelineConfig("cis", 6).k2) == (3, 3)
    assert (PipelineConfig("sm", 6).k1, PipelineConfig("sm", 6).k2) == (6, 0)
    assert PipelineConfig("qdc", 2, k1=2).k2 == 1
    with pytest.raises(ValueError):
        PipelineConfig("qdc", 2, k1=3)
    with pytest.raises(ValueError):
        PipelineConfig("nope", 2)
    with pytest.raises(ValueError):
        PipelineConfig("cis", 2, cis_mode="other")


def test_qdc_heiberg_example(heiberg_corpus, heiberg_docs):
    index = SimilarityRetriever().fit(heiberg_corpus)
    trace = retrieve_context(Q, PipelineConfig("qdc", 2, k1=1, k2=2), index)
    # exhaustive cosine scan: the shorter "johan astronomy" outranks d2 for q*
    assert trace.final_context == ["d1", "d3"]
    assert trace.final_context == oracles.naive_strategy(Q.text, heiberg_docs, "qdc", 2, 1, 2)
    assert [s.doc_id for s in trace.second_stage_candidates["d1"]] == ["d1", "d3"]


def test_cis_heiberg_lexical(heiberg_corpus):
    index = SimilarityRetriever().fit(heiberg_corpus)
    cfg = PipelineConfig("cis", 2, k1=1, k2=2, classifier_threshold=0.2)
    trace = retrieve_context(Q, cfg, index, LexicalPairClassifier())
    assert trace.final_context == ["d1", "d3"]
    assert [v.score for v in trace.verdicts] == [pytest.approx(3 / 5)]
    # the pairing highlighted for d2 would also be kept: Jaccard 3/6
    assert LexicalPairClassifier().score_pair(Q.text, "johan wife miquette", "heiberg son johan") == 0.5


def test_qdc_all_candidates_in_context():
    corpus = Corpus.from_documents([Document("a", "x y"), Document("b", "x")])
    index = SimilarityRetriever().fit(corpus)
    trace = retrieve_context(QueryRecord("q", "x y"), PipelineConfig("qdc", 3, k1=2, k2=2), index)
    assert trace.final_context == ["a", "b"]
    assert trace.added_by == {}


def test_qdc_k1_equals_k_is_sm(heiberg_corpus):
    index = SimilarityRetriever().fit(heiberg_corpus)
    qdc = retrieve_context(Q, PipelineConfig("qdc", 2, k1=2), index).final_context
    sm = retrieve_context(Q, PipelineConfig("sm", 2), index).final_context
    assert qdc == sm


def test_first_stage_over_empty_corpus():
    index = SimilarityRetriever().fit(Corpus.from_documents([]))
    assert run_first_stage(Q, PipelineConfig("qdc", 4), index) == []
    answer, trace = answer_query(Q, PipelineConfig("cfs", 4), index, LexicalPairClassifier(), MockLLM())
    assert trace.final_context == [] and trace.llm_calls == 1 and answer == "UNKNOWN"


def test_classifier_argument_order(heiberg_corpus):
    index = SimilarityRetriever().fit(heiberg_corpus)
    d1, d3 = heiberg_corpus["d1"].content, heiberg_corpus["d3"].content
    cfs = Recorder()
    retrieve_context(Q, PipelineConfig("cfs", 2, k1=1, k2=2), index, cfs)
    assert cfs.calls == [(Q.text, d1, d3)]
    cis = Recorder()
    retrieve_context(Q, PipelineConfig("cis", 2, k1=1, k2=2), index, cis)
    assert cis.calls == [(Q.text, d3, d1)]


def test_cis_pairwise_mode_uses_all_context():
    rng = random.Random(1)
    corpus = random_corpus(rng, 30)
    index = SimilarityRetriever().fit(corpus)
    rec = Recorder(rule=lambda q, a, b: 0.0)
    trace = retrieve_context(QueryRecord("q", "alpha beta"), PipelineConfig("cis", 6, cis_mode="pairwise"),
                             index, rec)
    n_second = len(trace.added_by)
    assert len(rec.calls) == n_second * (trace.k1 + n_second - 1)
    assert trace.final_context == [s.doc_id for s in trace.first_stage]


def test_cfs_may_add_nothing_for_a_parent():
    rng = random.Random(2)
    corpus = random_corpus(rng, 40)
    index = SimilarityRetriever().fit(corpus)
    trace = retrieve_context(QueryRecord("q", "alpha"), PipelineConfig("cfs", 4),
                             index, ConstantPairClassifier(0.0))
    assert trace.final_context == [s.doc_id for s in trace.first_stage]
    assert len(trace.final_context) == 2 < trace.k


def test_classifier_required():
    index = SimilarityRetriever().fit(Corpus.from_documents([Document("a", "x")]))
    with pytest.raises(ValueError, match="requires a classifier"):
        retrieve_context(Q, PipelineConfig("cfs", 2), index)


def _context_ids(corpus, query, strategy, k, clf):
    index = SimilarityRetriever().fit(corpus)
    return retrieve_context(query, PipelineConfig(strategy, k), index, clf).final_context


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 8))
def test_degeneracy_laws(seed, k):
    rng = random.Random(seed)
    corpus = random_corpus(rng, rng.randint(1, 40))
    query = QueryRecord("q", " ".join(rng.choice(WORDS) for _ in range(3)))
    qdc = _context_ids(corpus, query, "qdc", k, None)
    first = _context_ids(corpus, query, "sm", PipelineConfig("qdc", k).k1, None)
    for strategy in ("cfs", "cis"):
        assert _context_ids(corpus, query, strategy, k, ConstantPairClassifier(1.0)) == qdc
        assert _context_ids(corpus, query, strategy, k, ConstantPairClassifier(0.0)) == first


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(["qdc", "cis", "cfs"]), st.integers(1, 8),
       st.sampled_from(["equation", "pairwise"]), st.sampled_from(["sm", "bm25"]))
def test_matches_naive_strategy(seed, strategy, k, cis_mode, kind):
    rng = random.Random(seed)
    corpus = random_corpus(rng, rng.randint(1, 30))
    query = QueryRecord("q", " ".join(rng.choice(WORDS) for _ in range(3)))
    judge = HashJudge(threshold=0.4, salt=seed)
    cfg = PipelineConfig(strategy, k, cis_mode=cis_mode, classifier_threshold=0.4)
    index = (BM25Retriever() if kind == "bm25" else SimilarityRetriever()).fit(corpus)
    trace = retrieve_context(query, cfg, index, judge)
    expected = oracles.naive_strategy(query.text, list(corpus), strategy, k, cfg.k1, cfg.k2,
                                      judge=lambda q, a, b: judge.score_pair(q, a, b) >= 0.4,
                                      cis_mode=cis_mode, kind=kind)
    assert trace.final_context == expected
    assert len(trace.final_context) <= k
    assert len(set(trace.final_context)) == len(trace.final_context)
    assert oracles.replay(trace.to_dict()) == trace.final_context


def test_cfs_verdict_soundness_on_random_corpora():
    for seed in range(15):
        rng = random.Random(seed)
        corpus = random_corpus(rng, 100)
        index = SimilarityRetriever().fit(corpus)
        query = QueryRecord("q", " ".join(rng.choice(WORDS) for _ in range(4)))
        trace = retrieve_context(query, PipelineConfig("cfs", 6, classifier_threshold=0.5), index,
                                 LexicalPairClassifier())
        verdicts = {(v.parent_doc_id, v.candidate_doc_id): v for v in trace.verdicts}
        for cand, parent in trace.added_by.items():
            assert verdicts[(parent, cand)].positive
            for above in trace.second_stage_candidates[parent]:
                if above.doc_id == cand:
                    break
                was_member = trace.final_context.index(above.doc_id) < trace.final_context.index(cand) \
                    if above.doc_id in trace.final_context else False
                assert was_member or not verdicts[(parent, above.doc_id)].positive


def test_assemble_prompt_structure():
    docs = [Document("b", "second text", "B"), Document("a", "first text")]
    prompt = assemble_prompt(QueryRecord("q", "What is it?"), docs)
    i1, i2 = prompt.index("Document 1:"), prompt.index("Document 2:")
    assert i1 < prompt.index("B\nsecond text") < i2 < prompt.index("first text")
    assert prompt.count("What is it?") == 1
    assert "Answer:" in prompt
    empty = assemble_prompt(QueryRecord("q", "What is it?"), [])
    assert "Document 1:" not in empty and empty.count("What is it?") == 1
    assert "Contexts" in empty


def test_answer_query_echo_mock(heiberg_corpus):
    corpus = Corpus.from_documents(list(heiberg_corpus) + [Document("t", "johan wife", "Miquette Giraudy")])
    index = SimilarityRetriever().fit(corpus)
    llm = MockLLM(responder=lambda p: "thinking\nAnswer: <Miquette Giraudy>")
    answer, trace = answer_query(Q, PipelineConfig("qdc", 3), index, None, llm, timer=None)
    assert answer == "Miquette Giraudy"
    assert trace.llm_calls == 1 and llm.call_count == 1 and trace.parse_ok
    assert trace.wall_time_ms is None
    _, timed = answer_query(Q, PipelineConfig("qdc", 3), index, None, llm)
    assert timed.wall_time_ms >= 0.0


def test_answer_query_deterministic(synth_small):
    index = SimilarityRetriever().fit(Corpus.from_documents(synth_small.documents))
    q = synth_small.queries[0]
    runs = [answer_query(q, PipelineConfig("cfs", 4), index, LexicalPairClassifier(), MockLLM(), timer=None)
            for _ in range(2)]
    assert runs[0][0] == runs[1][0]
    assert json.dumps(runs[0][1].to_dict()) == json.dumps(runs[1][1].to_dict())


def test_trace_round_trip(synth_small):
    index = SimilarityRetriever().fit(Corpus.from_documents(synth_small.documents))
    trace = retrieve_context(synth_small.queries[1], PipelineConfig("cis", 4), index, HashJudge())
    data = json.loads(json.dumps(trace.to_dict()))
    again = RetrievalTrace.from_dict(data)
    assert again.to_dict() == trace.to_dict()
    stages = {c["doc_id"]: c["stage"] for c in data["context"]}
    assert all(stages[s.doc_id] == "first" for s in trace.first_stage)


def test_transport_errors_carry_query_id(heiberg_corpus):
    index = SimilarityRetriever().fit(heiberg_corpus)
    with pytest.raises(ClassifierTransportError, match="query q1"):
        answer_query(Q, PipelineConfig("cfs", 2, k1=1, k2=2), index, Failing(), MockLLM())

    class DeadLLM:
        def complete(self, request):
            raise LLMTransportError("down")

    with pytest.raises(LLMTransportError, match="query q1"):
        answer_query(Q, PipelineConfig("sm", 2), index, None, DeadLLM())


def test_answer_many_order_and_keep_going(synth_small):
    index = SimilarityRetriever().fit(Corpus.from_documents(synth_small.documents))
    queries = list(reversed(synth_small.queries))
    cfg = PipelineConfig("cfs", 4)
    serial = answer_many(queries, cfg, index, LexicalPairClassifier(), MockLLM(), timer=None)
    parallel = answer_many(queries, cfg, index, LexicalPairClassifier(), MockLLM(), jobs=4, timer=None)
    assert [r["query_id"] for r in serial] == sorted(q.query_id for q in queries)
    assert json.dumps(serial) == json.dumps(parallel)
    with pytest.raises(ClassifierTransportError):
        answer_many(queries, cfg, index, Failing(), MockLLM())
    rows = answer_many(queries, cfg, index, Failing(), MockLLM(), keep_going=True)
    assert all(r["error"].startswith("ClassifierTransportError") for r in rows)


def test_drrag_estimator(synth_small):
    model = DRRAG(strategy="qdc", k=3, k1=1, k2=2).fit(synth_small.documents)
    contexts = model.transform(synth_small.queries[:3])
    for ctx, q in zip(contexts, synth_small.queries):
        assert set(q.gold_doc_ids) <= set(ctx)
    assert model.predict(synth_small.queries[:2]) == ["UNKNOWN", "UNKNOWN"]
    assert clone(model).get_params()["k2"] == 2
    bm = DRRAG(strategy="bm25", k=2).fit(synth_small.documents)
    assert isinstance(bm.index_, BM25Retriever)
    assert isinstance(DRRAG(strategy="cfs").fit(synth_small.documents).classifier_, LexicalPairClassifier)
    with pytest.raises(ValueError):
        DRRAG(retriever="dense").fit(synth_small.documents)
