"""Two-stage retrieval strategies and single-call answer generation.

Strategies:

``bm25`` / ``sm``
    top-k from one retriever.
``qdc``
    top-k1 first stage; for each first-stage document (in rank order) the
    query is concatenated with it, k2 candidates are retrieved and the
    highest-ranked one not yet in the context is added.
``cis``
    ``qdc``, then second-stage documents whose pairing with every
    first-stage document is classified negative are dropped.
``cfs``
    like ``qdc``, but a candidate is only added when it is classified
    positive together with its parent; otherwise the scan moves to the next
    candidate, and a parent may contribute nothing.

The context never exceeds ``k`` documents and never repeats a document.
Exactly one LLM completion is made per answered query.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import (CLASSIFIED, TWO_STAGE, check_positive_int, check_strategy,
                          check_threshold, resolve_split)
from .classifier import ClassifierTransportError, ClassifierVerdict, LexicalPairClassifier
from .corpus import Corpus, Document
from .evaluation import QueryRecord
from .llm import CompletionRequest, LLMTransportError, MockLLM, parse_answer
from .retrievers import BM25Retriever, ScoredDoc, SimilarityRetriever, concat_query

CIS_MODES = ("equation", "pairwise")

PROMPT_PREAMBLE = ("You are a reading comprehension expert, and you need to complete "
                   "a reading comprehension task.")
PROMPT_RULE = "-" * 42
PROMPT_INSTRUCTION = (
    "After reading the documents above, answering the following question. Reasoning step "
    "by step. At last, you should output the final result via the following format:\n"
    "Answer: <your answer based on the documents>;\n"
    "Please answer the question directly."
)
PROMPT_CLOSING = ("Give your analysis process first, and then output your answer in a "
                  "specified format.")


@dataclass(frozen=True)
class PipelineConfig:
    strategy: str = "cfs"
    k: int = 4
    k1: int | None = None
    k2: int | None = None
    classifier_threshold: float = 0.5
    cis_mode: str = "equation"

    def __post_init__(self):
        strategy = check_strategy(self.strategy)
        k = check_positive_int(self.k, "k")
        if strategy in TWO_STAGE:
            k1, k2 = resolve_split(k, self.k1, self.k2)
        else:
            k1, k2 = k, 0
        if self.cis_mode not in CIS_MODES:
            raise ValueError(f"cis_mode must be one of {CIS_MODES}, got {self.cis_mode!r}")
        object.__setattr__(self, "strategy", strategy)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "k1", k1)
        object.__setattr__(self, "k2", k2)
        object.__setattr__(self, "classifier_threshold", check_threshold(self.classifier_threshold))


@dataclass
class RetrievalTrace:
    query_id: str
    strategy: str
    k: int
    k1: int
    k2: int
    first_stage: list[ScoredDoc] = field(default_factory=list)
    # parent doc_id -> ranked candidates, in parent processing order
    second_stage_candidates: dict[str, list[ScoredDoc]] = field(default_factory=dict)
    verdicts: list[ClassifierVerdict] = field(default_factory=list)
    # second-stage doc_id -> parent doc_id that contributed it
    added_by: dict[str, str] = field(default_factory=dict)
    removed: list[str] = field(default_factory=list)
    final_context: list[str] = field(default_factory=list)
    llm_calls: int = 0
    llm_attempts: int = 0
    parse_ok: bool | None = None
    completion: str | None = None
    wall_time_ms: float | None = None

    def stage_of(self, doc_id: str) -> str:
        return "second" if doc_id in self.added_by else "first"

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "strategy": self.strategy,
            "k": self.k,
            "k1": self.k1,
            "k2": self.k2,
            "first_stage": [s.to_dict() for s in self.first_stage],
            "second_stage_candidates": [
                {"parent": p, "candidates": [s.to_dict() for s in cands]}
                for p, cands in self.second_stage_candidates.items()
            ],
            "verdicts": [v.to_dict() for v in self.verdicts],
            "context": [
                {"doc_id": d, "stage": self.stage_of(d), "parent": self.added_by.get(d)}
                for d in self.final_context
            ],
            "removed": list(self.removed),
            "final_context": list(self.final_context),
            "llm_calls": self.llm_calls,
            "llm_attempts": self.llm_attempts,
            "parse_ok": self.parse_ok,
            "completion": self.completion,
            "wall_time_ms": self.wall_time_ms,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RetrievalTrace":
        trace = cls(query_id=d["query_id"], strategy=d["strategy"], k=d["k"], k1=d["k1"], k2=d["k2"])
        trace.first_stage = [ScoredDoc.from_dict(s) for s in d["first_stage"]]
        trace.second_stage_candidates = {
            e["parent"]: [ScoredDoc.from_dict(s) for s in e["candidates"]]
            for e in d["second_stage_candidates"]
        }
        trace.verdicts = [ClassifierVerdict.from_dict(v) for v in d["verdicts"]]
        trace.added_by = {c["doc_id"]: c["parent"] for c in d["context"] if c["stage"] == "second"}
        trace.removed = list(d.get("removed", []))
        trace.final_context = list(d["final_context"])
        trace.llm_calls = d.get("llm_calls", 0)
        trace.llm_attempts = d.get("llm_attempts", 0)
        trace.parse_ok = d.get("parse_ok")
        trace.completion = d.get("completion")
        trace.wall_time_ms = d.get("wall_time_ms")
        return trace


def _as_record(query) -> QueryRecord:
    if isinstance(query, QueryRecord):
        return query
    return QueryRecord(query_id="q", text=str(query))


def _new_trace(query: QueryRecord, cfg: PipelineConfig) -> RetrievalTrace:
    return RetrievalTrace(query_id=query.query_id, strategy=cfg.strategy,
                          k=cfg.k, k1=cfg.k1, k2=cfg.k2)


def run_first_stage(query, cfg: PipelineConfig, index) -> list[ScoredDoc]:
    """Top-k1 documents for the raw query; all of them enter the context."""
    query = _as_record(query)
    return index.retrieve(query.text, cfg.k1)


def _classify(classifier, query: QueryRecord, doc_a: Document, doc_b: Document,
              threshold: float, parent: str, candidate: str) -> ClassifierVerdict:
    try:
        score = classifier.score_pair(query.text, doc_a.content, doc_b.content)
    except ClassifierTransportError as exc:
        raise ClassifierTransportError(f"query {query.query_id}: {exc}") from exc
    return ClassifierVerdict(score=score, threshold=threshold,
                             parent_doc_id=parent, candidate_doc_id=candidate)


def _second_stage(query: QueryRecord, cfg: PipelineConfig, index, trace: RetrievalTrace,
                  accept: Callable[[ScoredDoc, ScoredDoc], bool]) -> None:
    corpus = index.corpus_
    cnt = trace.final_context
    members = set(cnt)
    for parent in trace.first_stage:
        if len(cnt) >= cfg.k:
            break
        q_star = concat_query(query.text, corpus[parent.doc_id])
        candidates = index.retrieve(q_star, cfg.k2)
        trace.second_stage_candidates[parent.doc_id] = candidates
        for cand in candidates:
            if cand.doc_id in members:
                continue
            if accept(parent, cand):
                cnt.append(cand.doc_id)
                members.add(cand.doc_id)
                trace.added_by[cand.doc_id] = parent.doc_id
                break


def _start(query, cfg: PipelineConfig, index) -> tuple[QueryRecord, RetrievalTrace]:
    query = _as_record(query)
    trace = _new_trace(query, cfg)
    trace.first_stage = run_first_stage(query, cfg, index)
    trace.final_context = [s.doc_id for s in trace.first_stage]
    return query, trace


def run_base(query, cfg: PipelineConfig, index) -> RetrievalTrace:
    """Single-stage BM25 or SM retrieval of ``k`` documents."""
    return _start(query, cfg, index)[1]


def run_qdc(query, cfg: PipelineConfig, index) -> RetrievalTrace:
    query, trace = _start(query, cfg, index)
    _second_stage(query, cfg, index, trace, accept=lambda parent, cand: True)
    return trace


def run_cis(query, cfg: PipelineConfig, index, classifier) -> RetrievalTrace:
    """QDC followed by removal of second-stage documents with no positive pairing.

    In ``equation`` mode a second-stage document d' is scored as
    ``C(q, d', d_i)`` against every first-stage d_i. In ``pairwise`` mode it is
    scored against every other document of the QDC context. First-stage
    documents are never removed.
    """
    query, trace = _start(query, cfg, index)
    _second_stage(query, cfg, index, trace, accept=lambda parent, cand: True)
    corpus = index.corpus_
    threshold = cfg.classifier_threshold
    qdc_context = list(trace.final_context)
    first_ids = [s.doc_id for s in trace.first_stage]
    drop = []
    for cand in qdc_context:
        if cand not in trace.added_by:
            continue
        partners = first_ids if cfg.cis_mode == "equation" else [d for d in qdc_context if d != cand]
        keep = False
        for other in partners:
            verdict = _classify(classifier, query, corpus[cand], corpus[other],
                                threshold, parent=other, candidate=cand)
            trace.verdicts.append(verdict)
            keep = keep or verdict.positive
        if not keep:
            drop.append(cand)
    trace.removed = drop
    trace.final_context = [d for d in qdc_context if d not in set(drop)]
    return trace


def run_cfs(query, cfg: PipelineConfig, index, classifier) -> RetrievalTrace:
    """Per parent, add the first candidate outside the context classified
    positive as ``C(q, d_i, d')``; a parent with no such candidate adds nothing."""
    query, trace = _start(query, cfg, index)
    corpus = index.corpus_
    threshold = cfg.classifier_threshold

    def accept(parent: ScoredDoc, cand: ScoredDoc) -> bool:
        verdict = _classify(classifier, query, corpus[parent.doc_id], corpus[cand.doc_id],
                            threshold, parent=parent.doc_id, candidate=cand.doc_id)
        trace.verdicts.append(verdict)
        return verdict.positive

    _second_stage(query, cfg, index, trace, accept=accept)
    return trace


def retrieve_context(query, cfg: PipelineConfig, index, classifier=None) -> RetrievalTrace:
    if cfg.strategy in CLASSIFIED and classifier is None:
        raise ValueError(f"strategy {cfg.strategy!r} requires a classifier")
    if cfg.strategy == "qdc":
        return run_qdc(query, cfg, index)
    if cfg.strategy == "cis":
        return run_cis(query, cfg, index, classifier)
    if cfg.strategy == "cfs":
        return run_cfs(query, cfg, index, classifier)
    return run_base(query, cfg, index)


def assemble_prompt(query, context_docs: Sequence[Document]) -> str:
    """Reading-comprehension prompt: numbered documents, answer-format
    instruction, then the question."""
    question = _as_record(query).text
    parts = [PROMPT_PREAMBLE, PROMPT_RULE, "Contexts", ""]
    for i, doc in enumerate(context_docs, start=1):
        parts.append(f"Document {i}:")
        parts.append(doc.content)
        parts.append("")
    parts += [PROMPT_RULE, PROMPT_INSTRUCTION, PROMPT_RULE, "Question", question,
              PROMPT_RULE, PROMPT_CLOSING]
    return "\n".join(parts)


def answer_query(query, cfg: PipelineConfig, index, classifier, llm, *,
                 max_tokens: int = 512, temperature: float = 0.0,
                 timer: Callable[[], float] | None = time.perf_counter) -> tuple[str, RetrievalTrace]:
    """Retrieve, build one prompt, make exactly one completion call, parse it.

    Pass ``timer=None`` to leave ``wall_time_ms`` unset (for byte-stable output).
    """
    query = _as_record(query)
    start = timer() if timer else None
    trace = retrieve_context(query, cfg, index, classifier)
    corpus = index.corpus_
    prompt = assemble_prompt(query, [corpus[d] for d in trace.final_context])
    request = CompletionRequest(prompt=prompt, max_tokens=max_tokens, temperature=temperature)
    try:
        completion = llm.complete(request)
    except LLMTransportError as exc:
        raise LLMTransportError(f"query {query.query_id}: {exc}") from exc
    parsed = parse_answer(completion)
    trace.llm_calls = 1
    trace.llm_attempts = getattr(llm, "last_attempts", 1) or 1
    trace.parse_ok = parsed.parse_ok
    trace.completion = completion
    if timer:
        trace.wall_time_ms = (timer() - start) * 1000.0
    return parsed.extracted, trace


def result_record(answer: str, trace: RetrievalTrace) -> dict:
    return {
        "query_id": trace.query_id,
        "strategy": trace.strategy,
        "k": trace.k,
        "k1": trace.k1,
        "k2": trace.k2,
        "answer": answer,
        "context_doc_ids": list(trace.final_context),
        "llm_calls": trace.llm_calls,
        "wall_time_ms": trace.wall_time_ms,
        "trace": trace.to_dict(),
    }


def error_record(query: QueryRecord, cfg: PipelineConfig, exc: BaseException) -> dict:
    return {
        "query_id": query.query_id,
        "strategy": cfg.strategy,
        "k": cfg.k,
        "k1": cfg.k1,
        "k2": cfg.k2,
        "error": f"{type(exc).__name__}: {exc}",
    }


def answer_many(queries: Sequence[QueryRecord], cfg: PipelineConfig, index, classifier, llm, *,
                jobs: int = 1, keep_going: bool = False, **kwargs) -> list[dict]:
    """Answer a batch, possibly concurrently; records come back in query_id order.

    Without ``keep_going`` the first backend failure is re-raised.
    """
    jobs = check_positive_int(jobs, "jobs")

    def one(q: QueryRecord) -> dict:
        try:
            return result_record(*answer_query(q, cfg, index, classifier, llm, **kwargs))
        except (ClassifierTransportError, LLMTransportError) as exc:
            if not keep_going:
                raise
            return error_record(q, cfg, exc)

    ordered = sorted(queries, key=lambda q: q.query_id)
    if jobs == 1:
        records = [one(q) for q in ordered]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(one, ordered))
    return records


class DRRAG(BaseEstimator):
    """Estimator wrapper: ``fit`` indexes a corpus, ``predict`` answers queries.

    Parameters mirror :class:`PipelineConfig`; ``retriever`` selects the base
    retriever used for both stages (``"sm"`` or ``"bm25"``; the ``bm25``
    strategy always uses BM25). ``classifier`` defaults to the lexical
    reference for ``cis``/``cfs`` and ``llm`` to a fallback-only mock.
    """

    def __init__(self, strategy: str = "cfs", k: int = 4, k1: int | None = None,
                 k2: int | None = None, threshold: float = 0.5, cis_mode: str = "equation",
                 retriever: str = "sm", embedder=None, classifier=None, llm=None,
                 max_tokens: int = 512, temperature: float = 0.0):
        self.strategy = strategy
        self.k = k
        self.k1 = k1
        self.k2 = k2
        self.threshold = threshold
        self.cis_mode = cis_mode
        self.retriever = retriever
        self.embedder = embedder
        self.classifier = classifier
        self.llm = llm
        self.max_tokens = max_tokens
        self.temperature = temperature

    def _make_config(self) -> PipelineConfig:
        return PipelineConfig(strategy=self.strategy, k=self.k, k1=self.k1, k2=self.k2,
                              classifier_threshold=self.threshold, cis_mode=self.cis_mode)

    def fit(self, corpus, y=None, embeddings: dict | None = None):
        self.config_ = self._make_config()
        if not isinstance(corpus, Corpus):
            corpus = Corpus.from_documents(corpus)
        if self.retriever not in ("sm", "bm25"):
            raise ValueError(f"retriever must be 'sm' or 'bm25', got {self.retriever!r}")
        if self.config_.strategy == "bm25" or (self.config_.strategy != "sm" and self.retriever == "bm25"):
            self.index_ = BM25Retriever().fit(corpus)
        else:
            self.index_ = SimilarityRetriever(embedder=self.embedder).fit(corpus, embeddings=embeddings)
        self.classifier_ = self.classifier
        if self.classifier_ is None and self.config_.strategy in CLASSIFIED:
            self.classifier_ = LexicalPairClassifier(threshold=self.threshold)
        self.llm_ = self.llm if self.llm is not None else MockLLM()
        return self

    def retrieve(self, query) -> RetrievalTrace:
        check_is_fitted(self, "index_")
        return retrieve_context(query, self.config_, self.index_, self.classifier_)

    def answer(self, query, timer=time.perf_counter) -> tuple[str, RetrievalTrace]:
        check_is_fitted(self, "index_")
        return answer_query(query, self.config_, self.index_, self.classifier_, self.llm_,
                            max_tokens=self.max_tokens, temperature=self.temperature, timer=timer)

    def predict(self, X) -> list[str]:
        return [self.answer(q)[0] for q in X]

    def transform(self, X) -> list[list[str]]:
        """Final context doc_ids for each query."""
        return [self.retrieve(q).final_context for q in X]
