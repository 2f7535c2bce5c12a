"""Pairwise relevance classifiers: does a document pair jointly matter for a query?

Every backend exposes ``score_pair(query, doc_a, doc_b) -> float in [0, 1]``;
labels come from thresholding that score. Argument order is preserved end to
end because external models need not be symmetric.
"""

from __future__ import annotations

import itertools
import json
import logging
import random
import threading
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import httpx
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from ._validation import check_threshold
from .corpus import Corpus, Document, tokenize

logger = logging.getLogger(__name__)

POSITIVE = "positive"
NEGATIVE = "negative"


class ClassifierTransportError(RuntimeError):
    """The classifier backend could not be reached or answered badly."""


@dataclass(frozen=True)
class ClassifierVerdict:
    score: float
    threshold: float
    parent_doc_id: str = ""
    candidate_doc_id: str = ""

    @property
    def label(self) -> str:
        return POSITIVE if self.score >= self.threshold else NEGATIVE

    @property
    def positive(self) -> bool:
        return self.score >= self.threshold

    def to_dict(self) -> dict:
        d = asdict(self)
        d["label"] = self.label
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierVerdict":
        return cls(
            score=float(d["score"]),
            threshold=float(d["threshold"]),
            parent_doc_id=d.get("parent_doc_id", ""),
            candidate_doc_id=d.get("candidate_doc_id", ""),
        )


def lexical_score(query: str, doc_a: str, doc_b: str) -> float:
    """Jaccard overlap of ``tokens(query) | tokens(doc_a)`` against ``tokens(doc_b)``."""
    left = set(tokenize(query)) | set(tokenize(doc_a))
    right = set(tokenize(doc_b))
    if not left or not right:
        return 0.0
    return len(left & right) / len(left | right)


def _text(doc) -> str:
    return doc.content if isinstance(doc, Document) else str(doc)


class PairClassifier(ClassifierMixin, BaseEstimator):
    """Base for pair classifiers.

    ``X`` for :meth:`predict` / :meth:`predict_proba` is a sequence of
    ``(query, doc_a, doc_b)`` triples of strings or Documents.
    """

    def __init__(self, threshold: float = 0.5):
        self.threshold = threshold

    def score_pair(self, query: str, doc_a: str, doc_b: str) -> float:
        raise NotImplementedError

    def fit(self, X=None, y=None):
        self.classes_ = np.array([NEGATIVE, POSITIVE])
        return self

    def predict_proba(self, X) -> np.ndarray:
        pos = np.array([self.score_pair(q, _text(a), _text(b)) for q, a, b in X], dtype=float)
        return np.column_stack([1.0 - pos, pos]) if len(pos) else np.zeros((0, 2))

    def predict(self, X) -> np.ndarray:
        threshold = check_threshold(self.threshold)
        pos = self.predict_proba(X)[:, 1]
        return np.where(pos >= threshold, POSITIVE, NEGATIVE)

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.requires_fit = False
        return tags


class LexicalPairClassifier(PairClassifier):
    """Hermetic reference backend built on :func:`lexical_score`."""

    def score_pair(self, query, doc_a, doc_b):
        return lexical_score(query, doc_a, doc_b)


class ConstantPairClassifier(PairClassifier):
    """Returns the same score for every pair. Useful for degenerate checks."""

    def __init__(self, score: float = 1.0, threshold: float = 0.5):
        self.score = score
        self.threshold = threshold

    def score_pair(self, query, doc_a, doc_b):
        return check_threshold(self.score, "score")


class HTTPPairClassifier(PairClassifier):
    """Client for an external model served as ``POST {url}/classify``.

    Request body ``{"query", "doc_a", "doc_b"}``; response ``{"score"}``.
    No retries: a retried nondeterministic model would break trace replay.
    """

    def __init__(self, url: str = "http://127.0.0.1:8000", threshold: float = 0.5,
                 timeout: float = 10.0, max_in_flight: int = 8):
        self.url = url
        self.threshold = threshold
        self.timeout = timeout
        self.max_in_flight = max_in_flight

    def _client(self) -> httpx.Client:
        # created lazily so the estimator stays picklable and clonable
        if getattr(self, "_http", None) is None:
            self._http = httpx.Client(timeout=self.timeout)
            self._gate = threading.BoundedSemaphore(self.max_in_flight)
        return self._http

    def score_pair(self, query, doc_a, doc_b):
        client = self._client()
        endpoint = self.url.rstrip("/") + "/classify"
        body = {"query": query, "doc_a": doc_a, "doc_b": doc_b}
        with self._gate:
            try:
                resp = client.post(endpoint, json=body)
            except httpx.HTTPError as exc:
                raise ClassifierTransportError(f"classifier request failed: {exc}") from exc
        if not 200 <= resp.status_code < 300:
            raise ClassifierTransportError(f"classifier returned HTTP {resp.status_code}")
        try:
            score = float(resp.json()["score"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ClassifierTransportError(f"malformed classifier response: {resp.text[:200]!r}") from exc
        if not 0.0 <= score <= 1.0:
            raise ClassifierTransportError(f"classifier score {score} outside [0, 1]")
        return score

    def close(self) -> None:
        if getattr(self, "_http", None) is not None:
            self._http.close()
            self._http = None

    def __getstate__(self):
        state = self.__dict__.copy()
        state.pop("_http", None)
        state.pop("_gate", None)
        return state


def classify(query: str, doc_a: Document, doc_b: Document, threshold: float,
             backend: PairClassifier | None = None) -> ClassifierVerdict:
    """Score ``(query, doc_a, doc_b)`` and threshold it.

    ``parent_doc_id``/``candidate_doc_id`` are left to the caller, which knows
    which side is the first-stage document.
    """
    threshold = check_threshold(threshold)
    backend = backend if backend is not None else LexicalPairClassifier()
    score = backend.score_pair(query, _text(doc_a), _text(doc_b))
    return ClassifierVerdict(score=score, threshold=threshold)


# -- training data -------------------------------------------------------------

GOLD_GOLD = "gold-gold"
GOLD_DISTRACTOR = "gold-distractor"
DISTRACTOR_DISTRACTOR = "distractor-distractor"


@dataclass(frozen=True)
class TrainingPair:
    query: str
    doc_a: str
    doc_b: str
    label: str
    query_id: str = ""
    doc_a_id: str = ""
    doc_b_id: str = ""
    case: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PairSummary:
    positives: int = 0
    negatives: int = 0
    skipped: int = 0
    by_case: Counter = None

    def __post_init__(self):
        if self.by_case is None:
            self.by_case = Counter()

    def line(self) -> str:
        cases = ", ".join(f"{c}={self.by_case.get(c, 0)}"
                          for c in (GOLD_GOLD, GOLD_DISTRACTOR, DISTRACTOR_DISTRACTOR))
        return (f"pairs: positive={self.positives} negative={self.negatives} "
                f"({cases}); skipped records={self.skipped}")


def parse_ratio(text: str) -> tuple[int, int]:
    try:
        pos, neg = (int(p) for p in str(text).split(":"))
    except ValueError:
        raise ValueError(f"ratio must look like 'P:N', got {text!r}") from None
    if pos < 1 or neg < 1:
        raise ValueError(f"ratio parts must be positive, got {text!r}")
    return pos, neg


def _distractors(record, corpus: Corpus, rng: random.Random, n_sampled: int) -> list[str]:
    gold = set(record.gold_doc_ids)
    if record.candidates:
        return [c for c in record.candidates if c not in gold and c in corpus]
    pool = [d for d in corpus.doc_ids if d not in gold]
    return rng.sample(pool, min(n_sampled, len(pool)))


def gen_training_pairs(dataset: Sequence, corpus: Corpus, ratio: tuple[int, int] | str = (1, 1),
                       seed: int = 0, n_pairs: int | None = None,
                       corpus_distractors: int = 2) -> tuple[list[TrainingPair], PairSummary]:
    """Build labelled ``(query, doc_a, doc_b)`` pairs from gold supporting documents.

    Positives pair two gold documents; negatives pair a gold document with a
    distractor or two distractors. Distractors come from a record's candidate
    pool, else ``corpus_distractors`` uniform samples from the corpus. The
    sampled output hits ``ratio`` (positive:negative) within one pair; when
    ``n_pairs`` is given the total is capped at that size.
    """
    if isinstance(ratio, str):
        ratio = parse_ratio(ratio)
    r_pos, r_neg = ratio
    rng = random.Random(seed)
    summary = PairSummary()

    pos_pool: list[tuple] = []
    neg_pool: list[tuple] = []
    for record in dataset:
        gold = [g for g in dict.fromkeys(record.gold_doc_ids)]
        if len(gold) < 2:
            logger.warning("skipping %s: fewer than two gold documents", record.query_id)
            summary.skipped += 1
            continue
        missing = [g for g in gold if g not in corpus]
        if missing:
            raise KeyError(f"{record.query_id}: gold doc_ids not in corpus: {missing}")
        distractors = _distractors(record, corpus, rng, corpus_distractors)
        if not distractors:
            logger.warning("skipping %s: no distractor documents", record.query_id)
            summary.skipped += 1
            continue
        for a, b in itertools.combinations(gold, 2):
            pos_pool.append((record, a, b, GOLD_GOLD))
        for a, b in itertools.product(gold, distractors):
            neg_pool.append((record, a, b, GOLD_DISTRACTOR))
        for a, b in itertools.combinations(distractors, 2):
            neg_pool.append((record, a, b, DISTRACTOR_DISTRACTOR))

    n_pos, n_neg = _ratio_counts(len(pos_pool), len(neg_pool), r_pos, r_neg, n_pairs)
    chosen_pos = _sample_in_order(pos_pool, n_pos, rng)
    chosen_neg = _sample_in_order(neg_pool, n_neg, rng)

    pairs = []
    for items, label in ((chosen_pos, POSITIVE), (chosen_neg, NEGATIVE)):
        for record, a, b, case in items:
            pairs.append(TrainingPair(
                query=record.text, doc_a=corpus[a].content, doc_b=corpus[b].content,
                label=label, query_id=record.query_id, doc_a_id=a, doc_b_id=b, case=case,
            ))
            summary.by_case[case] += 1
    rng.shuffle(pairs)
    summary.positives = len(chosen_pos)
    summary.negatives = len(chosen_neg)
    return pairs, summary


def _ratio_counts(avail_pos: int, avail_neg: int, r_pos: int, r_neg: int,
                  n_pairs: int | None) -> tuple[int, int]:
    # largest positive count whose matching negative count is available
    n_pos = min(avail_pos, (avail_neg * r_pos) // r_neg if r_neg else avail_pos)
    if n_pairs is not None:
        n_pos = min(n_pos, (n_pairs * r_pos) // (r_pos + r_neg) or (1 if n_pairs > 0 else 0))
    n_neg = min(avail_neg, round(n_pos * r_neg / r_pos))
    if n_pairs is not None:
        n_neg = min(n_neg, n_pairs - n_pos)
    return n_pos, n_neg


def _sample_in_order(pool: list, n: int, rng: random.Random) -> list:
    if n >= len(pool):
        return list(pool)
    picked = sorted(rng.sample(range(len(pool)), n))
    return [pool[i] for i in picked]


def write_pairs(pairs: Iterable[TrainingPair], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_dict(), ensure_ascii=False) + "\n")
