"""Base retrievers: Okapi BM25 over an inverted index and cosine similarity
matching over hashed bag-of-token embeddings.

Both retrievers follow the scikit-learn estimator protocol: ``fit`` takes a
:class:`~drrag.corpus.Corpus`, ``transform`` maps query strings to a
``(n_queries, n_documents)`` score matrix, and ``retrieve`` returns a ranked
top-k list for a single query.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_positive_int
from .corpus import Corpus, Document, tokenize

# Scores equal to this many decimals are ties and fall back to doc_id order.
SCORE_DECIMALS = 12
DEFAULT_DIM = 256


class DimensionMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredDoc:
    doc_id: str
    score: float
    rank: int

    def to_dict(self) -> dict:
        return {"doc_id": self.doc_id, "score": self.score, "rank": self.rank}

    @classmethod
    def from_dict(cls, d: dict) -> "ScoredDoc":
        return cls(doc_id=d["doc_id"], score=float(d["score"]), rank=int(d["rank"]))


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray
    norm: float

    @classmethod
    def from_values(cls, values) -> "EmbeddingVector":
        values = np.asarray(values, dtype=np.float64)
        return cls(values=values, norm=float(np.linalg.norm(values)))

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    if a.norm == 0.0 or b.norm == 0.0:
        return 0.0
    return float(np.dot(a.values, b.values) / (a.norm * b.norm))


def rank_scores(doc_ids, id_order: np.ndarray, scores: np.ndarray, k: int,
                drop_zero: bool = False) -> list[ScoredDoc]:
    """Top-k by score, ties broken by ascending doc_id.

    ``id_order[i]`` is the position of ``doc_ids[i]`` in sorted doc_id order.
    """
    k = check_positive_int(k, "k")
    if len(doc_ids) == 0:
        return []
    keys = np.round(scores, SCORE_DECIMALS)
    order = np.lexsort((id_order, -keys))
    if drop_zero:
        order = order[keys[order] > 0.0]
    return [
        ScoredDoc(doc_id=doc_ids[i], score=float(scores[i]), rank=r)
        for r, i in enumerate(order[:k], start=1)
    ]


def _sorted_positions(doc_ids: list[str]) -> np.ndarray:
    pos = np.empty(len(doc_ids), dtype=np.int64)
    for rank, i in enumerate(sorted(range(len(doc_ids)), key=doc_ids.__getitem__)):
        pos[i] = rank
    return pos


class HashingEmbedder(TransformerMixin, BaseEstimator):
    """Deterministic hashed bag-of-tokens embedder.

    Each token is hashed (BLAKE2b, process-independent) into one of ``dim``
    buckets; counts are accumulated and the vector is L2-normalised unless it
    is all zeros. Stateless, so ``fit`` is a no-op.
    """

    def __init__(self, dim: int = DEFAULT_DIM):
        self.dim = dim

    @property
    def embedder_id(self) -> str:
        return f"hashing-blake2b-{self.dim}"

    def bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.dim

    def embed(self, text: str) -> EmbeddingVector:
        check_positive_int(self.dim, "dim")
        values = np.zeros(self.dim, dtype=np.float64)
        for token in tokenize(text):
            values[self.bucket(token)] += 1.0
        norm = float(np.linalg.norm(values))
        if norm > 0.0:
            values /= norm
            norm = float(np.linalg.norm(values))
        return EmbeddingVector(values=values, norm=norm)

    def fit(self, X=None, y=None):
        return self

    def transform(self, X) -> np.ndarray:
        if isinstance(X, str):
            raise TypeError("transform expects an iterable of strings, not a single string")
        rows = [self.embed(text).values for text in X]
        if not rows:
            return np.zeros((0, self.dim))
        return np.vstack(rows)

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.requires_fit = False
        return tags


_default_embedder = HashingEmbedder()


def embed(text: str) -> EmbeddingVector:
    """Embed with the reference 256-bucket hashing embedder."""
    return _default_embedder.embed(text)


def concat_query(query_text: str, doc: Document) -> str:
    """Build the second-stage query: query, title (if any) and text, newline-separated."""
    return f"{query_text}\n{doc.content}"


class _CorpusRetriever(BaseEstimator):
    """Shared plumbing for retrievers fitted on a corpus."""

    drop_zero = False

    def _check_corpus(self, corpus) -> Corpus:
        if not isinstance(corpus, Corpus):
            corpus = Corpus.from_documents(corpus)
        return corpus

    def _index_ids(self, corpus: Corpus) -> None:
        self.corpus_ = corpus
        self.doc_ids_ = corpus.doc_ids
        self.id_order_ = _sorted_positions(self.doc_ids_)
        self.position_ = {d: i for i, d in enumerate(self.doc_ids_)}

    def score_text(self, query_text: str) -> np.ndarray:
        raise NotImplementedError

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "corpus_")
        if isinstance(X, str):
            raise TypeError("transform expects an iterable of strings, not a single string")
        rows = [self.score_text(q) for q in X]
        if not rows:
            return np.zeros((0, len(self.doc_ids_)))
        return np.vstack(rows)

    def retrieve(self, query_text: str, k: int) -> list[ScoredDoc]:
        check_is_fitted(self, "corpus_")
        scores = self.score_text(query_text)
        return rank_scores(self.doc_ids_, self.id_order_, scores, k, drop_zero=self.drop_zero)

    def predict(self, X, k: int = 10) -> list[list[str]]:
        """Ranked doc_id lists for each query string."""
        return [[s.doc_id for s in self.retrieve(q, k)] for q in X]


class BM25Retriever(_CorpusRetriever):
    """Okapi BM25 with ``idf = ln((N - df + 0.5) / (df + 0.5) + 1)``.

    Documents scoring exactly zero (no shared token) are never returned.
    Duplicate query tokens contribute once per occurrence.
    """

    drop_zero = True

    def __init__(self, k1: float = 1.2, b: float = 0.75):
        self.k1 = k1
        self.b = b

    def fit(self, corpus, y=None):
        corpus = self._check_corpus(corpus)
        self._index_ids(corpus)
        self.term_freqs_ = [Counter(tokenize(d.content)) for d in corpus]
        self.doc_len_ = np.array([sum(tf.values()) for tf in self.term_freqs_], dtype=np.float64)
        n = len(corpus)
        self.avgdl_ = float(self.doc_len_.mean()) if n else 0.0

        postings: dict[str, list[tuple[int, int]]] = {}
        for i, tf in enumerate(self.term_freqs_):
            for term, count in tf.items():
                postings.setdefault(term, []).append((i, count))

        self.idf_ = {}
        self.postings_ = {}
        for term, plist in postings.items():
            df = len(plist)
            self.idf_[term] = math.log((n - df + 0.5) / (df + 0.5) + 1.0)
            idx = np.array([p[0] for p in plist], dtype=np.int64)
            tf = np.array([p[1] for p in plist], dtype=np.float64)
            self.postings_[term] = (idx, self._term_weight(self.idf_[term], tf, self.doc_len_[idx]))
        return self

    def _term_weight(self, idf, tf, dl):
        norm = 1.0 - self.b + self.b * (dl / self.avgdl_) if self.avgdl_ > 0 else 1.0
        return idf * tf * (self.k1 + 1.0) / (tf + self.k1 * norm)

    def bm25_score(self, query_tokens: list[str], doc_id: str) -> float:
        check_is_fitted(self, "corpus_")
        if doc_id not in self.position_:
            raise KeyError(f"unknown doc_id {doc_id!r}")
        i = self.position_[doc_id]
        tf = self.term_freqs_[i]
        score = 0.0
        for token in query_tokens:
            count = tf.get(token, 0)
            if count:
                score += float(self._term_weight(self.idf_[token], float(count), self.doc_len_[i]))
        return score

    def score_tokens(self, query_tokens: list[str]) -> np.ndarray:
        scores = np.zeros(len(self.doc_ids_), dtype=np.float64)
        for token in query_tokens:
            hit = self.postings_.get(token)
            if hit is not None:
                idx, weight = hit
                scores[idx] += weight
        return scores

    def score_text(self, query_text: str) -> np.ndarray:
        return self.score_tokens(tokenize(query_text))


class SimilarityRetriever(_CorpusRetriever):
    """Exhaustive cosine-similarity search over document embeddings.

    ``embeddings`` passed to :meth:`fit` (doc_id -> vector, e.g. from a sidecar
    file) override the embedder for documents; queries always go through the
    embedder, whose dimension must match.
    """

    def __init__(self, embedder=None):
        self.embedder = embedder

    def _embedder(self):
        return self.embedder if self.embedder is not None else _default_embedder

    def fit(self, corpus, y=None, embeddings: dict | None = None):
        corpus = self._check_corpus(corpus)
        self._index_ids(corpus)
        embedder = self._embedder()
        dim = embedder.dim
        matrix = np.zeros((len(corpus), dim), dtype=np.float64)
        for i, doc in enumerate(corpus):
            if embeddings is not None and doc.doc_id in embeddings:
                vec = np.asarray(embeddings[doc.doc_id], dtype=np.float64)
                if vec.shape != (dim,):
                    raise DimensionMismatchError(
                        f"embedding for {doc.doc_id!r} has dimension {vec.shape[0]}, "
                        f"embedder produces {dim}"
                    )
                norm = np.linalg.norm(vec)
                matrix[i] = vec / norm if norm > 0 else vec
            else:
                matrix[i] = embedder.embed(doc.content).values
        self.matrix_ = matrix
        self.dim_ = dim
        return self

    @classmethod
    def from_matrix(cls, corpus: Corpus, matrix: np.ndarray, embedder=None) -> "SimilarityRetriever":
        """Rebuild a fitted retriever from a saved row-normalised matrix (rows in corpus order)."""
        self = cls(embedder=embedder)
        corpus = self._check_corpus(corpus)
        matrix = np.asarray(matrix, dtype=np.float64)
        dim = self._embedder().dim
        if matrix.shape != (len(corpus), dim):
            raise DimensionMismatchError(
                f"saved vectors have shape {matrix.shape}, expected ({len(corpus)}, {dim})"
            )
        self._index_ids(corpus)
        self.matrix_ = matrix
        self.dim_ = dim
        return self

    def score_text(self, query_text: str) -> np.ndarray:
        q = self._embedder().embed(query_text)
        if q.dim != self.dim_:
            raise DimensionMismatchError(f"query dimension {q.dim} != index dimension {self.dim_}")
        if q.norm == 0.0 or len(self.doc_ids_) == 0:
            return np.zeros(len(self.doc_ids_), dtype=np.float64)
        return self.matrix_ @ (q.values / q.norm)


def retrieve_sm(query_text: str, k: int, index: SimilarityRetriever) -> list[ScoredDoc]:
    return index.retrieve(query_text, k)


def retrieve_bm25(query_text: str, k: int, index: BM25Retriever) -> list[ScoredDoc]:
    return index.retrieve(query_text, k)


def bm25_score(query_tokens: list[str], doc_id: str, index: BM25Retriever) -> float:
    return index.bm25_score(query_tokens, doc_id)


def load_embeddings(path: str | Path) -> dict[str, np.ndarray]:
    """Read a ``{"doc_id", "vector"}`` JSONL sidecar; all vectors must share a dimension."""
    vectors: dict[str, np.ndarray] = {}
    dim = None
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                doc_id = record["doc_id"]
                vec = np.asarray(record["vector"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed embedding record ({exc})") from None
            if vec.ndim != 1 or not np.all(np.isfinite(vec)):
                raise ValueError(f"{path}:{lineno}: vector must be a flat list of finite reals")
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise DimensionMismatchError(
                    f"{path}:{lineno}: dimension {vec.shape[0]} differs from {dim}"
                )
            if doc_id in vectors:
                raise ValueError(f"{path}:{lineno}: duplicate doc_id {doc_id!r}")
            vectors[doc_id] = vec
    return vectors
