"""Knowledge-base ingestion, document access and the shared tokenizer."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


class CorpusError(ValueError):
    """Raised for unreadable or inconsistent corpus input."""


def tokenize(text: str) -> list[str]:
    """Lowercase ``text`` and split it on runs of non-alphanumeric characters.

    The same rule backs BM25, the lexical pair classifier and token F1.

    >>> tokenize("Peter Andreas Heiberg's son")
    ['peter', 'andreas', 'heiberg', 's', 'son']
    """
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    title: str = ""

    @property
    def content(self) -> str:
        """Title and body as one string; this is what retrievers index."""
        if self.title:
            return f"{self.title}\n{self.text}"
        return self.text

    def to_dict(self) -> dict:
        return {"doc_id": self.doc_id, "title": self.title, "text": self.text}


@dataclass(frozen=True)
class CorpusStats:
    count: int
    mean_token_length: float


@dataclass(frozen=True)
class Corpus:
    """Immutable, id-ordered collection of documents.

    Documents keep ingestion order; ``doc_ids`` and positional indexes used by
    the retrievers refer to that order.
    """

    documents: tuple[Document, ...]
    stats: CorpusStats = field(init=False)
    _by_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        by_id = {}
        for doc in self.documents:
            if doc.doc_id in by_id:
                raise CorpusError(f"duplicate doc_id {doc.doc_id!r}")
            by_id[doc.doc_id] = doc
        object.__setattr__(self, "_by_id", by_id)
        object.__setattr__(self, "stats", compute_stats(self.documents))

    @classmethod
    def from_documents(cls, documents: Iterable[Document]) -> "Corpus":
        return cls(tuple(documents))

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self) -> Iterator[Document]:
        return iter(self.documents)

    def __contains__(self, doc_id: object) -> bool:
        return doc_id in self._by_id

    def __getitem__(self, doc_id: str) -> Document:
        try:
            return self._by_id[doc_id]
        except KeyError:
            raise KeyError(f"unknown doc_id {doc_id!r}") from None

    def get(self, doc_id: str, default=None):
        return self._by_id.get(doc_id, default)

    @property
    def doc_ids(self) -> list[str]:
        return [d.doc_id for d in self.documents]


def compute_stats(documents: Iterable[Document]) -> CorpusStats:
    lengths = [len(tokenize(d.content)) for d in documents]
    mean = sum(lengths) / len(lengths) if lengths else 0.0
    return CorpusStats(count=len(lengths), mean_token_length=mean)


def parse_document(record: dict) -> Document:
    doc_id = record.get("doc_id")
    text = record.get("text")
    title = record.get("title") or ""
    if not isinstance(doc_id, str) or not doc_id:
        raise CorpusError("missing or non-string doc_id")
    if not isinstance(text, str) or not text:
        raise CorpusError(f"empty or missing text for {doc_id!r}")
    if not isinstance(title, str):
        raise CorpusError(f"non-string title for {doc_id!r}")
    return Document(doc_id=doc_id, text=text, title=title)


def ingest_corpus(path: str | Path) -> Corpus:
    """Load a JSONL corpus of ``{"doc_id", "title", "text"}`` records.

    Unknown fields are ignored. Errors carry the 1-based line number.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"corpus file not found: {path}")
    documents: list[Document] = []
    seen: dict[str, int] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                raise CorpusError(f"{path}:{lineno}: blank line")
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(record, dict):
                raise CorpusError(f"{path}:{lineno}: record is not an object")
            try:
                doc = parse_document(record)
            except CorpusError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from None
            if doc.doc_id in seen:
                raise CorpusError(
                    f"{path}:{lineno}: duplicate doc_id {doc.doc_id!r} "
                    f"(first seen on line {seen[doc.doc_id]})"
                )
            seen[doc.doc_id] = lineno
            documents.append(doc)
    return Corpus(tuple(documents))


def write_corpus(documents: Iterable[Document], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for doc in documents:
            fh.write(json.dumps(doc.to_dict(), ensure_ascii=False) + "\n")
