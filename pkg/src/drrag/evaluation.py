"""Answer metrics (EM, token F1, containment accuracy), retrieval recall and
run-level aggregation.

Accuracy here is a local convention: a prediction is correct when some
normalised gold answer occurs as a contiguous token run inside the
normalised prediction. It is therefore never below exact match.
"""

from __future__ import annotations

import json
import re
import string
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .corpus import tokenize

_PUNCT = set(string.punctuation)
_ARTICLES = re.compile(r"\b(a|an|the)\b")


class EvalError(ValueError):
    """Results and dataset do not line up."""


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    text: str
    gold_answers: tuple[str, ...] = ()
    gold_doc_ids: tuple[str, ...] = ()
    candidates: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        d = {
            "query_id": self.query_id,
            "question": self.text,
            "answers": list(self.gold_answers),
            "gold_doc_ids": list(self.gold_doc_ids),
        }
        if self.candidates:
            d["candidates"] = list(self.candidates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "QueryRecord":
        return cls(
            query_id=str(d["query_id"]),
            text=d["question"],
            gold_answers=tuple(d.get("answers", ())),
            gold_doc_ids=tuple(d.get("gold_doc_ids", ())),
            candidates=tuple(d.get("candidates") or ()),
        )


def load_dataset(path: str | Path) -> list[QueryRecord]:
    records = []
    seen = set()
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = QueryRecord.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise EvalError(f"{path}:{lineno}: malformed dataset record ({exc})") from None
            if rec.query_id in seen:
                raise EvalError(f"{path}:{lineno}: duplicate query_id {rec.query_id!r}")
            seen.add(rec.query_id)
            records.append(rec)
    return records


def write_dataset(records: Sequence[QueryRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), ensure_ascii=False) + "\n")


def normalize_answer(s: str) -> str:
    s = s.lower()
    s = "".join(ch for ch in s if ch not in _PUNCT)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def _answer_tokens(s: str) -> list[str]:
    return tokenize(normalize_answer(s))


def exact_match(pred: str, golds: Sequence[str]) -> int:
    p = normalize_answer(pred)
    return int(any(p == normalize_answer(g) for g in golds))


def _f1(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    if not pred_tokens or not gold_tokens:
        return float(pred_tokens == gold_tokens)
    common = Counter(pred_tokens) & Counter(gold_tokens)
    same = sum(common.values())
    if same == 0:
        return 0.0
    precision = same / len(pred_tokens)
    recall = same / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def token_f1(pred: str, golds: Sequence[str]) -> float:
    p = _answer_tokens(pred)
    return max(_f1(p, _answer_tokens(g)) for g in golds)


def _contains(haystack: list[str], needle: list[str]) -> bool:
    if not needle:
        return not haystack
    n = len(needle)
    return any(haystack[i:i + n] == needle for i in range(len(haystack) - n + 1))


def accuracy(pred: str, golds: Sequence[str]) -> int:
    p = _answer_tokens(pred)
    return int(any(_contains(p, _answer_tokens(g)) for g in golds))


def recall_rate(context_doc_ids: Sequence[str], gold_doc_ids: Sequence[str]) -> float:
    gold = set(gold_doc_ids)
    if not gold:
        raise EvalError("recall is undefined for an empty gold set")
    return len(gold & set(context_doc_ids)) / len(gold)


def _mean(values: Sequence[float]) -> float | None:
    return sum(values) / len(values) if values else None


@dataclass
class EvalReport:
    em: float | None
    f1: float | None
    acc: float | None
    recall_rate: float | None
    actual_numbers: float | None
    steps: float | None
    time_per_query: float | None
    per_query: list[dict] = field(default_factory=list)
    n_queries: int = 0
    recall_excluded: int = 0
    errors: int = 0
    normalized_time: float | None = None
    normalized_steps: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def format_table(self) -> str:
        cols = [("EM", self.em), ("F1", self.f1), ("Acc", self.acc),
                ("Recall", self.recall_rate), ("Actual", self.actual_numbers),
                ("Step", self.steps), ("Time(ms)", self.time_per_query)]
        if self.normalized_time is not None or self.normalized_steps is not None:
            cols += [("Step(norm)", self.normalized_steps), ("Time(norm)", self.normalized_time)]
        head = " ".join(f"{name:>10}" for name, _ in cols)
        row = " ".join(f"{'-' if v is None else format(v, '.2f'):>10}" for _, v in cols)
        foot = f"queries={self.n_queries} recall_excluded={self.recall_excluded} errors={self.errors}"
        return f"{head}\n{row}\n{foot}"


def aggregate(per_query: list[dict]) -> dict:
    """Header values of a report from its per-query rows (in row order)."""
    ok = [r for r in per_query if not r.get("error")]
    with_recall = [r for r in ok if r.get("recall") is not None]
    timed = [r for r in ok if r.get("wall_time_ms") is not None]
    return {
        "em": _mean([r["em"] for r in ok]),
        "f1": _mean([r["f1"] for r in ok]),
        "acc": _mean([r["acc"] for r in ok]),
        "recall_rate": _mean([r["recall"] for r in with_recall]),
        "actual_numbers": _mean([r["actual"] for r in ok]),
        "steps": _mean([r["llm_calls"] for r in ok]),
        "time_per_query": _mean([r["wall_time_ms"] for r in timed]),
        "n_queries": len(per_query),
        "recall_excluded": len(ok) - len(with_recall),
        "errors": len(per_query) - len(ok),
    }


def load_results(path: str | Path) -> list[dict]:
    rows = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise EvalError(f"{path}:{lineno}: malformed result record ({exc.msg})") from None
    return rows


def score_results(results: Sequence[dict], dataset: Sequence[QueryRecord],
                  corpus=None) -> EvalReport:
    by_id = {r.query_id: r for r in dataset}
    counts = Counter(r["query_id"] for r in results)
    dup = sorted(q for q, n in counts.items() if n > 1)
    if dup:
        raise EvalError(f"duplicate query_id in results: {dup}")
    unknown = sorted(r["query_id"] for r in results if r["query_id"] not in by_id)
    if unknown:
        raise EvalError(f"result query_ids missing from dataset: {unknown}")
    if corpus is not None:
        missing = sorted({g for r in dataset for g in r.gold_doc_ids if g not in corpus})
        if missing:
            raise EvalError(f"gold doc_ids missing from corpus: {missing}")

    rows = []
    for res in sorted(results, key=lambda r: r["query_id"]):
        rec = by_id[res["query_id"]]
        if res.get("error"):
            rows.append({"query_id": rec.query_id, "error": res["error"]})
            continue
        pred = res.get("answer", "")
        golds = rec.gold_answers or ("",)
        context = res.get("context_doc_ids", [])
        rows.append({
            "query_id": rec.query_id,
            "em": 100.0 * exact_match(pred, golds),
            "f1": 100.0 * token_f1(pred, golds),
            "acc": 100.0 * accuracy(pred, golds),
            "recall": 100.0 * recall_rate(context, rec.gold_doc_ids) if rec.gold_doc_ids else None,
            "actual": float(len(context)),
            "llm_calls": float(res.get("llm_calls", 0)),
            "wall_time_ms": res.get("wall_time_ms"),
        })
    return EvalReport(per_query=rows, **aggregate(rows))


def apply_baseline(report: EvalReport, baseline: EvalReport) -> EvalReport:
    """Express time and steps relative to a baseline run (baseline = 1.00)."""
    if report.time_per_query is not None and baseline.time_per_query:
        report.normalized_time = report.time_per_query / baseline.time_per_query
    if report.steps is not None and baseline.steps:
        report.normalized_steps = report.steps / baseline.steps
    return report


def evaluate_run(results_path, dataset_path, corpus=None, baseline_path=None) -> EvalReport:
    dataset = load_dataset(dataset_path)
    report = score_results(load_results(results_path), dataset, corpus)
    if baseline_path is not None:
        apply_baseline(report, score_results(load_results(baseline_path), dataset, corpus))
    return report
