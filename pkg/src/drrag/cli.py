"""``drrag`` command line: ingest, run, eval, recompute, gen-pairs, synth.

Exit codes: 0 success, 1 usage error, 2 data error, 3 backend transport error.
Options may also come from a flat JSON config file (``--config`` or the
``DRRAG_CONFIG`` environment variable) whose keys are flag names; flags on
the command line win over the file, which wins over built-in defaults.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .classifier import (ClassifierTransportError, HTTPPairClassifier, LexicalPairClassifier,
                         gen_training_pairs, parse_ratio, write_pairs)
from .corpus import CorpusError, compute_stats, ingest_corpus, write_corpus
from .evaluation import (EvalError, EvalReport, aggregate, evaluate_run, load_dataset)
from .llm import HTTPChatLLM, LLMTransportError, MockLLM
from .pipeline import CIS_MODES, PipelineConfig, answer_many
from .retrievers import (BM25Retriever, DimensionMismatchError, HashingEmbedder,
                         SimilarityRetriever, load_embeddings)
from .synth import SynthError, SynthSpec, write_synth
from ._validation import STRATEGIES

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3

MANIFEST = "manifest.json"
DOCUMENTS = "documents.jsonl"
INVERTED = "inverted_index.json"
VECTORS = "vectors.npy"
INDEX_FORMAT = 1

log = logging.getLogger("drrag")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- helpers -------------------------------------------------------------------

def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _check_writable(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)


def _write_jsonl(rows, path: Path) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


# -- ingest --------------------------------------------------------------------

def _manifest_for(corpus_path: Path, embeddings_path: Path | None, embedder: HashingEmbedder,
                  count: int, mean_len: float) -> dict:
    return {
        "format": INDEX_FORMAT,
        "corpus_sha256": _sha256_file(corpus_path),
        "embeddings_sha256": _sha256_file(embeddings_path) if embeddings_path else None,
        "embedder_id": embedder.embedder_id,
        "dim": embedder.dim,
        "count": count,
        "mean_token_length": mean_len,
    }


def _inverted_index(bm25: BM25Retriever) -> dict:
    postings = {}
    for term, (idx, _) in sorted(bm25.postings_.items()):
        postings[term] = [[bm25.doc_ids_[i], bm25.term_freqs_[i][term]] for i in idx.tolist()]
    return {
        "k1": bm25.k1,
        "b": bm25.b,
        "avgdl": bm25.avgdl_,
        "doc_len": dict(zip(bm25.doc_ids_, (int(n) for n in bm25.doc_len_))),
        "postings": postings,
    }


def cmd_ingest(args) -> int:
    corpus_path = Path(args.corpus)
    out = Path(args.out)
    embeddings_path = Path(args.embeddings) if args.embeddings else None
    embedder = HashingEmbedder(dim=args.dim)

    # cheap check first: identical inputs mean nothing to do
    manifest_path = out / MANIFEST
    if manifest_path.is_file() and corpus_path.is_file():
        old = json.loads(manifest_path.read_text(encoding="utf-8"))
        probe = {
            "format": INDEX_FORMAT,
            "corpus_sha256": _sha256_file(corpus_path),
            "embeddings_sha256": _sha256_file(embeddings_path) if embeddings_path else None,
            "embedder_id": embedder.embedder_id,
            "dim": embedder.dim,
        }
        if all(old.get(key) == val for key, val in probe.items()) and \
                all((out / name).is_file() for name in (DOCUMENTS, INVERTED, VECTORS)):
            print(f"{out}: up to date ({old['count']} docs, dim {old['dim']})")
            return EXIT_OK

    corpus = ingest_corpus(corpus_path)
    embeddings = None
    if embeddings_path is not None:
        embeddings = load_embeddings(embeddings_path)
        dims = {v.shape[0] for v in embeddings.values()}
        if dims and dims != {embedder.dim}:
            raise DimensionMismatchError(
                f"sidecar dimension {dims.pop()} does not match configured dimension {embedder.dim}"
            )
        unknown = sorted(set(embeddings) - set(corpus.doc_ids))
        if unknown:
            log.warning("sidecar has %d vectors for unknown doc_ids (ignored)", len(unknown))
    sm = SimilarityRetriever(embedder=embedder).fit(corpus, embeddings=embeddings)
    bm25 = BM25Retriever().fit(corpus)
    stats = compute_stats(corpus)

    out.mkdir(parents=True, exist_ok=True)
    write_corpus(corpus, out / DOCUMENTS)
    _write_json(_inverted_index(bm25), out / INVERTED)
    np.save(out / VECTORS, sm.matrix_)
    manifest = _manifest_for(corpus_path, embeddings_path, embedder, stats.count, stats.mean_token_length)
    _write_json(manifest, manifest_path)
    print(f"{out}: indexed {stats.count} docs, dim {embedder.dim}, "
          f"mean length {stats.mean_token_length:.2f} tokens")
    return EXIT_OK


def load_index(index_dir: Path, retriever: str):
    """Load the ingested corpus and build the requested retriever from it."""
    manifest_path = index_dir / MANIFEST
    if not manifest_path.is_file():
        raise DataError(f"{index_dir}: no {MANIFEST}; run 'drrag ingest' first")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != INDEX_FORMAT:
        raise DataError(f"{index_dir}: unsupported index format {manifest.get('format')!r}")
    corpus = ingest_corpus(index_dir / DOCUMENTS)
    if len(corpus) != manifest["count"]:
        raise DataError(f"{index_dir}: manifest count {manifest['count']} != {len(corpus)} documents")
    if retriever == "bm25":
        return BM25Retriever().fit(corpus), manifest
    embedder = HashingEmbedder(dim=manifest["dim"])
    if embedder.embedder_id != manifest["embedder_id"]:
        raise DataError(f"{index_dir}: unknown embedder {manifest['embedder_id']!r}")
    matrix = np.load(index_dir / VECTORS)
    return SimilarityRetriever.from_matrix(corpus, matrix, embedder=embedder), manifest


# -- run -----------------------------------------------------------------------

def _http_url(selector: str) -> str | None:
    # accepts "http:http://host/path" as well as a bare "http://host/path"
    if selector.startswith("http:http"):
        return selector[len("http:"):]
    if selector.startswith(("http://", "https://")):
        return selector
    return None


def _make_classifier(selector: str | None, threshold: float, timeout: float):
    if selector is None:
        return None
    if selector == "lexical":
        return LexicalPairClassifier(threshold=threshold)
    url = _http_url(selector)
    if url:
        return HTTPPairClassifier(url=url, threshold=threshold, timeout=timeout)
    raise UsageError(f"--classifier must be 'lexical' or 'http:URL', got {selector!r}")


def _make_llm(selector: str, args):
    if selector == "mock":
        return MockLLM()
    if selector.startswith("mock:"):
        path = Path(selector[len("mock:"):])
        if not path.is_file():
            raise DataError(f"mock fixture file not found: {path}")
        return MockLLM.from_file(path)
    url = _http_url(selector)
    if url:
        return HTTPChatLLM(url=url, model=args.llm_model, timeout=args.llm_timeout,
                           max_in_flight=args.jobs, retries=args.llm_retries,
                           api_key=args.llm_api_key)
    raise UsageError(f"--llm must be 'mock', 'mock:FIXTURE' or 'http:URL', got {selector!r}")


def cmd_run(args) -> int:
    try:
        cfg = PipelineConfig(strategy=args.strategy, k=args.k, k1=args.k1, k2=args.k2,
                             classifier_threshold=args.threshold, cis_mode=args.cis_mode)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if cfg.strategy in ("cis", "cfs") and not args.classifier:
        raise UsageError(f"strategy {cfg.strategy} requires --classifier")
    out = Path(args.out)
    _check_writable(out, args.force)

    retriever = "bm25" if cfg.strategy == "bm25" else ("sm" if cfg.strategy == "sm" else args.retriever)
    index, _ = load_index(Path(args.index), retriever)
    dataset = load_dataset(args.dataset)
    corpus = index.corpus_
    missing = sorted({d for q in dataset for d in (*q.gold_doc_ids, *q.candidates) if d not in corpus})
    if missing:
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise DataError(f"dataset references {len(missing)} doc_ids absent from the index: {shown}")

    classifier = _make_classifier(args.classifier if cfg.strategy in ("cis", "cfs") else None,
                                  cfg.classifier_threshold, args.classifier_timeout)
    llm = _make_llm(args.llm, args)
    timing = args.timing
    if timing == "auto":
        timing = "off" if isinstance(llm, MockLLM) else "wall"
    timer = time.perf_counter if timing == "wall" else None

    records = answer_many(dataset, cfg, index, classifier, llm, jobs=args.jobs,
                          keep_going=args.keep_going, max_tokens=args.max_tokens,
                          temperature=args.temperature, timer=timer)
    _write_jsonl(records, out)
    failed = sum(1 for r in records if r.get("error"))
    print(f"{out}: {len(records)} records ({failed} failed), strategy={cfg.strategy} "
          f"k={cfg.k} k1={cfg.k1} k2={cfg.k2}")
    return EXIT_BACKEND if failed else EXIT_OK


# -- eval / recompute ----------------------------------------------------------

def cmd_eval(args) -> int:
    if args.out:
        _check_writable(Path(args.out), args.force)
    corpus = None
    if args.corpus:
        corpus = ingest_corpus(args.corpus)
    report = evaluate_run(args.results, args.dataset, corpus=corpus, baseline_path=args.baseline)
    print(report.format_table())
    if args.out:
        _write_json(report.to_dict(), Path(args.out))
    return EXIT_OK


HEADLINE = ("em", "f1", "acc", "recall_rate", "actual_numbers", "steps", "time_per_query",
            "n_queries", "recall_excluded", "errors")


def cmd_recompute(args) -> int:
    try:
        data = json.loads(Path(args.report).read_text(encoding="utf-8"))
        rows = data["per_query"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{args.report}: not an eval report ({exc})") from None
    fresh = aggregate(rows)
    report = EvalReport(per_query=rows, **fresh)
    print(report.format_table())
    diffs = [key for key in HEADLINE if data.get(key) != fresh[key]]
    if diffs:
        for key in diffs:
            print(f"mismatch {key}: report={data.get(key)!r} recomputed={fresh[key]!r}", file=sys.stderr)
        return EXIT_DATA
    print("aggregates match")
    return EXIT_OK


# -- gen-pairs / synth ---------------------------------------------------------

def cmd_gen_pairs(args) -> int:
    try:
        ratio = parse_ratio(args.ratio)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    _check_writable(out, args.force)
    corpus = ingest_corpus(args.corpus)
    dataset = load_dataset(args.dataset)
    try:
        pairs, summary = gen_training_pairs(dataset, corpus, ratio=ratio, seed=args.seed,
                                            n_pairs=args.n_pairs,
                                            corpus_distractors=args.corpus_distractors)
    except KeyError as exc:
        raise DataError(str(exc.args[0])) from None
    write_pairs(pairs, out)
    print(summary.line())
    return EXIT_OK


def cmd_synth(args) -> int:
    out_corpus, out_dataset = Path(args.out_corpus), Path(args.out_dataset)
    _check_writable(out_corpus, args.force)
    _check_writable(out_dataset, args.force)
    spec = SynthSpec(num_queries=args.queries, distractors_per_query=args.distractors,
                     bridge_entity_pool=args.bridge_pool, vocab_size=args.vocab_size,
                     seed=args.seed, embed_dim=args.dim)
    docs, queries = write_synth(spec, out_corpus, out_dataset)
    print(f"wrote {len(docs)} docs to {out_corpus} and {len(queries)} queries to {out_dataset}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def _positive(value: str) -> int:
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value!r}")
    return n


def _nonnegative(value: str) -> int:
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {value!r}") from None
    if n < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {value!r}")
    return n


def _unit(value: str) -> float:
    try:
        x = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number in [0, 1], got {value!r}") from None
    if not 0.0 <= x <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a number in [0, 1], got {value!r}")
    return x


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="drrag", description="Two-stage dynamic-relevance retrieval for multi-hop QA.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", metavar="PATH",
                        help="flat JSON file of option defaults keyed by flag name "
                             "(default: $DRRAG_CONFIG if set)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("ingest", help="index a JSONL corpus",
                       description="Index a corpus: documents, inverted index, vectors and a manifest.")
    p.add_argument("--corpus", required=True, metavar="PATH", help="corpus JSONL ({doc_id, title, text})")
    p.add_argument("--out", required=True, metavar="INDEXDIR", help="index directory to (re)write")
    p.add_argument("--embeddings", metavar="PATH", help="optional sidecar JSONL of {doc_id, vector}")
    p.add_argument("--dim", type=_positive, default=256, help="embedding dimension (default: 256)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("run", help="answer a dataset with one retrieval strategy",
                       description="Retrieve context and answer every dataset query with one LLM call each.")
    p.add_argument("--strategy", choices=STRATEGIES, default="cfs", help="retrieval strategy (default: cfs)")
    p.add_argument("--k", type=_positive, default=4, help="context budget (default: 4)")
    p.add_argument("--k1", type=_positive, help="first-stage depth (default: ceil(k/2))")
    p.add_argument("--k2", type=_positive, help="second-stage candidates per parent (default: k-k1, min 1)")
    p.add_argument("--threshold", type=_unit, default=0.5, help="classifier positive threshold (default: 0.5)")
    p.add_argument("--cis-mode", choices=CIS_MODES, default="equation",
                   help="cis pairing: first-stage documents only, or all other context documents")
    p.add_argument("--retriever", choices=("sm", "bm25"), default="sm",
                   help="base retriever for qdc/cis/cfs (default: sm)")
    p.add_argument("--dataset", required=True, metavar="PATH", help="dataset JSONL")
    p.add_argument("--index", required=True, metavar="INDEXDIR", help="directory written by 'drrag ingest'")
    p.add_argument("--classifier", metavar="SEL", help="'lexical' or 'http:URL' (required for cis/cfs)")
    p.add_argument("--classifier-timeout", type=float, default=10.0, help="classifier timeout seconds")
    p.add_argument("--llm", default="mock", metavar="SEL",
                   help="'mock', 'mock:FIXTURE.jsonl' or 'http:URL' of a chat-completions endpoint")
    p.add_argument("--llm-model", default="default", help="model name sent to the HTTP LLM")
    p.add_argument("--llm-timeout", type=float, default=60.0, help="HTTP LLM timeout seconds")
    p.add_argument("--llm-retries", type=_nonnegative, default=0, help="HTTP LLM retries (default: 0)")
    p.add_argument("--llm-api-key", help="bearer token for the HTTP LLM")
    p.add_argument("--max-tokens", type=_positive, default=512, help="completion token limit")
    p.add_argument("--temperature", type=float, default=0.0, help="sampling temperature")
    p.add_argument("--seed", type=int, default=0, help="recorded seed; retrieval itself is deterministic")
    p.add_argument("--jobs", type=_positive, default=1, help="queries answered concurrently")
    p.add_argument("--keep-going", action="store_true", help="record backend failures as error rows")
    p.add_argument("--timing", choices=("auto", "wall", "off"), default="auto",
                   help="wall_time_ms: measured (wall), null (off), or off only for mock LLMs (auto)")
    p.add_argument("--out", required=True, metavar="PATH", help="results JSONL")
    p.add_argument("--force", action="store_true", help="overwrite an existing --out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score a results file",
                       description="Score results against a dataset and print the report table.")
    p.add_argument("--results", required=True, metavar="PATH", help="results JSONL from 'drrag run'")
    p.add_argument("--dataset", required=True, metavar="PATH", help="dataset JSONL")
    p.add_argument("--baseline", metavar="PATH", help="results JSONL used to normalise Time and Step")
    p.add_argument("--corpus", metavar="PATH", help="corpus JSONL; checks gold doc_ids exist")
    p.add_argument("--out", metavar="PATH", help="write the JSON report here")
    p.add_argument("--force", action="store_true", help="overwrite an existing --out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("recompute", help="recompute report aggregates from its per-query rows",
                       description="Check a JSON report: recompute header values from per-query rows.")
    p.add_argument("--report", required=True, metavar="PATH", help="JSON report from 'drrag eval'")
    p.set_defaults(func=cmd_recompute)

    p = sub.add_parser("gen-pairs", help="emit classifier training pairs",
                       description="Emit labelled (query, doc_a, doc_b) pairs from gold supporting documents.")
    p.add_argument("--dataset", required=True, metavar="PATH", help="dataset JSONL")
    p.add_argument("--corpus", required=True, metavar="PATH", help="corpus JSONL")
    p.add_argument("--ratio", default="1:1", help="positive:negative ratio (default: 1:1)")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--n-pairs", type=_positive, help="cap on the number of pairs")
    p.add_argument("--corpus-distractors", type=_positive, default=2,
                   help="distractors sampled per record without candidates (default: 2)")
    p.add_argument("--out", required=True, metavar="PATH", help="pairs JSONL")
    p.add_argument("--force", action="store_true", help="overwrite an existing --out")
    p.set_defaults(func=cmd_gen_pairs)

    p = sub.add_parser("synth", help="generate a synthetic two-hop corpus and dataset",
                       description="Generate a synthetic two-hop corpus and dataset.")
    p.add_argument("--queries", type=_positive, default=100, help="number of queries (default: 100)")
    p.add_argument("--distractors", type=_nonnegative, default=3, help="distractors per query (default: 3)")
    p.add_argument("--bridge-pool", type=_positive, help="distinct bridge entities (default: one per query)")
    p.add_argument("--vocab-size", type=_positive, default=20000, help="entity vocabulary size")
    p.add_argument("--dim", type=_positive, default=256, help="embedding dimension to construct for")
    p.add_argument("--seed", type=int, default=7, help="generation seed (default: 7)")
    p.add_argument("--out-corpus", required=True, metavar="PATH", help="corpus JSONL to write")
    p.add_argument("--out-dataset", required=True, metavar="PATH", help="dataset JSONL to write")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.set_defaults(func=cmd_synth)
    return parser


def _subparsers(parser: argparse.ArgumentParser) -> dict[str, argparse.ArgumentParser]:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return dict(action.choices)
    return {}


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Install config-file values as parser defaults so explicit flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    path = known.config or os.environ.get("DRRAG_CONFIG")
    if not path:
        return
    try:
        config = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON ({exc.msg})") from None
    if not isinstance(config, dict):
        raise UsageError(f"config file {path} must hold a flat JSON object")
    config = {str(key).lstrip("-").replace("-", "_"): value for key, value in config.items()}
    known_dests = set()
    for sub in _subparsers(parser).values():
        dests = {a.dest for a in sub._actions if a.dest not in ("help", "func")}
        known_dests |= dests
        sub.set_defaults(**{k: v for k, v in config.items() if k in dests})
    unknown = sorted(set(config) - known_dests - {"verbose"})
    if unknown:
        raise UsageError(f"config file {path}: unknown keys {unknown}")
    # config values satisfy required flags
    for sub in _subparsers(parser).values():
        for action in sub._actions:
            if action.required and action.dest in config:
                action.required = False


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except UsageError as exc:
        print(f"drrag: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"drrag: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ClassifierTransportError, LLMTransportError) as exc:
        print(f"drrag: backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (DataError, CorpusError, EvalError, SynthError, DimensionMismatchError,
            FileNotFoundError, ValueError, KeyError) as exc:
        print(f"drrag: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
