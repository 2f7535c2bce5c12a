"""Two-stage dynamic-relevance retrieval for multi-hop question answering."""

__version__ = "0.1.0"

from .classifier import (ConstantPairClassifier, HTTPPairClassifier, LexicalPairClassifier,
                         PairClassifier, classify, gen_training_pairs)
from .corpus import Corpus, Document, ingest_corpus, tokenize
from .evaluation import QueryRecord, evaluate_run, load_dataset, score_results
from .llm import HTTPChatLLM, MockLLM, parse_answer
from .pipeline import DRRAG, PipelineConfig, RetrievalTrace, answer_query, retrieve_context
from .retrievers import BM25Retriever, HashingEmbedder, SimilarityRetriever
from .synth import SynthSpec, generate

__all__ = [
    "BM25Retriever", "ConstantPairClassifier", "Corpus", "DRRAG", "Document", "HTTPChatLLM",
    "HTTPPairClassifier", "HashingEmbedder", "LexicalPairClassifier", "MockLLM", "PairClassifier",
    "PipelineConfig", "QueryRecord", "RetrievalTrace", "SimilarityRetriever", "SynthSpec",
    "answer_query", "classify", "evaluate_run", "gen_training_pairs", "generate", "ingest_corpus",
    "load_dataset", "parse_answer", "retrieve_context", "score_results", "tokenize",
]
