"""Desk-scale dense passage retrieval with multi-positive training."""

__version__ = "0.1.0"

from .data import (
    AnswerPattern,
    DatasetStats,
    Passage,
    QuestionRecord,
    chunk_documents,
    compute_stats,
    ingest_dataset,
    select_training_pairs,
)
from .encoder import EncoderParams, encode, init_params, tokenize
from .evaluation import EvalReport, contains_answer, evaluate
from .index import DenseIndex, SearchResult, encode_corpus, search_top_k
from .lexical import LexicalIndex, bm25_top_k, build_lexical_index, hybrid_top_k
from .trainer import BatchPlan, TrainConfig, bce_loss, build_batch, nll_loss, train

__all__ = [
    "AnswerPattern",
    "BatchPlan",
    "DatasetStats",
    "DenseIndex",
    "EncoderParams",
    "EvalReport",
    "LexicalIndex",
    "Passage",
    "QuestionRecord",
    "SearchResult",
    "TrainConfig",
    "bce_loss",
    "bm25_top_k",
    "build_batch",
    "build_lexical_index",
    "chunk_documents",
    "compute_stats",
    "contains_answer",
    "encode",
    "encode_corpus",
    "evaluate",
    "hybrid_top_k",
    "ingest_dataset",
    "init_params",
    "nll_loss",
    "search_top_k",
    "select_training_pairs",
    "tokenize",
    "train",
]
