"""Answer-containment matching, top-k retrieval accuracy, and the
positive-count ablation driver.

A question is a hit at k when any of its k highest-ranked passages contains
one of its answer patterns; accuracy is the percentage of hits.  The first
hit rank is recorded per question for rank-distribution diagnostics.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

from .data import AnswerPattern, Passage, QuestionRecord
from .encoder import EncoderParams, encode, tokenize
from .index import DenseIndex, SearchResult, encode_corpus, search_top_k
from .lexical import LexicalIndex, bm25_top_k, hybrid_top_k
from .trainer import TrainConfig, train

Retriever = Callable[[QuestionRecord], SearchResult]

DEFAULT_KS = (20, 100)


@dataclass
class EvalReport:
    """Per-k accuracy percentages plus per-question first-hit ranks."""

    accuracy: dict[int, float]
    hit_ranks: list[tuple[int, int | None]]  # (question id, 1-based rank or None)


def _normalize(text: str) -> str:
    return " ".join(text.lower().split())


def contains_answer(
    passage: Passage,
    answers: Sequence[AnswerPattern],
    include_title: bool = False,
) -> bool:
    """True when any answer pattern matches the passage.

    Literal patterns match case-insensitively as substrings after whitespace
    normalization; regex patterns run an unanchored search on the raw body.
    The title participates only when ``include_title`` is set.
    """
    if not answers:
        raise ValueError("answers must be non-empty")
    haystacks = [passage.body] + ([passage.title] if include_title else [])
    normalized = [_normalize(h) for h in haystacks]
    for answer in answers:
        if answer.kind == "literal":
            needle = _normalize(answer.pattern)
            if any(needle in h for h in normalized):
                return True
        else:
            if any(re.search(answer.pattern, h) for h in haystacks):
                return True
    return False


def evaluate(
    questions: Sequence[QuestionRecord],
    retriever: Retriever,
    corpus_by_id: Mapping[int, Passage],
    ks: Sequence[int] = DEFAULT_KS,
    include_title: bool = False,
) -> EvalReport:
    """Top-k answer-containment accuracy over a question set.

    The retriever is called once per question and must return at least
    ``max(ks)`` results when the corpus allows.
    """
    if not questions:
        raise ValueError("question set must be non-empty")
    if not ks or min(ks) < 1:
        raise ValueError("ks must be non-empty with every k >= 1")
    k_max = max(ks)
    hit_ranks: list[tuple[int, int | None]] = []
    for question in questions:
        result = retriever(question)
        first_hit: int | None = None
        for rank, (pid, _score) in enumerate(result.ranked[:k_max], start=1):
            if contains_answer(corpus_by_id[pid], question.answers, include_title):
                first_hit = rank
                break
        hit_ranks.append((question.id, first_hit))
    accuracy = {
        k: 100.0 * sum(1 for _, r in hit_ranks if r is not None and r <= k)
        / len(questions)
        for k in ks
    }
    return EvalReport(accuracy=accuracy, hit_ranks=hit_ranks)


def make_dense_retriever(
    params: EncoderParams, index: DenseIndex, k: int
) -> Retriever:
    def retrieve(question: QuestionRecord) -> SearchResult:
        q_vec = encode(params, "question", tokenize(question.question, params.buckets))
        return search_top_k(index, q_vec, k)

    return retrieve


def make_bm25_retriever(index: LexicalIndex, k: int) -> Retriever:
    def retrieve(question: QuestionRecord) -> SearchResult:
        return bm25_top_k(index, question.question, k)

    return retrieve


def make_hybrid_retriever(
    lex: LexicalIndex,
    dense: DenseIndex,
    params: EncoderParams,
    k: int,
    weight: float,
) -> Retriever:
    def retrieve(question: QuestionRecord) -> SearchResult:
        return hybrid_top_k(lex, dense, params, question.question, k, weight)

    return retrieve


@dataclass
class AblationRow:
    max_positives: int
    accuracy: dict[int, float]


def ablation(
    records: Sequence[QuestionRecord],
    corpus: Sequence[Passage],
    config: TrainConfig,
    m_values: Sequence[int] = (1, 2, 3),
    ks: Sequence[int] = DEFAULT_KS,
    shard_size: int = 1024,
) -> list[AblationRow]:
    """Train one model per positive-count cap and evaluate each on the same
    corpus with everything else (including the seed) held fixed."""
    if any(m < 1 for m in m_values):
        raise ValueError("every m value must be >= 1")
    corpus_by_id = {p.id: p for p in corpus}
    rows = []
    for m in m_values:
        cfg = replace(config, max_positives=m)
        params, _ = train(records, cfg)
        index = encode_corpus(params, corpus, shard_size=shard_size)
        retriever = make_dense_retriever(params, index, max(ks))
        report = evaluate(records, retriever, corpus_by_id, ks)
        rows.append(AblationRow(max_positives=m, accuracy=report.accuracy))
    return rows
