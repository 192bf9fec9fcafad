"""Okapi BM25 baseline and BM25 + dense hybrid scoring.

Tokenization matches the dense side before hashing (lowercase, split on
non-alphanumeric runs) so the two systems see the same term stream.  The
idf form ``ln(1 + (N - df + 0.5) / (df + 0.5))`` keeps every score
non-negative.
"""

from __future__ import annotations

import math
import struct
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .data import Passage
from .encoder import EncoderParams, encode, split_terms, tokenize
from .index import DenseIndex, SearchResult, candidate_scores, search_top_k

LEXICAL_MAGIC = b"MPLX"
LEXICAL_VERSION = 1

DEFAULT_K1 = 0.9
DEFAULT_B = 0.4
DEFAULT_HYBRID_WEIGHT = 1.1


@dataclass
class LexicalIndex:
    """Inverted index with the statistics BM25 needs."""

    postings: dict[str, list[tuple[int, int]]]  # term -> [(passage id, tf)]
    doc_lengths: dict[int, int]
    avg_len: float
    doc_count: int
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B


def build_lexical_index(
    passages: Sequence[Passage], k1: float = DEFAULT_K1, b: float = DEFAULT_B
) -> LexicalIndex:
    """Index passage bodies; postings lists are sorted by passage id."""
    if not passages:
        raise ValueError("corpus must be non-empty")
    postings: dict[str, list[tuple[int, int]]] = {}
    doc_lengths: dict[int, int] = {}
    for passage in passages:
        terms = split_terms(passage.body)
        doc_lengths[passage.id] = len(terms)
        for term, tf in Counter(terms).items():
            postings.setdefault(term, []).append((passage.id, tf))
    for plist in postings.values():
        plist.sort(key=lambda entry: entry[0])
    avg_len = sum(doc_lengths.values()) / len(doc_lengths)
    return LexicalIndex(
        postings=postings,
        doc_lengths=doc_lengths,
        avg_len=avg_len,
        doc_count=len(doc_lengths),
        k1=k1,
        b=b,
    )


def bm25_scores(index: LexicalIndex, query: str) -> dict[int, float]:
    """BM25 score for every passage matching at least one query term.

    Repeated query terms contribute once per occurrence.
    """
    acc: dict[int, float] = {}
    for term in split_terms(query):
        plist = index.postings.get(term)
        if not plist:
            continue
        df = len(plist)
        idf = math.log(1.0 + (index.doc_count - df + 0.5) / (df + 0.5))
        for pid, tf in plist:
            dl = index.doc_lengths[pid]
            norm = index.k1 * (1.0 - index.b + index.b * dl / index.avg_len)
            acc[pid] = acc.get(pid, 0.0) + idf * tf * (index.k1 + 1.0) / (tf + norm)
    return acc


def _rank(scored: dict[int, float], k: int) -> SearchResult:
    ranked = sorted(scored.items(), key=lambda item: (-item[1], item[0]))
    return SearchResult(ranked=ranked[:k])


def bm25_top_k(index: LexicalIndex, query: str, k: int) -> SearchResult:
    """Top-k passages by BM25; ties broken by ascending passage id.

    A query with no indexed terms yields an empty result.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return _rank(bm25_scores(index, query), k)


def hybrid_top_k(
    lex: LexicalIndex,
    dense: DenseIndex,
    params: EncoderParams,
    query: str,
    k: int,
    weight: float = DEFAULT_HYBRID_WEIGHT,
) -> SearchResult:
    """Linear combination of dense and BM25 scores over a candidate pool.

    The pool is the union of the top-2k results from each system; each
    candidate is re-scored as ``dense + weight * bm25`` and the top-k is
    returned.  ``weight = 0`` degenerates to the dense ranking of the pool.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if weight < 0:
        raise ValueError(f"weight must be >= 0, got {weight}")
    q_vec = encode(params, "question", tokenize(query, params.buckets))
    dense_top = search_top_k(dense, q_vec, 2 * k)
    lex_top = bm25_top_k(lex, query, 2 * k)

    pool = sorted({pid for pid, _ in dense_top.ranked + lex_top.ranked})
    if not pool:
        return SearchResult(ranked=[])
    try:
        dense_by_id = candidate_scores(dense, q_vec, pool)
    except KeyError as exc:
        raise ValueError(
            f"passage id {exc.args[0]} is missing from the dense index; "
            "both indexes must cover the same corpus"
        ) from exc
    lex_by_id = bm25_scores(lex, query)
    combined = {
        pid: dense_by_id[pid] + weight * lex_by_id.get(pid, 0.0) for pid in pool
    }
    return _rank(combined, k)


class LexicalFileError(ValueError):
    """Raised when a lexical index file is missing, truncated, or mismatched."""


_HEADER = struct.Struct("<4sIdddQQ")


def save_lexical(index: LexicalIndex, path) -> None:
    """Write MPLX magic, version, constants, doc lengths, then postings.

    Document lengths are written sorted by passage id and terms sorted
    lexicographically, so equal indexes serialize to identical bytes.
    """
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                LEXICAL_MAGIC,
                LEXICAL_VERSION,
                index.k1,
                index.b,
                index.avg_len,
                index.doc_count,
                len(index.postings),
            )
        )
        for pid in sorted(index.doc_lengths):
            fh.write(struct.pack("<QI", pid, index.doc_lengths[pid]))
        for term in sorted(index.postings):
            raw = term.encode("utf-8")
            plist = index.postings[term]
            fh.write(struct.pack("<II", len(raw), len(plist)))
            fh.write(raw)
            for pid, tf in plist:
                fh.write(struct.pack("<QI", pid, tf))


def load_lexical(path) -> LexicalIndex:
    """Read a lexical index written by :func:`save_lexical`."""
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise LexicalFileError(f"{path}: truncated header (expected magic MPLX)")
        magic, version, k1, b, avg_len, doc_count, n_terms = _HEADER.unpack(header)
        if magic != LEXICAL_MAGIC:
            raise LexicalFileError(
                f"{path}: bad magic {magic!r}, expected {LEXICAL_MAGIC!r}"
            )
        if version != LEXICAL_VERSION:
            raise LexicalFileError(
                f"{path}: unsupported MPLX version {version}, "
                f"expected {LEXICAL_VERSION}"
            )
        try:
            doc_lengths: dict[int, int] = {}
            for _ in range(doc_count):
                pid, length = struct.unpack("<QI", fh.read(12))
                doc_lengths[pid] = length
            postings: dict[str, list[tuple[int, int]]] = {}
            for _ in range(n_terms):
                term_len, n_postings = struct.unpack("<II", fh.read(8))
                term = fh.read(term_len).decode("utf-8")
                plist = []
                for _ in range(n_postings):
                    pid, tf = struct.unpack("<QI", fh.read(12))
                    plist.append((pid, tf))
                postings[term] = plist
        except struct.error as exc:
            raise LexicalFileError(f"{path}: truncated MPLX payload") from exc
    return LexicalIndex(
        postings=postings,
        doc_lengths=doc_lengths,
        avg_len=avg_len,
        doc_count=doc_count,
        k1=k1,
        b=b,
    )
