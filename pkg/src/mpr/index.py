"""Corpus encoding, exact top-k inner-product search, index persistence.

Search is exhaustive (flat); at desk scale nothing approximate is needed
and evaluation stays unconfounded.  Vectors are stored as float32, scores
are accumulated in float64, and ties are broken by ascending passage id so
results are fully deterministic.
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Passage
from .encoder import EncoderParams, encode, tokenize

INDEX_MAGIC = b"MPIX"
INDEX_VERSION = 1

THREADS_ENV = "MPR_THREADS"


def worker_count() -> int:
    """Worker cap from the MPR_THREADS environment variable (default 1).

    Parallelism must never change results; it only partitions work.
    """
    raw = os.environ.get(THREADS_ENV, "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass
class DenseIndex:
    """Flat store of passage vectors with their ids."""

    ids: np.ndarray  # (count,) int64, unique
    vectors: np.ndarray  # (count, dim) float32
    _positions: dict[int, int] = field(default_factory=dict, repr=False)

    @property
    def count(self) -> int:
        return int(self.ids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def position(self, passage_id: int) -> int:
        """Row index of a passage id; KeyError when absent."""
        if not self._positions:
            self._positions.update(
                (int(pid), pos) for pos, pid in enumerate(self.ids)
            )
        return self._positions[passage_id]


@dataclass
class SearchResult:
    """Ranked (passage id, score) pairs, scores non-increasing."""

    ranked: list[tuple[int, float]]

    def ids(self) -> list[int]:
        return [pid for pid, _ in self.ranked]


def _encode_shard(params: EncoderParams, shard: Sequence[Passage]) -> np.ndarray:
    out = np.empty((len(shard), params.out_dim), dtype=np.float32)
    buckets = params.buckets
    for i, passage in enumerate(shard):
        vec = encode(params, "passage", tokenize(passage.body, buckets))
        out[i] = vec.astype(np.float32)
    return out


def encode_corpus(
    params: EncoderParams,
    passages: Sequence[Passage],
    shard_size: int = 1024,
    max_workers: int | None = None,
) -> DenseIndex:
    """Encode every passage body with the passage tower (dropout disabled).

    Order is preserved and the result is independent of ``shard_size`` and
    of the worker count: shards are pure functions of their inputs and are
    reassembled in order.
    """
    if not passages:
        raise ValueError("corpus must be non-empty")
    if shard_size < 1:
        raise ValueError(f"shard_size must be >= 1, got {shard_size}")
    ids = np.asarray([p.id for p in passages], dtype=np.int64)
    if len(set(ids.tolist())) != len(passages):
        raise ValueError("passage ids must be unique within a corpus")

    shards = [
        passages[start : start + shard_size]
        for start in range(0, len(passages), shard_size)
    ]
    workers = max_workers if max_workers is not None else worker_count()
    if workers > 1 and len(shards) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(lambda s: _encode_shard(params, s), shards))
    else:
        blocks = [_encode_shard(params, shard) for shard in shards]
    return DenseIndex(ids=ids, vectors=np.vstack(blocks))


def _scores_for(index: DenseIndex, q_vec: np.ndarray, rows: np.ndarray) -> np.ndarray:
    # einsum keeps the per-row accumulation order fixed regardless of BLAS
    # threading, so scores are reproducible bit for bit.
    return np.einsum(
        "nd,d->n", rows.astype(np.float64), np.asarray(q_vec, dtype=np.float64)
    )


def search_top_k(index: DenseIndex, q_vec: np.ndarray, k: int) -> SearchResult:
    """Exact top-k by inner product; ties broken by ascending passage id."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if index.count == 0:
        return SearchResult(ranked=[])
    scores = _scores_for(index, q_vec, index.vectors)
    order = np.lexsort((index.ids, -scores))[: min(k, index.count)]
    return SearchResult(
        ranked=[(int(index.ids[i]), float(scores[i])) for i in order]
    )


def candidate_scores(
    index: DenseIndex, q_vec: np.ndarray, passage_ids: Sequence[int]
) -> dict[int, float]:
    """Inner-product scores for specific passages, computed exactly as
    :func:`search_top_k` computes them."""
    rows = np.stack([index.vectors[index.position(pid)] for pid in passage_ids])
    scores = _scores_for(index, q_vec, rows)
    return {int(pid): float(s) for pid, s in zip(passage_ids, scores)}


class IndexFileError(ValueError):
    """Raised when an index file is missing, truncated, or mismatched."""


_HEADER = struct.Struct("<4sIIQ")


def save_index(index: DenseIndex, path) -> None:
    """Write MPIX magic, version, dim, count, then ids (u64) and vectors
    (little-endian float32, row-major)."""
    if index.count and index.ids.min() < 0:
        raise ValueError("passage ids must be non-negative for persistence")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, index.dim, index.count))
        fh.write(np.ascontiguousarray(index.ids, dtype="<u8").tobytes())
        fh.write(np.ascontiguousarray(index.vectors, dtype="<f4").tobytes())


def load_index(path) -> DenseIndex:
    """Read an index written by :func:`save_index`."""
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise IndexFileError(f"{path}: truncated header (expected magic MPIX)")
        magic, version, dim, count = _HEADER.unpack(header)
        if magic != INDEX_MAGIC:
            raise IndexFileError(
                f"{path}: bad magic {magic!r}, expected {INDEX_MAGIC!r}"
            )
        if version != INDEX_VERSION:
            raise IndexFileError(
                f"{path}: unsupported MPIX version {version}, "
                f"expected {INDEX_VERSION}"
            )
        body = fh.read()
    id_bytes = count * 8
    vec_bytes = count * dim * 4
    if len(body) != id_bytes + vec_bytes:
        raise IndexFileError(
            f"{path}: payload is {len(body)} bytes, expected {id_bytes + vec_bytes}"
        )
    ids = np.frombuffer(body[:id_bytes], dtype="<u8").astype(np.int64)
    vectors = (
        np.frombuffer(body[id_bytes:], dtype="<f4")
        .reshape(count, dim)
        .astype(np.float32)
    )
    return DenseIndex(ids=ids, vectors=vectors)
