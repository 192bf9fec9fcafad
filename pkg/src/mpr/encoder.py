"""Hashed bag-of-embeddings dual-tower text encoder.

Questions and passages are embedded by two fully independent towers that
share an architecture but no parameters: token ids index an embedding
table, the rows are mean-pooled, optionally dropped out, and projected
through an affine layer to the output dimension.  Tokenization is
hash-based (FNV-1a 64-bit modulo a bucket count) so the whole model is
self-contained and deterministic across platforms.

All parameters are stored as float32 (matching the checkpoint format);
arithmetic is done in float64.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass

import numpy as np

CHECKPOINT_MAGIC = b"MPRT"
CHECKPOINT_VERSION = 1

DEFAULT_BUCKETS = 65536
DEFAULT_EMBED_DIM = 128
DEFAULT_OUT_DIM = 128

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

# Maximal runs of Unicode alphanumerics (\w minus underscore).
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def fnv1a_64(data: bytes) -> int:
    """FNV-1a 64-bit hash of a byte string."""
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def split_terms(text: str) -> list[str]:
    """Lowercase and split into alphanumeric runs (the pre-hash token stream)."""
    return _TOKEN_RE.findall(text.lower())


def tokenize(text: str, buckets: int) -> np.ndarray:
    """Map text to hashed token ids in ``[0, buckets)``.

    Returns an int64 array; empty text yields an empty array.
    """
    if buckets < 1:
        raise ValueError(f"buckets must be >= 1, got {buckets}")
    ids = [fnv1a_64(term.encode("utf-8")) % buckets for term in split_terms(text)]
    return np.asarray(ids, dtype=np.int64)


@dataclass
class TowerParams:
    """One tower: embedding table, projection matrix, projection bias."""

    embeddings: np.ndarray  # (buckets, embed_dim) float32
    projection: np.ndarray  # (embed_dim, out_dim) float32
    bias: np.ndarray  # (out_dim,) float32

    def copy(self) -> "TowerParams":
        return TowerParams(
            self.embeddings.copy(), self.projection.copy(), self.bias.copy()
        )


@dataclass
class EncoderParams:
    """Parameters of both towers plus the seed they were initialized from."""

    question: TowerParams
    passage: TowerParams
    seed: int

    @property
    def buckets(self) -> int:
        return self.question.embeddings.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.question.embeddings.shape[1]

    @property
    def out_dim(self) -> int:
        return self.question.projection.shape[1]

    def tower(self, name: str) -> TowerParams:
        if name == "question":
            return self.question
        if name == "passage":
            return self.passage
        raise ValueError(f"unknown tower {name!r}")

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.question.copy(), self.passage.copy(), self.seed)


def init_params(
    seed: int,
    buckets: int = DEFAULT_BUCKETS,
    embed_dim: int = DEFAULT_EMBED_DIM,
    out_dim: int = DEFAULT_OUT_DIM,
) -> EncoderParams:
    """Seeded initialization: embeddings ~ U(-0.05, 0.05), projection ~
    U(-s, s) with s = sqrt(6 / (embed_dim + out_dim)), bias zero.

    The question tower is drawn first, then the passage tower, from a single
    generator, so the full parameter set is determined by ``seed``.
    """
    if min(buckets, embed_dim, out_dim) < 1:
        raise ValueError("all dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    scale = float(np.sqrt(6.0 / (embed_dim + out_dim)))

    def draw_tower() -> TowerParams:
        emb = rng.uniform(-0.05, 0.05, size=(buckets, embed_dim)).astype(np.float32)
        proj = rng.uniform(-scale, scale, size=(embed_dim, out_dim)).astype(np.float32)
        bias = np.zeros(out_dim, dtype=np.float32)
        return TowerParams(emb, proj, bias)

    return EncoderParams(question=draw_tower(), passage=draw_tower(), seed=seed)


def pool_ids(embeddings: np.ndarray, ids: np.ndarray, dtype=np.float64) -> np.ndarray:
    """Mean of embedding rows for ``ids``; zero vector when empty."""
    if ids.size == 0:
        return np.zeros(embeddings.shape[1], dtype=dtype)
    if ids.min() < 0 or ids.max() >= embeddings.shape[0]:
        raise IndexError("token id out of range for embedding table")
    return embeddings[ids].astype(dtype).mean(axis=0)


def dropout_mask(
    rng: np.random.Generator, size: int, rate: float
) -> np.ndarray:
    """Inverted-scaling dropout mask: entries are 0 or 1/(1-rate)."""
    keep = rng.random(size) >= rate
    return keep.astype(np.float64) / (1.0 - rate)


def encode(
    params: EncoderParams,
    tower: str,
    ids: np.ndarray,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Encode one tokenized text to a float64 vector of length ``out_dim``.

    Pipeline: mean-pool the embedding rows, apply one dropout mask to the
    pooled vector when training (``dropout_rate > 0``), then project.
    """
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
    if dropout_rate > 0.0 and rng is None:
        raise ValueError("rng is required when dropout_rate > 0")
    tw = params.tower(tower)
    pooled = pool_ids(tw.embeddings, ids)
    if dropout_rate > 0.0:
        pooled = pooled * dropout_mask(rng, pooled.shape[0], dropout_rate)
    return pooled @ tw.projection.astype(np.float64) + tw.bias.astype(np.float64)


class CheckpointError(ValueError):
    """Raised when a checkpoint file is missing, truncated, or mismatched."""


_HEADER = struct.Struct("<4sIQIII")


def save_params(params: EncoderParams, path) -> None:
    """Write a checkpoint: MPRT magic, version, seed, dims, then both towers'
    arrays as little-endian float32 in row-major order (question tower first:
    embeddings, projection, bias; then the passage tower)."""
    if not 0 <= params.seed < 2**64:
        raise ValueError("seed must fit in an unsigned 64-bit integer")
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                CHECKPOINT_MAGIC,
                CHECKPOINT_VERSION,
                params.seed,
                params.buckets,
                params.embed_dim,
                params.out_dim,
            )
        )
        for tw in (params.question, params.passage):
            for arr in (tw.embeddings, tw.projection, tw.bias):
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_params(path) -> EncoderParams:
    """Read a checkpoint written by :func:`save_params`."""
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise CheckpointError(f"{path}: truncated header (expected magic MPRT)")
        magic, version, seed, buckets, embed_dim, out_dim = _HEADER.unpack(header)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(
                f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}"
            )
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported MPRT version {version}, "
                f"expected {CHECKPOINT_VERSION}"
            )
        body = fh.read()

    shapes = [(buckets, embed_dim), (embed_dim, out_dim), (out_dim,)]
    expected = 2 * sum(int(np.prod(s)) for s in shapes) * 4
    if len(body) != expected:
        raise CheckpointError(
            f"{path}: payload is {len(body)} bytes, expected {expected}"
        )

    offset = 0
    towers = []
    for _ in range(2):
        arrays = []
        for shape in shapes:
            n = int(np.prod(shape)) * 4
            arr = np.frombuffer(body[offset : offset + n], dtype="<f4")
            arrays.append(arr.reshape(shape).astype(np.float32))
            offset += n
        towers.append(TowerParams(*arrays))
    return EncoderParams(question=towers[0], passage=towers[1], seed=seed)
