"""Deterministic product featurization: hashed n-gram text vectors and image-vector lookup.

The text encoder hashes word unigrams plus character 3-5 grams (with word
boundary markers) into a fixed number of buckets via 64-bit FNV-1a, then mean
pools. It is dependency-free of any trained vocabulary, so identical inputs
produce identical vectors on every platform.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, TransformerMixin

from .corpus import TEXT_FIELDS, EmbeddingMatrix, Product, UnknownReferenceError

DEFAULT_HASH_DIM = 1 << 18
NGRAM_MIN = 3
NGRAM_MAX = 5
PROJECTION_SEED = 0x5EED
PROJECTION_DIM = 32

_TOKEN_RE = re.compile(r"[^\W_]+")  # alphanumeric runs, unicode-aware, no underscore

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a; the one hash used everywhere buckets must be stable."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def tokenize(text: str) -> list[str]:
    """Lowercase and split on every non-alphanumeric character; empty tokens dropped."""
    return _TOKEN_RE.findall(text.lower())


# token -> uint64 feature hashes (unigram + char n-grams); tokens repeat heavily
_feature_hash_cache: dict[str, np.ndarray] = {}


def _token_feature_hashes(token: str) -> np.ndarray:
    cached = _feature_hash_cache.get(token)
    if cached is not None:
        return cached
    features = [token]
    marked = f"<{token}>"
    for n in range(NGRAM_MIN, NGRAM_MAX + 1):
        features.extend(marked[i : i + n] for i in range(len(marked) - n + 1))
    hashes = np.array([fnv1a64(f.encode("utf-8")) for f in features], dtype=np.uint64)
    if len(_feature_hash_cache) < 1_000_000:
        _feature_hash_cache[token] = hashes
    return hashes


@dataclass(frozen=True)
class HashedVector:
    """Sparse mean-pooled feature vector over hash buckets."""

    dim: int
    indices: np.ndarray  # sorted int64 bucket ids
    weights: np.ndarray  # float64, parallel to indices

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.dim)
        dense[self.indices] = self.weights
        return dense


def _bucketize(hashes: np.ndarray, dim: int) -> np.ndarray:
    if dim & (dim - 1):
        raise ValueError("dim must be a power of two")
    return (hashes & np.uint64(dim - 1)).astype(np.int64)


def hash_embed(tokens, dim: int = DEFAULT_HASH_DIM) -> HashedVector:
    """Hash every word unigram and char 3-5 gram of each token, then mean pool."""
    if not tokens:
        return HashedVector(dim, np.empty(0, dtype=np.int64), np.empty(0))
    all_hashes = np.concatenate([_token_feature_hashes(t) for t in tokens])
    buckets = _bucketize(all_hashes, dim)
    indices, counts = np.unique(buckets, return_counts=True)
    weights = counts.astype(np.float64) / max(1, len(buckets))
    return HashedVector(dim, indices, weights)


def hash_counts(tokens, dim: int = DEFAULT_HASH_DIM) -> HashedVector:
    """Raw hashed word-unigram counts (no n-grams, no pooling); the count model input."""
    if not tokens:
        return HashedVector(dim, np.empty(0, dtype=np.int64), np.empty(0))
    hashes = np.array([fnv1a64(t.encode("utf-8")) for t in tokens], dtype=np.uint64)
    indices, counts = np.unique(_bucketize(hashes, dim), return_counts=True)
    return HashedVector(dim, indices, counts.astype(np.float64))


def field_vectors(product: Product, dim: int = DEFAULT_HASH_DIM) -> list[HashedVector]:
    """One hashed vector per catalog text field, in TEXT_FIELDS order."""
    return [hash_embed(tokenize(product.field_text(f)), dim) for f in TEXT_FIELDS]


def vectors_to_csr(vectors: list[HashedVector], dim: int) -> sp.csr_matrix:
    indptr = np.zeros(len(vectors) + 1, dtype=np.int64)
    for i, v in enumerate(vectors):
        indptr[i + 1] = indptr[i] + v.nnz
    if len(vectors):
        indices = np.concatenate([v.indices for v in vectors])
        data = np.concatenate([v.weights for v in vectors])
    else:
        indices, data = np.empty(0, dtype=np.int64), np.empty(0)
    return sp.csr_matrix((data, indices, indptr), shape=(len(vectors), dim))


# ---------------------------------------------------------------------------
# Image vectors


def image_vector(product: Product, images: EmbeddingMatrix | None, d_img: int) -> np.ndarray:
    """Stored image vector, or the zero vector when the product has no image.

    A reference to a missing row is an error: a broken link must not be
    silently treated as "no image".
    """
    if product.image_embedding_id is None:
        return np.zeros(d_img)
    if images is None or product.image_embedding_id not in images:
        raise UnknownReferenceError(
            f"product {product.id!r} references missing image embedding "
            f"{product.image_embedding_id!r}"
        )
    row = np.asarray(images.row(product.image_embedding_id), dtype=np.float64)
    if row.shape[0] != d_img:
        raise ValueError(f"image store dim {row.shape[0]} != expected {d_img}")
    return row


# ---------------------------------------------------------------------------
# Bootstrap embedding (round 0, before any trained model exists)

def _fnv1a64_batch(values: np.ndarray) -> np.ndarray:
    """Vectorized FNV-1a over struct.pack('<QQ', PROJECTION_SEED, v) for each v."""
    n = len(values)
    data = np.empty((n, 16), dtype=np.uint64)
    seed = np.uint64(PROJECTION_SEED)
    v = values.astype(np.uint64)
    for j in range(8):
        data[:, j] = (seed >> np.uint64(8 * j)) & np.uint64(0xFF)
        data[:, 8 + j] = (v >> np.uint64(8 * j)) & np.uint64(0xFF)
    h = np.full(n, _FNV_OFFSET, dtype=np.uint64)
    prime = np.uint64(_FNV_PRIME)
    for j in range(16):
        h = (h ^ data[:, j]) * prime  # uint64 wrap-around is the modulus
    return h


def _projection_signs(buckets: np.ndarray) -> np.ndarray:
    """Fixed +-1 sign rows (n, PROJECTION_DIM) derived from the seeded hash."""
    h = _fnv1a64_batch(np.atleast_1d(np.asarray(buckets)))
    bits = (h[:, None] >> np.arange(PROJECTION_DIM, dtype=np.uint64)) & np.uint64(1)
    return np.where(bits.astype(bool), 1.0, -1.0)


def project_hashed(vector: HashedVector) -> np.ndarray:
    """Compress a hashed vector to PROJECTION_DIM dims with the fixed sign projection."""
    if not vector.nnz:
        return np.zeros(PROJECTION_DIM)
    return vector.weights @ _projection_signs(vector.indices)


def initial_embedding(
    product: Product,
    images: EmbeddingMatrix | None,
    d_img: int,
    dim: int = DEFAULT_HASH_DIM,
) -> np.ndarray:
    """Bootstrap vector: 7 projected text blocks + the image vector (length 224 + d_img)."""
    blocks = [project_hashed(v) for v in field_vectors(product, dim)]
    blocks.append(image_vector(product, images, d_img))
    return np.concatenate(blocks)


def initial_embedding_matrix(
    pool, images: EmbeddingMatrix | None, d_img: int, dim: int = DEFAULT_HASH_DIM
) -> EmbeddingMatrix:
    rows = [initial_embedding(p, images, d_img, dim) for p in pool]
    return EmbeddingMatrix(pool.ids, np.asarray(rows, dtype=np.float32))


# ---------------------------------------------------------------------------
# Estimator-style wrappers


class HashedNgramVectorizer(BaseEstimator, TransformerMixin):
    """Stateless transformer from raw strings to mean-pooled hashed n-gram rows."""

    def __init__(self, dim: int = DEFAULT_HASH_DIM):
        self.dim = dim

    def fit(self, X, y=None):
        return self

    def transform(self, X) -> sp.csr_matrix:
        return vectors_to_csr([hash_embed(tokenize(text), self.dim) for text in X], self.dim)


class HashedCountVectorizer(BaseEstimator, TransformerMixin):
    """Stateless transformer from raw strings to hashed unigram count rows."""

    def __init__(self, dim: int = DEFAULT_HASH_DIM):
        self.dim = dim

    def fit(self, X, y=None):
        return self

    def transform(self, X) -> sp.csr_matrix:
        return vectors_to_csr([hash_counts(tokenize(text), self.dim) for text in X], self.dim)
