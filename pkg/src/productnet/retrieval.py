"""Candidate sourcing engines: BM25 keyword search, exact cosine KNN, seeded random sampling.

All engines are immutable after build and deterministic: ranking ties break by
ascending product id, and random sampling is reproducible from its seed.
"""

from __future__ import annotations

import random
from collections import Counter

import numpy as np

from .corpus import EmbeddingMatrix
from .featurize import tokenize

BM25_K1 = 1.2
BM25_B = 0.75


class InvertedIndex:
    """Token postings over the concatenated text fields of a product pool."""

    def __init__(self, pool):
        self.postings: dict[str, list[tuple[str, int]]] = {}
        self.doc_len: dict[str, int] = {}
        counts_by_token: dict[str, list[tuple[str, int]]] = {}
        for product in pool:
            tokens = tokenize(product.all_text())
            self.doc_len[product.id] = len(tokens)
            for token, tf in Counter(tokens).items():
                counts_by_token.setdefault(token, []).append((product.id, tf))
        for token, posting in counts_by_token.items():
            self.postings[token] = sorted(posting)
        self.n_docs = len(self.doc_len)
        self.avg_doc_len = (
            sum(self.doc_len.values()) / self.n_docs if self.n_docs else 0.0
        )

    def document_frequency(self, token: str) -> int:
        return len(self.postings.get(token, ()))

    def idf(self, token: str) -> float:
        df = self.document_frequency(token)
        return float(np.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5)))


def build_keyword_index(pool) -> InvertedIndex:
    return InvertedIndex(pool)


def keyword_search(
    index: InvertedIndex, query: str, k: int, exclude=frozenset()
) -> list[tuple[str, float]]:
    """BM25-ranked (id, score) pairs; zero-score documents are dropped.

    Repeated query tokens contribute once per occurrence.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0 or index.n_docs == 0:
        return []
    scores: dict[str, float] = {}
    for token in tokenize(query):
        posting = index.postings.get(token)
        if not posting:
            continue
        idf = index.idf(token)
        for pid, tf in posting:
            if pid in exclude:
                continue
            norm = BM25_K1 * (1.0 - BM25_B + BM25_B * index.doc_len[pid] / index.avg_doc_len)
            scores[pid] = scores.get(pid, 0.0) + idf * tf * (BM25_K1 + 1.0) / (tf + norm)
    ranked = sorted(
        ((pid, s) for pid, s in scores.items() if s > 0.0),
        key=lambda item: (-item[1], item[0]),
    )
    return ranked[:k]


class KnnIndex:
    """Exact cosine-similarity search over an embedding matrix.

    Rows with zero norm are flagged and never returned: a product with no
    signal at all should not surface as "similar" to anything.
    """

    def __init__(self, matrix: EmbeddingMatrix):
        self.matrix = matrix
        values = matrix.values.astype(np.float64)
        self.norms = np.linalg.norm(values, axis=1)
        self.nonzero = self.norms > 0.0
        self._unit = np.zeros_like(values)
        if self.nonzero.any():
            self._unit[self.nonzero] = values[self.nonzero] / self.norms[self.nonzero, None]

    @property
    def dim(self) -> int:
        return self.matrix.dim

    def search(self, query, k: int, exclude=frozenset()) -> list[tuple[str, float]]:
        return knn_search(self, query, k, exclude)


def knn_search(index: KnnIndex, query, k: int, exclude=frozenset()) -> list[tuple[str, float]]:
    """Top-k (id, cosine) among non-excluded nonzero rows; ties break by ascending id."""
    if k < 0:
        raise ValueError("k must be >= 0")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (index.dim,):
        raise ValueError(f"query dim {query.shape} != index dim ({index.dim},)")
    qnorm = np.linalg.norm(query)
    if k == 0 or qnorm == 0.0 or len(index.matrix) == 0:
        return []
    sims = index._unit @ (query / qnorm)
    ids = index.matrix.ids
    candidates = [
        (ids[i], float(sims[i]))
        for i in np.flatnonzero(index.nonzero)
        if ids[i] not in exclude
    ]
    candidates.sort(key=lambda item: (-item[1], item[0]))
    return candidates[:k]


def random_sample(ids, k: int, seed: int, exclude=frozenset()) -> list[str]:
    """Uniform sample without replacement over non-excluded ids; deterministic per seed."""
    if k < 0:
        raise ValueError("k must be >= 0")
    available = sorted(pid for pid in ids if pid not in exclude)
    rng = random.Random(seed)
    return rng.sample(available, min(k, len(available)))
