import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from productnet.corpus import EmbeddingMatrix, Pool, Product
from productnet.retrieval import (
    KnnIndex,
    build_keyword_index,
    keyword_search,
    knn_search,
    random_sample,
)


def bm25_oracle(docs, query_tokens, k1=1.2, b=0.75):
    """Hand BM25: independent arithmetic over token lists."""
    N = len(docs)
    avgdl = sum(len(t) for t in docs.values()) / N

    def idf(term):
        df = sum(1 for toks in docs.values() if term in toks)
        return math.log(1 + (N - df + 0.5) / (df + 0.5))

    scores = {}
    for pid, toks in docs.items():
        s, dl = 0.0, len(toks)
        for term in query_tokens:
            tf = toks.count(term)
            if tf:
                s += idf(term) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / avgdl))
        if s > 0:
            scores[pid] = s
    return scores


def knn_oracle(ids, values, query, k, exclude=frozenset()):
    """Brute-force full sort over cosine similarities."""
    out = []
    qn = np.linalg.norm(query)
    for i, pid in enumerate(ids):
        if pid in exclude:
            continue
        n = np.linalg.norm(values[i])
        if n == 0:
            continue
        out.append((pid, float(values[i] @ query / (n * qn))))
    out.sort(key=lambda t: (-t[1], t[0]))
    return out[:k]


def pool_of(texts: dict):
    return Pool([Product(id=pid, title=text) for pid, text in texts.items()])


class TestInvertedIndex:
    def test_two_one_word_products(self):
        idx = build_keyword_index(pool_of({"p1": "fireplace", "p2": "grill"}))
        assert idx.n_docs == 2
        assert idx.postings["fireplace"] == [("p1", 1)]
        assert idx.postings["grill"] == [("p2", 1)]

    def test_empty_pool(self):
        idx = build_keyword_index(Pool())
        assert idx.n_docs == 0
        assert keyword_search(idx, "anything", 5) == []

    def test_document_frequency(self):
        idx = build_keyword_index(pool_of({"p1": "gas grill", "p2": "gas fireplace"}))
        assert idx.document_frequency("gas") == 2
        assert idx.document_frequency("grill") == 1

    def test_all_seven_fields_indexed(self):
        p = Product(
            id="p1",
            title="alpha",
            description="bravo",
            bullets=("charlie",),
            brand="delta",
            keywords=(("echo",), ("foxtrot",), ("golf",)),
        )
        idx = build_keyword_index(Pool([p]))
        for tok in ("alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf"):
            assert idx.document_frequency(tok) == 1


class TestKeywordSearch:
    def test_containment(self):
        idx = build_keyword_index(pool_of({"p1": "gas fireplace", "p2": "outdoor grill"}))
        assert [pid for pid, _ in keyword_search(idx, "fireplace", 10)] == ["p1"]

    def test_tie_break_by_ascending_id(self):
        idx = build_keyword_index(pool_of({"p2": "fireplace", "p1": "fireplace"}))
        assert [pid for pid, _ in keyword_search(idx, "fireplace", 10)] == ["p1", "p2"]

    def test_matches_hand_oracle(self):
        # frozen from the oracle below: p2=1.2767329363865665, p1=0.47000362924573563
        docs = {
            "p1": ["gas", "fireplace", "insert"],
            "p2": ["electric", "fireplace", "heater", "fan"],
            "p3": ["outdoor", "grill"],
        }
        idx = build_keyword_index(pool_of({pid: " ".join(toks) for pid, toks in docs.items()}))
        got = keyword_search(idx, "fireplace heater", 10)
        expected = bm25_oracle(docs, ["fireplace", "heater"])
        assert expected["p2"] == pytest.approx(1.2767329363865665, abs=1e-12)
        assert [pid for pid, _ in got] == ["p2", "p1"]
        for pid, score in got:
            assert score == pytest.approx(expected[pid], abs=1e-9)

    def test_zero_score_docs_excluded(self):
        idx = build_keyword_index(pool_of({"p1": "fireplace", "p2": "grill"}))
        assert all(pid != "p2" for pid, _ in keyword_search(idx, "fireplace", 10))

    def test_exclude_set_honored(self):
        idx = build_keyword_index(pool_of({"p1": "fireplace", "p2": "fireplace"}))
        got = keyword_search(idx, "fireplace", 10, exclude={"p1"})
        assert [pid for pid, _ in got] == ["p2"]

    def test_tf_monotonicity(self):
        # same doc length, higher tf scores strictly higher
        idx = build_keyword_index(
            pool_of({"p1": "fire fire fire pad", "p2": "fire pad pad pad"})
        )
        scores = dict(keyword_search(idx, "fire", 10))
        assert scores["p1"] > scores["p2"]


class TestKnnSearch:
    def test_self_similarity_first(self):
        m = EmbeddingMatrix(["a", "b", "c"], np.array([[1, 0], [0.5, 1], [-1, 0.2]]))
        idx = KnnIndex(m)
        got = knn_search(idx, np.array([0.5, 1.0]), 3)
        assert got[0][0] == "b"
        assert got[0][1] == pytest.approx(1.0)

    def test_orthogonal_rows(self):
        m = EmbeddingMatrix(["a", "b"], np.array([[1.0, 0.0], [0.0, 1.0]]))
        got = knn_search(KnnIndex(m), np.array([1.0, 0.0]), 2)
        assert [pid for pid, _ in got] == ["a", "b"]
        assert got[0][1] == pytest.approx(1.0)
        assert got[1][1] == pytest.approx(0.0, abs=1e-15)

    def test_zero_query_empty_result(self):
        m = EmbeddingMatrix(["a"], np.ones((1, 2)))
        assert knn_search(KnnIndex(m), np.zeros(2), 5) == []

    def test_zero_norm_rows_never_returned(self):
        m = EmbeddingMatrix(["a", "z"], np.array([[1.0, 0.0], [0.0, 0.0]]))
        got = knn_search(KnnIndex(m), np.array([1.0, 1.0]), 5)
        assert [pid for pid, _ in got] == ["a"]

    def test_dimension_mismatch_error(self):
        m = EmbeddingMatrix(["a"], np.ones((1, 3)))
        with pytest.raises(ValueError):
            knn_search(KnnIndex(m), np.ones(2), 1)

    def test_matches_brute_force_oracle_50_rows(self):
        rng = np.random.default_rng(7)
        values = rng.normal(size=(50, 8))
        ids = [f"p{i:02d}" for i in range(50)]
        idx = KnnIndex(EmbeddingMatrix(ids, values))
        q = rng.normal(size=8)
        got = knn_search(idx, q, 10)
        expected = knn_oracle(ids, values.astype(np.float32).astype(np.float64), q, 10)
        assert [pid for pid, _ in got] == [pid for pid, _ in expected]
        for (_, s1), (_, s2) in zip(got, expected):
            assert s1 == pytest.approx(s2, abs=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(
        seed=st.integers(0, 10_000),
        n=st.integers(1, 30),
        dim=st.integers(1, 6),
        k=st.integers(0, 35),
        n_excluded=st.integers(0, 10),
    )
    def test_oracle_equivalence_property(self, seed, n, dim, k, n_excluded):
        rng = np.random.default_rng(seed)
        values = rng.normal(size=(n, dim))
        ids = [f"p{i:03d}" for i in range(n)]
        exclude = set(rng.choice(ids, size=min(n_excluded, n), replace=False).tolist())
        idx = KnnIndex(EmbeddingMatrix(ids, values))
        q = rng.normal(size=dim)
        got = knn_search(idx, q, k, exclude=exclude)
        expected = knn_oracle(ids, values.astype(np.float32).astype(np.float64), q, k, exclude)
        assert [pid for pid, _ in got] == [pid for pid, _ in expected]
        assert not ({pid for pid, _ in got} & exclude)
        assert len({pid for pid, _ in got}) == len(got)


class TestRandomSample:
    IDS = [f"p{i}" for i in range(10)]

    def test_exhaustion_returns_all(self):
        got = random_sample(self.IDS, 50, seed=1)
        assert sorted(got) == sorted(self.IDS)

    def test_determinism(self):
        assert random_sample(self.IDS, 4, seed=42) == random_sample(self.IDS, 4, seed=42)

    def test_exclusion(self):
        got = random_sample(self.IDS, 10, seed=3, exclude={"p0", "p5"})
        assert "p0" not in got and "p5" not in got
        assert len(got) == 8

    def test_uniformity_within_5_sigma(self):
        # 10^4 draws of k=1 over 10 ids: each frequency within 5 sigma of 0.1
        counts = {pid: 0 for pid in self.IDS}
        n = 10_000
        for i in range(n):
            (pid,) = random_sample(self.IDS, 1, seed=i)
            counts[pid] += 1
        sigma = math.sqrt(0.1 * 0.9 / n)
        for pid, c in counts.items():
            assert abs(c / n - 0.1) <= 5 * sigma, (pid, c / n)
