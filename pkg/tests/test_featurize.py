import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from productnet.corpus import EmbeddingMatrix, Product, UnknownReferenceError
from productnet.featurize import (
    DEFAULT_HASH_DIM,
    PROJECTION_DIM,
    HashedNgramVectorizer,
    field_vectors,
    fnv1a64,
    hash_counts,
    hash_embed,
    image_vector,
    initial_embedding,
    project_hashed,
    tokenize,
)


def fnv1a64_reference(data: bytes) -> int:
    """Independent FNV-1a (decimal constants) for cross-checking bucket ids."""
    h = 14695981039346656037
    for byte in data:
        h = ((h ^ byte) * 1099511628211) % (1 << 64)
    return h


class TestTokenize:
    def test_splits_on_non_alphanumeric(self):
        assert tokenize("Gas Fireplace, 30-inch") == ["gas", "fireplace", "30", "inch"]

    def test_empty(self):
        assert tokenize("") == []

    def test_lowercases_non_ascii(self):
        assert tokenize("ÉCRAN tv") == ["écran", "tv"]

    def test_underscore_is_a_separator(self):
        assert tokenize("a_b") == ["a", "b"]


class TestHashEmbed:
    def test_empty_tokens_zero_vector(self):
        v = hash_embed([], DEFAULT_HASH_DIM)
        assert v.nnz == 0

    def test_ab_buckets_match_reference_hash(self):
        # features of token "ab": unigram "ab" plus char 3-5 grams of "<ab>"
        features = ["ab", "<ab", "ab>", "<ab>"]
        expected = sorted(fnv1a64_reference(f.encode()) % DEFAULT_HASH_DIM for f in features)
        # frozen from the reference implementation
        assert expected == [19502, 104554, 120508, 221220]
        v = hash_embed(["ab"], DEFAULT_HASH_DIM)
        assert sorted(v.indices.tolist()) == expected
        assert np.allclose(v.weights, 0.25)

    def test_fnv_matches_reference(self):
        for data in (b"", b"a", b"ab", "écran".encode(), b"hello world"):
            assert fnv1a64(data) == fnv1a64_reference(data)

    def test_permutation_invariance(self):
        a = hash_embed(["gas", "fireplace", "insert"], 1 << 12)
        b = hash_embed(["insert", "gas", "fireplace"], 1 << 12)
        assert np.array_equal(a.indices, b.indices)
        assert np.array_equal(a.weights, b.weights)

    def test_weights_sum_to_one(self):
        v = hash_embed(["alpha", "beta"], 1 << 12)
        assert v.weights.sum() == pytest.approx(1.0)

    def test_non_power_of_two_dim_rejected(self):
        with pytest.raises(ValueError):
            hash_embed(["x"], 100)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.text(min_size=0, max_size=12), max_size=8))
    def test_fuzz_no_nan_inf(self, texts):
        tokens = [t for text in texts for t in tokenize(text)]
        v = hash_embed(tokens, 1 << 12)
        assert np.all(np.isfinite(v.weights))
        assert np.all(v.indices < (1 << 12))
        proj = project_hashed(v)
        assert np.all(np.isfinite(proj))

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.sampled_from(["gas", "grill", "écran", "a1"]), min_size=1, max_size=10), st.randoms())
    def test_permutation_property(self, tokens, rnd):
        shuffled = list(tokens)
        rnd.shuffle(shuffled)
        a = hash_embed(tokens, 1 << 12)
        b = hash_embed(shuffled, 1 << 12)
        assert np.array_equal(a.indices, b.indices)
        assert np.array_equal(a.weights, b.weights)


class TestHashCounts:
    def test_counts_are_integers(self):
        v = hash_counts(["fire", "fire", "gas"], 1 << 12)
        assert sorted(v.weights.tolist()) in ([1.0, 2.0],)

    def test_empty(self):
        assert hash_counts([], 1 << 12).nnz == 0


class TestImageVector:
    def store(self):
        return EmbeddingMatrix(["img1"], np.array([[1.0, 2.0, 3.0]]))

    def test_no_reference_gives_zero_vector(self):
        p = Product(id="p1")
        assert np.array_equal(image_vector(p, self.store(), 3), np.zeros(3))

    def test_lookup_returns_stored_row(self):
        p = Product(id="p1", image_embedding_id="img1")
        assert np.array_equal(image_vector(p, self.store(), 3), [1.0, 2.0, 3.0])

    def test_broken_reference_error(self):
        p = Product(id="p1", image_embedding_id="missing")
        with pytest.raises(UnknownReferenceError):
            image_vector(p, self.store(), 3)


class TestInitialEmbedding:
    def test_empty_product_no_image_is_zero(self):
        p = Product(id="p1")
        v = initial_embedding(p, None, d_img=5)
        assert v.shape == (7 * PROJECTION_DIM + 5,)
        assert not v.any()

    def test_identical_products_identical_vectors(self):
        a = Product(id="a", title="red lamp", brand="acme")
        b = Product(id="b", title="red lamp", brand="acme")
        assert np.array_equal(initial_embedding(a, None, 4), initial_embedding(b, None, 4))

    def test_shared_title_tokens_only(self):
        # blocks recomputed independently from per-field hashed vectors
        a = Product(id="a", title="alpha beta")
        b = Product(id="b", title="alpha gamma")
        va = initial_embedding(a, None, 4)
        vb = initial_embedding(b, None, 4)
        title_a, title_b = va[:PROJECTION_DIM], vb[:PROJECTION_DIM]
        expected_a = project_hashed(field_vectors(a)[0])
        expected_b = project_hashed(field_vectors(b)[0])
        assert np.allclose(title_a, expected_a)
        assert np.allclose(title_b, expected_b)
        cos = title_a @ title_b / (np.linalg.norm(title_a) * np.linalg.norm(title_b))
        assert cos > 0.0
        # every other text block is exactly zero for both products
        assert not va[PROJECTION_DIM : 7 * PROJECTION_DIM].any()
        assert not vb[PROJECTION_DIM : 7 * PROJECTION_DIM].any()


class TestVectorizer:
    def test_transform_shape_and_determinism(self):
        vec = HashedNgramVectorizer(dim=1 << 12)
        X1 = vec.fit_transform(["gas fireplace", "outdoor grill", ""])
        X2 = vec.transform(["gas fireplace", "outdoor grill", ""])
        assert X1.shape == (3, 1 << 12)
        assert (X1 != X2).nnz == 0
        assert X1[2].nnz == 0

    def test_get_params(self):
        assert HashedNgramVectorizer(dim=256).get_params()["dim"] == 256
