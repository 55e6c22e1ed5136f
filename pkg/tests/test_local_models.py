import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from productnet.corpus import EmbeddingMatrix
from productnet.local_models import (
    AnnotationSession,
    CandidateEngines,
    LogisticBinary,
    MlpBinary,
    MultinomialNBBinary,
    SingleClassError,
    largest_remainder,
    mixed_sample,
    positive_proba,
    suggest,
    train_local,
)
from productnet.retrieval import KnnIndex


class FixedModel:
    """Stub with prescribed positive probabilities, keyed by candidate order."""

    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=float)

    def predict_proba(self, X):
        p = self.probs[: len(X)] if not np.isscalar(X) else self.probs
        return np.column_stack([1 - p, p])


class TestLogisticBinary:
    def test_separable_1d(self):
        X = np.array([[-1.0], [1.0]])
        y = np.array([0, 1])
        model = LogisticBinary().fit(X, y)
        assert positive_proba(model, [[1.0]])[0] > 0.5 > positive_proba(model, [[-1.0]])[0]

    def test_zero_weights_give_half(self):
        model = LogisticBinary()
        model.coef_ = np.zeros(3)
        model.intercept_ = np.zeros(1)
        assert positive_proba(model, [[0.2, -1.0, 4.0]])[0] == pytest.approx(0.5)

    def test_matches_independent_sigmoid_dot(self):
        rng = np.random.default_rng(11)
        model = LogisticBinary()
        model.coef_ = rng.normal(size=6)
        model.intercept_ = rng.normal(size=1)
        X = rng.normal(size=(5, 6))
        got = positive_proba(model, X)
        for i in range(5):
            z = float(np.dot(X[i], model.coef_) + model.intercept_[0])
            expected = 1.0 / (1.0 + np.exp(-z))
            assert got[i] == pytest.approx(expected, abs=1e-12)

    def test_single_class_error(self):
        with pytest.raises(SingleClassError):
            LogisticBinary().fit(np.ones((3, 2)), np.array([1, 1, 1]))

    def test_dimension_mismatch(self):
        model = LogisticBinary().fit(np.array([[-1.0], [1.0]]), np.array([0, 1]))
        with pytest.raises(ValueError):
            model.predict_proba(np.ones((1, 4)))

    def test_deterministic_bit_identical(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(30, 5))
        y = (X[:, 0] > 0).astype(int)
        a = LogisticBinary(seed=3).fit(X, y)
        b = LogisticBinary(seed=3).fit(X, y)
        assert a.coef_.tobytes() == b.coef_.tobytes()
        assert a.intercept_.tobytes() == b.intercept_.tobytes()

    def test_loss_non_increasing_after_iteration_10(self):
        for seed in range(3):
            rng = np.random.default_rng(seed)
            X = rng.normal(size=(40, 8))
            y = (X @ rng.normal(size=8) > 0).astype(int)
            model = LogisticBinary().fit(X, y)
            tail = np.array(model.loss_history_[10:])
            assert np.all(np.diff(tail) <= 1e-12)


class TestMultinomialNB:
    def test_symmetric_counts_give_half(self):
        X = sp.csr_matrix(np.array([[1.0, 2.0], [1.0, 2.0]]))
        y = np.array([0, 1])
        model = MultinomialNBBinary().fit(X, y)
        probed = model.predict_proba(sp.csr_matrix(np.array([[3.0, 1.0]])))
        assert probed[0, 1] == pytest.approx(0.5)

    def test_four_document_hand_oracle(self):
        # counts over 3 features; alpha=1 smoothing
        #   neg totals [3,1,1] sum 5 -> smoothed [4/8, 2/8, 2/8]
        #   pos totals [0,3,3] sum 6 -> smoothed [1/9, 4/9, 4/9]
        # query [1,1,0]: pos posterior = (1/9 * 4/9) / (1/9 * 4/9 + 1/2 * 1/4) = 32/113
        X = sp.csr_matrix(
            np.array(
                [
                    [2.0, 1.0, 0.0],
                    [1.0, 0.0, 1.0],
                    [0.0, 2.0, 1.0],
                    [0.0, 1.0, 2.0],
                ]
            )
        )
        y = np.array([0, 0, 1, 1])
        model = MultinomialNBBinary().fit(X, y)
        p = model.predict_proba(sp.csr_matrix(np.array([[1.0, 1.0, 0.0]])))
        assert p[0, 1] == pytest.approx(32.0 / 113.0, abs=1e-12)

    def test_single_class_error(self):
        with pytest.raises(SingleClassError):
            MultinomialNBBinary().fit(sp.csr_matrix(np.ones((2, 2))), np.array([0, 0]))

    def test_dimension_mismatch(self):
        model = MultinomialNBBinary().fit(sp.csr_matrix(np.eye(2)), np.array([0, 1]))
        with pytest.raises(ValueError):
            model.predict_proba(sp.csr_matrix(np.ones((1, 5))))


class TestMlpBinary:
    def test_zero_network_gives_half(self):
        model = MlpBinary(hidden=4)
        model.W1_ = np.zeros((3, 4))
        model.b1_ = np.zeros(4)
        model.W2_ = np.zeros((4, 1))
        model.b2_ = np.zeros(1)
        assert positive_proba(model, [[1.0, -2.0, 0.5]])[0] == pytest.approx(0.5)

    def test_separable(self):
        X = np.array([[-1.0], [-0.5], [0.5], [1.0]])
        y = np.array([0, 0, 1, 1])
        model = MlpBinary(seed=1).fit(X, y)
        assert positive_proba(model, [[1.0]])[0] > 0.5 > positive_proba(model, [[-1.0]])[0]

    def test_deterministic_bit_identical(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(20, 4))
        y = (X[:, 0] + X[:, 1] > 0).astype(int)
        a = MlpBinary(seed=9, max_epochs=50).fit(X, y)
        b = MlpBinary(seed=9, max_epochs=50).fit(X, y)
        for pa, pb in zip((a.W1_, a.b1_, a.W2_, a.b2_), (b.W1_, b.b1_, b.W2_, b.b2_)):
            assert pa.tobytes() == pb.tobytes()

    def test_loss_non_increasing_after_iteration_10(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(30, 6))
        y = (X @ rng.normal(size=6) > 0).astype(int)
        model = MlpBinary(seed=0, max_epochs=150).fit(X, y)
        tail = np.array(model.loss_history_[10:])
        assert np.all(np.diff(tail) <= 1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 1000))
    def test_predict_proba_in_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        model = MlpBinary(hidden=4)
        model.W1_ = rng.normal(scale=50.0, size=(3, 4))
        model.b1_ = rng.normal(scale=50.0, size=4)
        model.W2_ = rng.normal(scale=50.0, size=(4, 1))
        model.b2_ = rng.normal(scale=50.0, size=1)
        X = rng.normal(scale=100.0, size=(8, 3))
        p = positive_proba(model, X)
        assert np.all((p >= 0) & (p <= 1))


class TestTrainLocalDispatch:
    def test_kinds(self):
        X = np.array([[-1.0], [1.0]])
        y = np.array([0, 1])
        assert isinstance(train_local("lr", X, y), LogisticBinary)
        assert isinstance(train_local("mlp", X, y), MlpBinary)
        counts = sp.csr_matrix(np.array([[1.0, 0.0], [0.0, 2.0]]))
        assert isinstance(train_local("nb", counts, y), MultinomialNBBinary)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            train_local("svm", np.eye(2), np.array([0, 1]))


class TestSuggest:
    IDS = ["a", "b", "c"]
    X = np.zeros((3, 1))

    def test_ambiguous_closest_to_half(self):
        model = FixedModel([0.9, 0.5, 0.1])
        assert suggest(model, self.IDS, self.X, "ambiguous", 1) == ["b"]

    def test_positive_sort_order(self):
        model = FixedModel([0.9, 0.5, 0.1])
        assert suggest(model, self.IDS, self.X, "positive", 2) == ["a", "b"]

    def test_negative_sort_order(self):
        model = FixedModel([0.9, 0.5, 0.1])
        assert suggest(model, self.IDS, self.X, "negative", 2) == ["c", "b"]

    def test_all_labeled_empty(self):
        model = FixedModel([0.9, 0.5, 0.1])
        assert suggest(model, self.IDS, self.X, "ambiguous", 3, exclude={"a", "b", "c"}) == []

    def test_tie_break_by_id(self):
        model = FixedModel([0.5, 0.5, 0.5])
        assert suggest(model, self.IDS, self.X, "ambiguous", 3) == ["a", "b", "c"]

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            suggest(FixedModel([0.5]), ["a"], np.zeros((1, 1)), "weird", 1)

    def test_ambiguous_top1_is_global_minimizer_property(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            probs = rng.uniform(size=10)
            ids = [f"c{i}" for i in range(10)]
            model = FixedModel(probs)
            top = suggest(model, ids, np.zeros((10, 1)), "ambiguous", 1)[0]
            got = abs(probs[ids.index(top)] - 0.5)
            assert got <= np.abs(probs - 0.5).min() + 1e-15


def build_engines(n=60, seed=0, d=4):
    rng = np.random.default_rng(seed)
    ids = [f"p{i:03d}" for i in range(n)]
    features = rng.normal(size=(n, d)) + 2.0  # keep norms nonzero
    counts = sp.csr_matrix(rng.integers(0, 3, size=(n, 8)).astype(float))
    knn = KnnIndex(EmbeddingMatrix(ids, features))
    return CandidateEngines(ids=ids, features=features, counts=counts, knn=knn)


def trained_session(engines, n_pos=3, n_neg=3, seed=0):
    session = AnnotationSession(leaf_id="leaf", seed=seed)
    for pid in engines.ids[:n_pos]:
        session.record_label(pid, "positive")
    for pid in engines.ids[n_pos : n_pos + n_neg]:
        session.record_label(pid, "negative")
    y = np.array([1] * n_pos + [0] * n_neg)
    X = engines.features[: n_pos + n_neg]
    session.model = LogisticBinary(max_iter=50).fit(X, y)
    session.model_kind = "lr"
    return session


class TestLargestRemainder:
    def test_exact_quotas(self):
        assert largest_remainder(20, [0.4, 0.3, 0.15, 0.15]) == [8, 6, 3, 3]

    def test_remainder_goes_to_listed_order_on_tie(self):
        assert largest_remainder(10, [0.4, 0.3, 0.15, 0.15]) == [4, 3, 2, 1]

    def test_sums_to_budget(self):
        for budget in range(0, 25):
            assert sum(largest_remainder(budget, [0.4, 0.3, 0.15, 0.15])) == budget


class TestMixedSample:
    def test_quota_arithmetic_budget_20(self):
        engines = build_engines()
        session = trained_session(engines)
        got = mixed_sample(session, engines, 20)
        buckets = {}
        for cand in got:
            buckets[cand.bucket] = buckets.get(cand.bucket, 0) + 1
        assert buckets == {"ambiguous": 8, "positive": 6, "knn": 3, "random": 3}
        assert all(c.source == "active_lr" for c in got if c.bucket in ("ambiguous", "positive"))
        assert all(c.source == "knn" for c in got if c.bucket == "knn")
        assert all(c.source == "random" for c in got if c.bucket == "random")

    def test_cold_start_no_labels_all_random(self):
        engines = build_engines()
        session = AnnotationSession(leaf_id="leaf")
        got = mixed_sample(session, engines, 10)
        assert len(got) == 10
        assert all(c.bucket == "random" for c in got)

    def test_cold_start_with_positive_half_knn(self):
        engines = build_engines()
        session = AnnotationSession(leaf_id="leaf")
        session.record_label(engines.ids[0], "positive")
        got = mixed_sample(session, engines, 10)
        buckets = [c.bucket for c in got]
        assert buckets.count("knn") == 5
        assert buckets.count("random") == 5

    def test_pool_smaller_than_budget(self):
        engines = build_engines(n=10)
        session = trained_session(engines, n_pos=2, n_neg=2)
        got = mixed_sample(session, engines, 100)
        returned = sorted(c.product_id for c in got)
        expected = sorted(set(engines.ids) - session.labeled)
        assert returned == expected

    def test_never_returns_labeled_never_duplicates(self):
        rng = np.random.default_rng(10)
        for trial in range(15):
            engines = build_engines(n=int(rng.integers(8, 40)), seed=trial)
            n_pos = int(rng.integers(1, 4))
            n_neg = int(rng.integers(1, 4))
            session = trained_session(engines, n_pos=n_pos, n_neg=n_neg, seed=trial)
            budget = int(rng.integers(0, 30))
            got = mixed_sample(session, engines, budget)
            ids = [c.product_id for c in got]
            assert len(ids) == len(set(ids))
            assert not (set(ids) & session.labeled)
            assert len(ids) == min(budget, len(engines.ids) - len(session.labeled))

    def test_nb_session_scores_counts(self):
        engines = build_engines()
        session = AnnotationSession(leaf_id="leaf", model_kind="nb")
        for pid in engines.ids[:2]:
            session.record_label(pid, "positive")
        for pid in engines.ids[2:4]:
            session.record_label(pid, "negative")
        y = np.array([1, 1, 0, 0])
        session.model = MultinomialNBBinary().fit(engines.counts[:4], y)
        got = mixed_sample(session, engines, 12)
        assert len(got) == 12
        assert any(c.source == "active_nb" for c in got)


class TestSessionState:
    def test_supersession_moves_sets(self):
        s = AnnotationSession(leaf_id="x")
        s.record_label("p1", "positive")
        s.record_label("p1", "negative")
        assert s.positives == set()
        assert s.negatives == {"p1"}

    def test_can_train_requires_both_classes(self):
        s = AnnotationSession(leaf_id="x")
        s.record_label("p1", "positive")
        assert not s.can_train()
        s.record_label("p2", "negative")
        assert s.can_train()
