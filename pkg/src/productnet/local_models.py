"""Per-leaf binary classifiers and the mixed active-learning candidate sampler.

Three classifier kinds back the per-category annotation sessions: logistic
regression and a one-hidden-layer perceptron over dense product embeddings,
and multinomial naive Bayes over hashed token counts. All three are trained
from scratch so results are bit-reproducible from (kind, data, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array

from .optim import Adam
from .retrieval import KnnIndex, knn_search, random_sample

MODEL_KINDS = ("lr", "nb", "mlp")

# Default per-batch sampler mix: ambiguity first, then harvesting, then variety.
DEFAULT_MIX = (
    ("ambiguous", 0.40),
    ("positive", 0.30),
    ("knn", 0.15),
    ("random", 0.15),
)


class SingleClassError(ValueError):
    """Training needs at least one positive and one negative example."""


def _check_two_classes(y):
    y = np.asarray(y)
    if not ((y == 1).any() and (y == 0).any()):
        raise SingleClassError("need at least one positive and one negative label")
    return y.astype(np.float64)


def _balanced_weights(y):
    # inverse-frequency class weights; early sessions are heavily imbalanced
    n = len(y)
    n_pos = float(y.sum())
    w = np.where(y == 1.0, n / (2.0 * n_pos), n / (2.0 * (n - n_pos)))
    return w / w.sum()


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _weighted_log_loss(p, y, w):
    eps = 1e-300
    ce = -(y * np.log(np.maximum(p, eps)) + (1.0 - y) * np.log(np.maximum(1.0 - p, eps)))
    return float((w * ce).sum())


class LogisticBinary(BaseEstimator, ClassifierMixin):
    """L2-regularized logistic regression, full-batch Adam, deterministic."""

    def __init__(self, l2=1e-4, lr=0.05, max_iter=500, tol=1e-6, seed=0):
        self.l2 = l2
        self.lr = lr
        self.max_iter = max_iter
        self.tol = tol
        self.seed = seed

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = _check_two_classes(y)
        w = _balanced_weights(y)
        coef = np.zeros(X.shape[1])
        intercept = np.zeros(1)
        opt = Adam([coef, intercept], lr=self.lr)
        self.loss_history_ = []
        for it in range(self.max_iter):
            p = _sigmoid(X @ coef + intercept[0])
            self.loss_history_.append(_weighted_log_loss(p, y, w) + 0.5 * self.l2 * (coef @ coef))
            err = w * (p - y)
            g_coef = X.T @ err + self.l2 * coef
            g_int = np.array([err.sum()])
            if max(np.abs(g_coef).max(initial=0.0), abs(g_int[0])) < self.tol:
                break
            opt.step([g_coef, g_int])
        self.coef_ = coef
        self.intercept_ = intercept
        self.n_iter_ = it + 1
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.coef_.shape[0]:
            raise ValueError(f"feature dim {X.shape[1]} != trained dim {self.coef_.shape[0]}")
        return X @ self.coef_ + self.intercept_[0]

    def predict_proba(self, X):
        p = _sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.decision_function(X) >= 0).astype(int)


class MultinomialNBBinary(BaseEstimator, ClassifierMixin):
    """Multinomial naive Bayes over hashed token counts, Laplace smoothed."""

    def __init__(self, alpha=1.0):
        self.alpha = alpha

    def fit(self, X, y):
        X = sp.csr_matrix(X, dtype=np.float64)
        y = _check_two_classes(y)
        n = len(y)
        self.n_features_ = X.shape[1]
        self.class_log_prior_ = np.log(
            np.array([(y == 0).sum(), (y == 1).sum()], dtype=np.float64) / n
        )
        self.feature_log_prob_ = np.empty((2, self.n_features_))
        for c in (0, 1):
            counts = np.asarray(X[y == c].sum(axis=0)).ravel()
            smoothed = counts + self.alpha
            self.feature_log_prob_[c] = np.log(smoothed / smoothed.sum())
        self.classes_ = np.array([0, 1])
        return self

    def _joint_log_likelihood(self, X):
        X = sp.csr_matrix(X, dtype=np.float64)
        if X.shape[1] != self.n_features_:
            raise ValueError(f"feature dim {X.shape[1]} != trained dim {self.n_features_}")
        return X @ self.feature_log_prob_.T + self.class_log_prior_

    def predict_proba(self, X):
        jll = self._joint_log_likelihood(X)
        jll -= jll.max(axis=1, keepdims=True)
        p = np.exp(jll)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self._joint_log_likelihood(X).argmax(axis=1)


class MlpBinary(BaseEstimator, ClassifierMixin):
    """One hidden ReLU layer of 64 units, full-batch Adam, seeded init."""

    def __init__(self, hidden=64, lr=0.05, max_epochs=300, tol=1e-6, seed=0):
        self.hidden = hidden
        self.lr = lr
        self.max_epochs = max_epochs
        self.tol = tol
        self.seed = seed

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = _check_two_classes(y)
        w = _balanced_weights(y)
        d = X.shape[1]
        rng = np.random.default_rng(self.seed)
        limit1 = np.sqrt(6.0 / (d + self.hidden))
        limit2 = np.sqrt(6.0 / (self.hidden + 1))
        W1 = rng.uniform(-limit1, limit1, size=(d, self.hidden))
        b1 = np.zeros(self.hidden)
        W2 = rng.uniform(-limit2, limit2, size=(self.hidden, 1))
        b2 = np.zeros(1)
        opt = Adam([W1, b1, W2, b2], lr=self.lr)
        self.loss_history_ = []
        for epoch in range(self.max_epochs):
            z1 = X @ W1 + b1
            h1 = np.maximum(z1, 0.0)
            score = (h1 @ W2).ravel() + b2[0]
            p = _sigmoid(score)
            self.loss_history_.append(_weighted_log_loss(p, y, w))
            err = w * (p - y)
            gW2 = h1.T @ err[:, None]
            gb2 = np.array([err.sum()])
            dh1 = err[:, None] @ W2.T
            dz1 = dh1 * (z1 > 0)
            gW1 = X.T @ dz1
            gb1 = dz1.sum(axis=0)
            grads = [gW1, gb1, gW2, gb2]
            if max(np.abs(g).max(initial=0.0) for g in grads) < self.tol:
                break
            opt.step(grads)
        self.W1_, self.b1_, self.W2_, self.b2_ = W1, b1, W2, b2
        self.n_iter_ = epoch + 1
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.W1_.shape[0]:
            raise ValueError(f"feature dim {X.shape[1]} != trained dim {self.W1_.shape[0]}")
        h1 = np.maximum(X @ self.W1_ + self.b1_, 0.0)
        return (h1 @ self.W2_).ravel() + self.b2_[0]

    def predict_proba(self, X):
        p = _sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.decision_function(X) >= 0).astype(int)


def train_local(kind: str, features, labels, seed: int = 0):
    """Train one binary model of the given kind; features must match the kind."""
    if kind == "lr":
        return LogisticBinary(seed=seed).fit(features, labels)
    if kind == "nb":
        return MultinomialNBBinary().fit(features, labels)
    if kind == "mlp":
        return MlpBinary(seed=seed).fit(features, labels)
    raise ValueError(f"unknown model kind {kind!r}")


def positive_proba(model, X) -> np.ndarray:
    return model.predict_proba(X)[:, 1]


def suggest(model, candidate_ids, X, mode: str, k: int, exclude=frozenset()) -> list[str]:
    """Rank unlabeled candidates: positive (p desc), negative (p asc), ambiguous (|p-0.5| asc)."""
    if mode not in ("positive", "negative", "ambiguous"):
        raise ValueError(f"unknown suggestion mode {mode!r}")
    p = positive_proba(model, X)
    keys = {
        "positive": lambda i: (-p[i], candidate_ids[i]),
        "negative": lambda i: (p[i], candidate_ids[i]),
        "ambiguous": lambda i: (abs(p[i] - 0.5), candidate_ids[i]),
    }[mode]
    order = sorted(
        (i for i in range(len(candidate_ids)) if candidate_ids[i] not in exclude), key=keys
    )
    return [candidate_ids[i] for i in order[:k]]


# ---------------------------------------------------------------------------
# Annotation sessions and the mixed sampler


@dataclass
class AnnotationSession:
    """Mutable per-leaf annotation state; one session per taxonomy leaf."""

    leaf_id: str
    seed: int = 0
    positives: set[str] = field(default_factory=set)
    negatives: set[str] = field(default_factory=set)
    model: object | None = None
    model_kind: str = "lr"
    mix: tuple = DEFAULT_MIX
    served: dict[str, str] = field(default_factory=dict)  # product id -> source method
    draws: int = 0

    @property
    def labeled(self) -> set[str]:
        return self.positives | self.negatives

    def can_train(self) -> bool:
        return bool(self.positives) and bool(self.negatives)

    def record_label(self, product_id: str, polarity: str):
        # supersession: the latest polarity wins, the other set drops the id
        if polarity == "positive":
            self.negatives.discard(product_id)
            self.positives.add(product_id)
        else:
            self.positives.discard(product_id)
            self.negatives.add(product_id)

    def next_seed(self) -> int:
        self.draws += 1
        return self.seed * 1_000_003 + self.draws

    def record_served(self, product_id: str, source: str):
        self.served[product_id] = source


@dataclass
class CandidateEngines:
    """Everything the sampler may consult, aligned on one id list."""

    ids: list[str]
    features: np.ndarray  # dense rows for lr/mlp scoring and knn centroids
    counts: sp.csr_matrix  # hashed token counts for nb scoring
    knn: KnnIndex

    def __post_init__(self):
        self._row = {pid: i for i, pid in enumerate(self.ids)}

    def rows_for(self, ids):
        return np.array([self._row[pid] for pid in ids], dtype=np.intp)


@dataclass(frozen=True)
class SampledCandidate:
    product_id: str
    bucket: str  # ambiguous | positive | knn | random
    source: str  # LabelRecord source tag


def largest_remainder(budget: int, weights) -> list[int]:
    """Integer quotas summing to budget; remainders win in listed order on ties."""
    raw = [budget * w for w in weights]
    quotas = [int(q) for q in raw]
    rest = budget - sum(quotas)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - quotas[i]), i))
    for i in order[:rest]:
        quotas[i] += 1
    return quotas


def _positive_centroid(session, engines):
    rows = engines.rows_for(sorted(session.positives))
    return engines.features[rows].mean(axis=0)


def mixed_sample(session: AnnotationSession, engines: CandidateEngines, budget: int) -> list[SampledCandidate]:
    """One candidate batch: ambiguous + positive suggestions + KNN + random.

    Quotas follow the session mix via largest remainder; any bucket shortfall is
    refilled from random. Labeled ids are excluded and the result is free of
    duplicates. Cold start (no model yet): half KNN around a labeled positive
    when one exists, otherwise all random.
    """
    if budget < 0:
        raise ValueError("budget must be >= 0")
    labeled = session.labeled
    unlabeled = [pid for pid in engines.ids if pid not in labeled]
    budget = min(budget, len(unlabeled))
    if budget == 0:
        return []

    if session.model is None:
        if session.positives:
            buckets = (("knn", 0.5), ("random", 0.5))
        else:
            buckets = (("random", 1.0),)
    else:
        buckets = session.mix
    names = [name for name, _ in buckets]
    quotas = dict(zip(names, largest_remainder(budget, [w for _, w in buckets])))

    chosen: list[SampledCandidate] = []
    taken: set[str] = set()
    active_source = f"active_{session.model_kind}"

    def take(ids, bucket, source, quota):
        count = 0
        for pid in ids:
            if count >= quota:
                break
            if pid in taken or pid in labeled:
                continue
            chosen.append(SampledCandidate(pid, bucket, source))
            taken.add(pid)
            count += 1
        return count

    if session.model is not None:
        rows = engines.rows_for(unlabeled)
        if session.model_kind == "nb":
            p = positive_proba(session.model, engines.counts[rows])
        else:
            p = positive_proba(session.model, engines.features[rows])
        amb_order = sorted(range(len(unlabeled)), key=lambda i: (abs(p[i] - 0.5), unlabeled[i]))
        pos_order = sorted(range(len(unlabeled)), key=lambda i: (-p[i], unlabeled[i]))
        take([unlabeled[i] for i in amb_order], "ambiguous", active_source, quotas.get("ambiguous", 0))
        take([unlabeled[i] for i in pos_order], "positive", active_source, quotas.get("positive", 0))

    if quotas.get("knn", 0) and session.positives:
        centroid = _positive_centroid(session, engines)
        # over-request by the already-taken count so skips cannot starve the quota
        hits = knn_search(engines.knn, centroid, quotas["knn"] + len(taken), exclude=labeled)
        take([pid for pid, _ in hits], "knn", "knn", quotas["knn"])

    # random fills its own quota plus every other bucket's shortfall
    remaining = budget - len(chosen)
    if remaining > 0:
        sample = random_sample(unlabeled, remaining, session.next_seed(), exclude=taken)
        take(sample, "random", "random", remaining)
    return chosen
