"""Metrics and experiments: top-k accuracy, modality ablations, annotation-speed simulation.

The synthetic pool generator stands in for a production catalog: each leaf owns
a disjoint signature token set and an image centroid, with configurable noise
so text and image can carry partial, complementary signal. Everything is
seeded and reproducible.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .corpus import EmbeddingMatrix, Pool, Product, Taxonomy
from .featurize import hash_counts, initial_embedding_matrix, tokenize, vectors_to_csr
from .local_models import AnnotationSession, CandidateEngines, mixed_sample, train_local
from .master_model import (
    TrainConfig,
    encode_products,
    predict_batch,
    softmax,
    split_gold,
    train_master,
)
from .optim import Adam
from .retrieval import KnnIndex, build_keyword_index, keyword_search, knn_search, random_sample

SIM_STRATEGIES = ("random", "keyword", "knn", "active_lr", "active_nb", "active_mlp", "master")

# production-scale context row shown in report footers (not reproducible at desk scale)
REFERENCE_ROW = ("master-IT", 94.7, 98.2, 99.1)


def topk_accuracy(rankings, gold, k: int) -> float:
    """Fraction of items whose gold label appears in the first k ranked labels."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(rankings) != len(gold):
        raise ValueError(f"length mismatch: {len(rankings)} rankings vs {len(gold)} labels")
    if not gold:
        return 0.0
    hits = sum(1 for ranked, true in zip(rankings, gold) if true in list(ranked)[:k])
    return hits / len(gold)


# ---------------------------------------------------------------------------
# Synthetic pools


@dataclass
class SimPool:
    """Generated product pool with known gold leaves, for exercising the workflow."""

    pool: Pool
    taxonomy: Taxonomy
    images: EmbeddingMatrix | None
    leaf_ids: list[str]
    prevalence: dict[str, float]
    background_leaf: str | None
    seed: int
    d_img: int
    _engines: CandidateEngines | None = field(default=None, repr=False)
    _keyword_index: object = field(default=None, repr=False)

    def gold_positives(self) -> dict[str, list[str]]:
        gold: dict[str, list[str]] = {leaf: [] for leaf in self.leaf_ids}
        for product in self.pool:
            if product.gold_leaf in gold:
                gold[product.gold_leaf].append(product.id)
        return gold

    def gold_by_id(self) -> dict[str, str]:
        return {p.id: p.gold_leaf for p in self.pool}

    def engines(self) -> CandidateEngines:
        """Round-0 candidate engines over bootstrap embeddings; built once, cached."""
        if self._engines is None:
            matrix = initial_embedding_matrix(self.pool, self.images, self.d_img)
            counts = vectors_to_csr(
                [hash_counts(tokenize(p.all_text())) for p in self.pool],
                dim=1 << 18,
            )
            self._engines = CandidateEngines(
                ids=self.pool.ids,
                features=matrix.values.astype(np.float64),
                counts=counts,
                knn=KnnIndex(matrix),
            )
        return self._engines

    def keyword_index(self):
        if self._keyword_index is None:
            self._keyword_index = build_keyword_index(self.pool)
        return self._keyword_index


def _leaf_name(i: int) -> str:
    return f"sim/leaf{i:02d}"


def generate_simpool(
    n_leaves: int,
    per_leaf: int,
    prevalence: float = 1.0,
    token_noise: float = 0.2,
    text_blank_rate: float = 0.0,
    missing_image_rate: float = 0.3,
    image_noise: float = 0.25,
    d_img: int = 16,
    signature_size: int = 12,
    background_vocab_size: int = 400,
    seed: int = 0,
) -> SimPool:
    """Build a seeded synthetic pool.

    Each leaf gets a disjoint signature vocabulary and an image centroid.
    Positives fill their text slots from the signature, except that each slot
    flips to a background token with probability token_noise and a
    text_blank_rate fraction of positives get background-only text. A
    missing_image_rate fraction have no image; the rest sit near their leaf
    centroid. With prevalence < 1, background decoys pad the pool to an exact
    per-leaf positive rate of `prevalence`.
    """
    if not 0.0 < prevalence <= 1.0:
        raise ValueError("prevalence must be in (0, 1]")
    if n_leaves < 1 or per_leaf < 1:
        raise ValueError("n_leaves and per_leaf must be positive")
    rng = np.random.default_rng(seed)
    leaves = [_leaf_name(i) for i in range(n_leaves)]
    paths = [f"Sim > Leaf{i:02d}" for i in range(n_leaves)]

    n_positive = n_leaves * per_leaf
    total = int(round(n_positive / prevalence))
    n_decoys = total - n_positive
    background_leaf = None
    if n_decoys > 0:
        background_leaf = "sim/background"
        paths.append("Sim > Background")

    signatures = [
        [f"sig{i:02d}x{j:02d}" for j in range(signature_size)] for i in range(n_leaves)
    ]
    background = [f"bg{j:04d}" for j in range(background_vocab_size)]
    centroids = rng.normal(size=(n_leaves, d_img))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    n_bg_centroids = max(3, n_leaves // 2)
    bg_centroids = rng.normal(size=(n_bg_centroids, d_img))
    bg_centroids /= np.linalg.norm(bg_centroids, axis=1, keepdims=True)

    # slots per field: title, description, bullets, brand, keywords x3
    slot_plan = (("title", 4), ("description", 8), ("bullets", 5), ("brand", 1))
    keyword_slots = 2

    products: list[Product] = []
    image_rows: list[np.ndarray] = []
    image_ids: list[str] = []
    counter = 0

    def draw_tokens(n, signature, blank):
        out = []
        for _ in range(n):
            if blank or signature is None or rng.random() < token_noise:
                out.append(background[int(rng.integers(0, len(background)))])
            else:
                out.append(signature[int(rng.integers(0, len(signature)))])
        return out

    def build_product(leaf, signature, centroid):
        nonlocal counter
        pid = f"p{counter:06d}"
        counter += 1
        blank = signature is not None and rng.random() < text_blank_rate
        fields = {}
        for name, slots in slot_plan:
            toks = draw_tokens(slots, signature, blank)
            fields[name] = tuple(toks) if name == "bullets" else " ".join(toks)
        keywords = tuple(
            tuple(draw_tokens(keyword_slots, signature, blank)) for _ in range(3)
        )
        image_id = None
        if rng.random() >= missing_image_rate:
            image_id = f"img_{pid}"
            image_ids.append(image_id)
            image_rows.append(centroid + image_noise * rng.normal(size=d_img))
        return Product(
            id=pid,
            bullets=fields.pop("bullets"),
            keywords=keywords,
            image_embedding_id=image_id,
            gold_leaf=leaf,
            **fields,
        )

    for i, leaf in enumerate(leaves):
        for _ in range(per_leaf):
            products.append(build_product(leaf, signatures[i], centroids[i]))
    for j in range(n_decoys):
        centroid = bg_centroids[j % n_bg_centroids]
        products.append(build_product(background_leaf, None, centroid))

    images = (
        EmbeddingMatrix(image_ids, np.asarray(image_rows, dtype=np.float32))
        if image_ids
        else None
    )
    return SimPool(
        pool=Pool(products),
        taxonomy=Taxonomy(paths),
        images=images,
        leaf_ids=leaves,
        prevalence={leaf: per_leaf / total for leaf in leaves},
        background_leaf=background_leaf,
        seed=seed,
        d_img=d_img,
    )


# ---------------------------------------------------------------------------
# Ablation


@dataclass
class AblationReport:
    rows: dict[str, tuple[float, float, float]]  # variant -> (top1, top3, top5)
    n_train: int
    n_test: int

    ORDER = ("image-only", "bow", "master-T", "master-IT")

    def monotone(self) -> bool:
        return all(r[0] <= r[1] <= r[2] for r in self.rows.values())

    def render(self) -> str:
        lines = ["variant      top-1   top-3   top-5"]
        for name in self.ORDER:
            t1, t3, t5 = self.rows[name]
            lines.append(f"{name:<12} {t1:6.3f}  {t3:6.3f}  {t5:6.3f}")
        name, r1, r3, r5 = REFERENCE_ROW
        lines.append(
            f"reference (production-scale {name}): "
            f"top-1 {r1} / top-3 {r3} / top-5 {r5} (percent)"
        )
        lines.append(f"train/test sizes: {self.n_train}/{self.n_test}")
        return "\n".join(lines)

    def to_lines(self) -> list[str]:
        out = []
        for name in self.ORDER:
            slug = name.replace("-", "_").lower()
            for k, value in zip((1, 3, 5), self.rows[name]):
                out.append(f"{slug}_top{k} {value:.6f}")
        return out


def _strip_text(p: Product) -> Product:
    return Product(
        id=p.id,
        image_embedding_id=p.image_embedding_id,
        image_url=p.image_url,
        gold_leaf=p.gold_leaf,
    )


def _strip_image(p: Product) -> Product:
    return Product(
        id=p.id,
        title=p.title,
        description=p.description,
        bullets=p.bullets,
        brand=p.brand,
        keywords=p.keywords,
        image_url=p.image_url,
        gold_leaf=p.gold_leaf,
    )


def _rankings(probs: np.ndarray, classes) -> list[list[str]]:
    out = []
    for row in probs:
        order = sorted(range(len(classes)), key=lambda c: (-row[c], c))
        out.append([classes[c] for c in order])
    return out


def _train_bow(pool, gold, config: TrainConfig):
    """Pooled hashed-unigram counts into a plain linear softmax; no fusion layers."""
    classes, train_pairs, test_pairs = split_gold(gold, config.seed, config.train_fraction)

    def counts_for(pids):
        return [hash_counts(tokenize(pool[pid].all_text()), config.hash_dim) for pid in pids]

    train_vecs = counts_for([pid for pid, _ in train_pairs])
    vocab = np.array(sorted({int(i) for v in train_vecs for i in v.indices}), dtype=np.int64)

    def compact(vecs):
        rows = []
        for v in vecs:
            pos = np.searchsorted(vocab, v.indices)
            ok = (
                (pos < len(vocab)) & (vocab[np.minimum(pos, len(vocab) - 1)] == v.indices)
                if len(vocab)
                else np.zeros(0, dtype=bool)
            )
            rows.append((pos[ok], v.weights[ok]))
        indptr = np.zeros(len(vecs) + 1, dtype=np.int64)
        for i, (cols, _) in enumerate(rows):
            indptr[i + 1] = indptr[i] + len(cols)
        return sp.csr_matrix(
            (
                np.concatenate([w for _, w in rows]) if rows else np.empty(0),
                np.concatenate([c for c, _ in rows]) if rows else np.empty(0, dtype=np.int64),
                indptr,
            ),
            shape=(len(vecs), len(vocab)),
        )

    X = compact(train_vecs)
    y = np.array([ci for _, ci in train_pairs])
    W = np.zeros((len(vocab), len(classes)))
    b = np.zeros(len(classes))
    opt = Adam([W, b], lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    order_rng = np.random.default_rng([config.seed, len(classes), 2])
    n = len(train_pairs)
    for _ in range(config.epochs):
        perm = order_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = perm[start : start + config.batch_size]
            logits = X[batch] @ W + b
            p = softmax(logits)
            d = p.copy()
            d[np.arange(len(batch)), y[batch]] -= 1.0
            d /= len(batch)
            gW = np.asarray(X[batch].T @ d)
            opt.step([gW, d.sum(axis=0)])

    def predict_pids(pids):
        Xq = compact(counts_for(pids))
        return softmax(Xq @ W + b)

    return classes, test_pairs, predict_pids


def run_ablation(sim: SimPool, config: TrainConfig) -> AblationReport:
    """Train four modality variants on the same split and report top-1/3/5 each."""
    if len(sim.leaf_ids) < 2:
        raise ValueError("ablation needs at least 2 leaves")
    gold = sim.gold_positives()
    rows: dict[str, tuple[float, float, float]] = {}

    def eval_fusion(pool, images, name):
        net, _ = train_master(pool, images, gold, config)
        _, _, test_pairs = split_gold(gold, config.seed, config.train_fraction)
        test_products = [pool[pid] for pid, _ in test_pairs]
        gold_leaves = [net.classes[ci] for _, ci in test_pairs]
        probs = predict_batch(net, encode_products(test_products, images, net))
        ranks = _rankings(probs, net.classes)
        rows[name] = tuple(topk_accuracy(ranks, gold_leaves, k) for k in (1, 3, 5))
        return test_pairs

    base_products = list(sim.pool)
    test_pairs = eval_fusion(sim.pool, sim.images, "master-IT")
    eval_fusion(Pool([_strip_image(p) for p in base_products]), None, "master-T")
    eval_fusion(Pool([_strip_text(p) for p in base_products]), sim.images, "image-only")

    classes, bow_test, bow_predict = _train_bow(sim.pool, gold, config)
    probs = bow_predict([pid for pid, _ in bow_test])
    ranks = _rankings(probs, classes)
    gold_leaves = [classes[ci] for _, ci in bow_test]
    rows["bow"] = tuple(topk_accuracy(ranks, gold_leaves, k) for k in (1, 3, 5))

    n_total = sum(len(v) for v in gold.values())
    return AblationReport(rows=rows, n_train=n_total - len(test_pairs), n_test=len(test_pairs))


# ---------------------------------------------------------------------------
# Annotation-speed simulation


@dataclass
class SimulationResult:
    strategy: str
    leaf: str
    budget: int
    factors: list[float]
    positives_found: list[int]

    @property
    def mean_factor(self) -> float:
        return float(np.mean(self.factors))


def _master_ranking(sim: SimPool, leaf: str, seed: int, config: TrainConfig):
    """Train a master on a seeded quarter of each leaf's gold, as if labeled in
    earlier rounds, and rank unlabeled products predicted into this leaf."""
    rng = np.random.default_rng([seed, 17])
    gold = sim.gold_positives()
    subset = {}
    for lf, pids in gold.items():
        pids = sorted(pids)
        n = max(2, len(pids) // 4)
        take = rng.permutation(len(pids))[:n]
        subset[lf] = [pids[i] for i in take]
    net, _ = train_master(sim.pool, sim.images, subset, config)
    known = {pid for pids in subset.values() for pid in pids}
    candidates = [p for p in sim.pool if p.id not in known]
    probs = predict_batch(net, encode_products(candidates, sim.images, net))
    leaf_ci = net.classes.index(leaf)
    top1 = probs.argmax(axis=1)
    ranked = sorted(
        (
            (candidates[i].id, float(probs[i, leaf_ci]))
            for i in range(len(candidates))
            if top1[i] == leaf_ci
        ),
        key=lambda t: (-t[1], t[0]),
    )
    return [pid for pid, _ in ranked], known


def simulate_annotation(
    sim: SimPool,
    leaf: str,
    strategy: str,
    budget: int,
    n_seeds: int = 10,
    batch_size: int = 10,
    base_seed: int = 0,
    master_config: TrainConfig | None = None,
) -> SimulationResult:
    """Replay annotation with a gold-label oracle and measure query efficiency.

    The session starts from one known positive and one known negative; the
    local model (active_* strategies) retrains after every batch. The reported
    acceleration factor is positives found divided by the expected random
    yield (budget x leaf prevalence), averaged over seeds. Wall-clock human
    effort is not measurable here, so query efficiency is the proxy.
    """
    if strategy not in SIM_STRATEGIES + ("oracle",):
        raise ValueError(f"unknown strategy {strategy!r}")
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if leaf not in sim.leaf_ids:
        raise ValueError(f"unknown leaf {leaf!r}")
    engines = sim.engines()
    gold = sim.gold_by_id()
    all_ids = sim.pool.ids
    positives_all = sorted(pid for pid in all_ids if gold[pid] == leaf)
    negatives_all = sorted(pid for pid in all_ids if gold[pid] != leaf)
    prevalence = sim.prevalence[leaf]

    master_order: list[str] | None = None
    master_known: set[str] = set()
    if strategy == "master":
        config = master_config or TrainConfig(epochs=15, embed_dim=32, hash_dim=1 << 12)
        master_order, master_known = _master_ranking(sim, leaf, base_seed, config)

    factors, found_counts = [], []
    for round_i in range(n_seeds):
        seed = base_seed + round_i
        rng = random.Random(seed)
        session = AnnotationSession(leaf_id=leaf, seed=seed)
        session.model_kind = strategy.removeprefix("active_") if strategy.startswith("active_") else "lr"
        session.record_label(rng.choice(positives_all), "positive")
        session.record_label(rng.choice(negatives_all), "negative")
        if strategy == "master":
            for pid in master_known:
                session.record_label(pid, "positive" if gold[pid] == leaf else "negative")

        served = 0
        found = 0
        batch_no = 0
        while served < budget:
            want = min(batch_size, budget - served)
            exclude = session.labeled
            if strategy == "random":
                batch = random_sample(all_ids, want, seed * 7919 + batch_no, exclude)
            elif strategy == "keyword":
                recent = sorted(session.positives)[-5:]
                query = " ".join(sim.pool[pid].all_text() for pid in recent)
                hits = keyword_search(sim.keyword_index(), query, want, exclude)
                batch = [pid for pid, _ in hits]
            elif strategy == "knn":
                rows = engines.rows_for(sorted(session.positives))
                centroid = engines.features[rows].mean(axis=0)
                hits = knn_search(engines.knn, centroid, want, exclude)
                batch = [pid for pid, _ in hits]
            elif strategy == "oracle":
                batch = [pid for pid in positives_all if pid not in exclude][:want]
            elif strategy == "master":
                batch = [pid for pid in master_order if pid not in exclude][:want]
            else:  # active_*
                if session.can_train():
                    _retrain_session(session, engines)
                batch = [c.product_id for c in mixed_sample(session, engines, want)]
            if len(batch) < want:
                filler = random_sample(
                    all_ids, want - len(batch), seed * 104729 + batch_no, exclude | set(batch)
                )
                batch = list(batch) + filler
            if not batch:
                break
            for pid in batch:
                is_pos = gold[pid] == leaf
                session.record_label(pid, "positive" if is_pos else "negative")
                found += int(is_pos)
                served += 1
            batch_no += 1
        factors.append(found / (budget * prevalence))
        found_counts.append(found)
    return SimulationResult(
        strategy=strategy, leaf=leaf, budget=budget, factors=factors, positives_found=found_counts
    )


def _retrain_session(session: AnnotationSession, engines: CandidateEngines):
    labeled = sorted(session.positives) + sorted(session.negatives)
    y = np.array([1] * len(session.positives) + [0] * len(session.negatives))
    rows = engines.rows_for(labeled)
    if session.model_kind == "nb":
        X = engines.counts[rows]
    else:
        X = engines.features[rows]
    session.model = train_local(session.model_kind, X, y, seed=session.seed)


# ---------------------------------------------------------------------------
# Embedding-quality metric used by the round loop


def knn_same_leaf_precision(
    matrix: EmbeddingMatrix, gold_by_id: dict[str, str], k: int = 10, sample_ids=None
) -> float:
    """Mean fraction of each product's k nearest neighbors sharing its gold leaf."""
    index = KnnIndex(matrix)
    ids = sample_ids if sample_ids is not None else matrix.ids
    precisions = []
    for pid in ids:
        hits = knn_search(index, matrix.row(pid).astype(np.float64), k, exclude={pid})
        if not hits:
            continue
        same = sum(1 for other, _ in hits if gold_by_id[other] == gold_by_id[pid])
        precisions.append(same / len(hits))
    return float(np.mean(precisions)) if precisions else 0.0


def write_metrics_lines(path, metrics: dict[str, float]):
    """One metric per line: name then value, machine-readable for CI."""
    with open(path, "w", encoding="utf-8") as fh:
        for name, value in metrics.items():
            fh.write(f"{name} {value:.6f}\n")
