"""The iterative curation loop: bootstrap embeddings, annotate, train the master,
re-embed the pool, refresh indexes and local models, repeat.

Round 0 uses the dependency-free bootstrap embeddings. Each advance trains the
fusion classifier on the accumulated gold labels, re-embeds every product with
it, rebuilds the KNN index on the new matrix, and retrains any local models so
no session ever predicts against stale feature dimensions.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field

import numpy as np

from .corpus import (
    EmbeddingMatrix,
    LabelRecord,
    LabelStore,
    Pool,
    Taxonomy,
    now_ms,
    write_embeddings,
)
from .featurize import DEFAULT_HASH_DIM, hash_counts, initial_embedding_matrix, tokenize, vectors_to_csr
from .local_models import AnnotationSession, CandidateEngines, train_local
from .master_model import FusionNet, TrainConfig, embed_pool, save_checkpoint, train_master
from .retrieval import InvertedIndex, KnnIndex, build_keyword_index


class OrchestratorError(ValueError):
    pass


@dataclass
class LoopState:
    pool: Pool
    taxonomy: Taxonomy
    images: EmbeddingMatrix | None
    labels: LabelStore
    hash_dim: int
    d_img: int
    seed: int
    round: int = 0
    embeddings: EmbeddingMatrix | None = None
    knn: KnnIndex | None = None
    keyword: InvertedIndex | None = None
    sessions: dict[str, AnnotationSession] = field(default_factory=dict)
    master: FusionNet | None = None
    events: list[dict] = field(default_factory=list)
    state_dir: str | None = None
    counts: object = None  # hashed token counts, fixed across rounds
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False)

    def engines(self) -> CandidateEngines:
        return CandidateEngines(
            ids=self.pool.ids,
            features=self.embeddings.values.astype(np.float64),
            counts=self.counts,
            knn=self.knn,
        )

    def session(self, leaf_id: str) -> AnnotationSession:
        return self.sessions[leaf_id]

    def _append_event(self, event: dict):
        self.events.append(event)
        if self.state_dir is not None:
            with open(os.path.join(self.state_dir, "events.jsonl"), "a", encoding="utf-8") as fh:
                fh.write(json.dumps(event, sort_keys=True) + "\n")

    def _save_embeddings(self):
        if self.state_dir is not None:
            path = os.path.join(self.state_dir, f"embeddings_round_{self.round:03d}.bin")
            write_embeddings(path, self.embeddings)

    def _save_master(self):
        if self.state_dir is not None and self.master is not None:
            path = os.path.join(self.state_dir, f"master_round_{self.round:03d}.bin")
            save_checkpoint(self.master, path)


def bootstrap(
    pool: Pool,
    taxonomy: Taxonomy,
    images: EmbeddingMatrix | None = None,
    labels: LabelStore | None = None,
    hash_dim: int = DEFAULT_HASH_DIM,
    seed: int = 0,
    state_dir: str | None = None,
) -> LoopState:
    """Round-0 state: bootstrap embeddings, fresh indexes, one empty session per leaf."""
    if len(pool) == 0:
        raise OrchestratorError("cannot bootstrap an empty pool")
    if state_dir is not None:
        os.makedirs(state_dir, exist_ok=True)
    d_img = images.dim if images is not None else 0
    if labels is None:
        labels = LabelStore(pool, taxonomy)
    embeddings = initial_embedding_matrix(pool, images, d_img, hash_dim)
    counts = vectors_to_csr(
        [hash_counts(tokenize(p.all_text()), hash_dim) for p in pool], hash_dim
    )
    state = LoopState(
        pool=pool,
        taxonomy=taxonomy,
        images=images,
        labels=labels,
        hash_dim=hash_dim,
        d_img=d_img,
        seed=seed,
        embeddings=embeddings,
        knn=KnnIndex(embeddings),
        keyword=build_keyword_index(pool),
        counts=counts,
        state_dir=state_dir,
    )
    for i, leaf in enumerate(sorted(taxonomy.leaf_ids)):
        state.sessions[leaf] = AnnotationSession(leaf_id=leaf, seed=seed * 100_003 + i)
    # replay any existing labels into sessions (reload path)
    for (pid, leaf), polarity in labels.effective().items():
        if leaf in state.sessions:
            state.sessions[leaf].record_label(pid, polarity)
    state._save_embeddings()
    state._append_event(
        {
            "type": "bootstrap",
            "round": 0,
            "timestamp": now_ms(),
            "n_products": len(pool),
            "n_leaves": len(taxonomy.leaf_ids),
            "embedding_dim": embeddings.dim,
        }
    )
    return state


def retrain_session_model(state: LoopState, session: AnnotationSession):
    """(Re)train a session's local model on the current feature space."""
    if not session.can_train():
        session.model = None
        return
    labeled = sorted(session.positives) + sorted(session.negatives)
    y = np.array([1] * len(session.positives) + [0] * len(session.negatives))
    engines = state.engines()
    rows = engines.rows_for(labeled)
    X = engines.counts[rows] if session.model_kind == "nb" else engines.features[rows]
    session.model = train_local(session.model_kind, X, y, seed=session.seed)


def advance_round(state: LoopState, config: TrainConfig) -> LoopState:
    """Train the master on current gold labels, re-embed, refresh indexes and models.

    Exclusive: callers must not mutate labels mid-advance (the service queues
    submissions and replays them after the swap).
    """
    with state.lock:
        snapshot = state.labels.gold_snapshot()
        gold = {leaf: pos for leaf, (pos, _neg) in snapshot.items() if pos}
        eligible = [leaf for leaf, pids in gold.items() if len(pids) >= 2]
        if len(eligible) < 2:
            raise OrchestratorError(
                f"cannot advance: need >=2 leaves with >=2 positives, have {len(eligible)} "
                f"(labeled leaves: {sorted(gold)})"
            )
        net, log = train_master(state.pool, state.images, gold, config)
        new_matrix = embed_pool(net, state.pool, state.images)

        state.master = net
        state.embeddings = new_matrix
        state.knn = KnnIndex(new_matrix)
        state.round += 1
        for leaf in sorted(state.sessions):
            session = state.sessions[leaf]
            if session.model is not None:
                retrain_session_model(state, session)
        state._save_embeddings()
        state._save_master()
        n_pos = sum(len(pos) for pos, _ in snapshot.values())
        n_neg = sum(len(neg) for _, neg in snapshot.values())
        state._append_event(
            {
                "type": "advance",
                "round": state.round,
                "timestamp": now_ms(),
                "n_classes": net.n_classes,
                "n_positive_labels": n_pos,
                "n_negative_labels": n_neg,
                "final_train_loss": log[-1]["train_loss"],
                "test_top1": log[-1]["test_top1"],
                "embedding_dim": new_matrix.dim,
            }
        )
    return state


def record_master_rejection(state: LoopState, leaf_id: str, product_id: str, annotator: str = ""):
    """An annotator rejected a master-suggested product: store a negative and
    mark the leaf's local model for retraining."""
    session = state.sessions.get(leaf_id)
    if session is None:
        raise OrchestratorError(f"unknown leaf {leaf_id!r}")
    if session.served.get(product_id) != "master":
        raise OrchestratorError(
            f"product {product_id!r} was not served via the master for leaf {leaf_id!r}"
        )
    state.labels.append(
        LabelRecord(
            product_id=product_id,
            leaf_id=leaf_id,
            polarity="negative",
            annotator=annotator,
            source="master",
            timestamp=now_ms(),
        )
    )
    session.record_label(product_id, "negative")
    session.model = None  # stale; retrained on next use


def load_events(state_dir) -> list[dict]:
    path = os.path.join(state_dir, "events.jsonl")
    if not os.path.exists(path):
        return []
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
