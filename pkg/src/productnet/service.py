"""HTTP JSON API for annotation: candidates, labels, training, prediction, stats.

The app wraps one LoopState. Mutations are serialized through the state lock;
master training runs on a background thread with a polling status endpoint.
Label submissions that arrive while a round advance is swapping indexes are
queued and replayed afterwards, so none are lost.

Candidate responses never contain gold_leaf: that field exists only to drive
simulations and must stay invisible to annotators.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

from fastapi import Body, FastAPI, HTTPException, Query

from .corpus import LabelRecord, now_ms
from .local_models import mixed_sample, positive_proba
from .master_model import TrainConfig, encode_products, predict_batch, predict_topk, train_master
from .orchestrator import (
    LoopState,
    OrchestratorError,
    advance_round,
    record_master_rejection,
    retrain_session_model,
)
from .retrieval import keyword_search, knn_search, random_sample

CANDIDATE_METHODS = ("random", "keyword", "knn", "active_lr", "active_nb", "active_mlp", "master", "adhoc")
MAX_K = 200


@dataclass
class TrainJob:
    state: str = "queued"  # queued | running | done | failed
    log: list = field(default_factory=list)
    error: str | None = None
    started_ms: int = 0
    finished_ms: int = 0


class AppState:
    """Service-level wrapper: loop state plus training job and submission queue."""

    def __init__(self, loop: LoopState):
        self.loop = loop
        self.train_job: TrainJob | None = None
        self.advancing = False
        self.queued_labels: list[tuple[str, list, str]] = []
        self._mutex = threading.Lock()
        self._master_cache = None  # (net identity, ids, top1 class idx, top1 prob)

    def master_predictions(self):
        """Pool-wide top-1 predictions for the installed master, cached per net."""
        net = self.loop.master
        if net is None:
            return None
        if self._master_cache is None or self._master_cache[0] is not net:
            enc = encode_products(list(self.loop.pool), self.loop.images, net)
            probs = predict_batch(net, enc)
            top1 = probs.argmax(axis=1)
            row_of = {pid: i for i, pid in enumerate(self.loop.pool.ids)}
            self._master_cache = (net, list(self.loop.pool.ids), top1, probs, row_of)
        return self._master_cache


def _truncate(text: str, limit: int = 200) -> str:
    return text if len(text) <= limit else text[:limit]


def _candidate_card(app_state: AppState, product, source: str, probability=None) -> dict:
    card = {
        "product_id": product.id,
        "title": product.title,
        "brand": product.brand,
        "description": _truncate(product.description),
        "image_url": product.image_url,
        "source": source,
        "probability": probability,
    }
    cache = app_state.master_predictions()
    if cache is not None:
        net, _ids, top1, probs, row_of = cache
        row = row_of[product.id]
        ci = int(top1[row])
        card["master_top1"] = {"leaf_id": net.classes[ci], "probability": float(probs[row, ci])}
    return card


def create_app(app_state: AppState) -> FastAPI:
    app = FastAPI(title="productnet", version="0.1.0")
    loop = app_state.loop

    def get_session(leaf_id: str):
        session = loop.sessions.get(leaf_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown leaf {leaf_id!r}")
        return session

    @app.get("/taxonomy")
    def taxonomy():
        return {"roots": loop.taxonomy.to_tree(), "leaf_ids": sorted(loop.taxonomy.leaf_ids)}

    @app.get("/products/{product_id}")
    def product(product_id: str):
        if product_id not in loop.pool:
            raise HTTPException(status_code=404, detail=f"unknown product {product_id!r}")
        return loop.pool[product_id].public_record()

    @app.get("/leaves/{leaf_id:path}/candidates")
    def candidates(
        leaf_id: str,
        method: str = Query(...),
        k: int = Query(20),
        query: str | None = Query(None),
        ids: str | None = Query(None),
    ):
        session = get_session(leaf_id)
        if method not in CANDIDATE_METHODS:
            raise HTTPException(status_code=400, detail=f"invalid method {method!r}")
        if not 1 <= k <= MAX_K:
            raise HTTPException(status_code=400, detail=f"k must be in [1, {MAX_K}]")
        with loop.lock:
            labeled = session.labeled
            cards, missing = [], []
            if method == "random":
                chosen = random_sample(loop.pool.ids, k, session.next_seed(), exclude=labeled)
                cards = [_candidate_card(app_state, loop.pool[pid], "random") for pid in chosen]
            elif method == "keyword":
                if not query:
                    raise HTTPException(status_code=400, detail="keyword method requires ?query=")
                hits = keyword_search(loop.keyword, query, k, exclude=labeled)
                cards = [_candidate_card(app_state, loop.pool[pid], "keyword") for pid, _ in hits]
            elif method == "knn":
                engines = loop.engines()
                if session.positives:
                    rows = engines.rows_for(sorted(session.positives))
                    centroid = engines.features[rows].mean(axis=0)
                    hits = knn_search(loop.knn, centroid, k, exclude=labeled)
                    cards = [_candidate_card(app_state, loop.pool[pid], "knn") for pid, _ in hits]
            elif method == "adhoc":
                if not ids:
                    raise HTTPException(status_code=400, detail="adhoc method requires ?ids=")
                for pid in [s for s in ids.split(",") if s]:
                    if pid in loop.pool:
                        cards.append(_candidate_card(app_state, loop.pool[pid], "adhoc"))
                    else:
                        missing.append(pid)
            elif method == "master":
                cache = app_state.master_predictions()
                if cache is None:
                    raise HTTPException(status_code=409, detail="no trained master model")
                net, pool_ids, top1, probs, _row_of = cache
                if leaf_id not in net.classes:
                    ranked = []
                else:
                    ci = net.classes.index(leaf_id)
                    ranked = sorted(
                        (
                            (pool_ids[i], float(probs[i, ci]))
                            for i in range(len(pool_ids))
                            if top1[i] == ci and pool_ids[i] not in labeled
                        ),
                        key=lambda t: (-t[1], t[0]),
                    )[:k]
                cards = [
                    _candidate_card(app_state, loop.pool[pid], "master", probability=p)
                    for pid, p in ranked
                ]
            else:  # active_lr / active_nb / active_mlp
                kind = method.removeprefix("active_")
                if not session.can_train():
                    raise HTTPException(
                        status_code=409,
                        detail="active learning needs at least one positive and one negative label",
                    )
                if session.model is None or session.model_kind != kind:
                    session.model_kind = kind
                    retrain_session_model(loop, session)
                engines = loop.engines()
                sampled = mixed_sample(session, engines, k)
                prob_by_id = {}
                model_ids = [c.product_id for c in sampled]
                if model_ids:
                    rows = engines.rows_for(model_ids)
                    X = engines.counts[rows] if kind == "nb" else engines.features[rows]
                    prob_by_id = dict(zip(model_ids, positive_proba(session.model, X)))
                cards = [
                    _candidate_card(
                        app_state,
                        loop.pool[c.product_id],
                        c.source,
                        probability=float(prob_by_id[c.product_id]),
                    )
                    for c in sampled
                ]
            for card in cards:
                session.record_served(card["product_id"], card["source"])
        response = {"leaf_id": leaf_id, "method": method, "cards": cards}
        if missing:
            response["missing"] = missing
        return response

    @app.post("/leaves/{leaf_id:path}/labels")
    def submit_labels(leaf_id: str, payload: dict = Body(...)):
        session = get_session(leaf_id)
        batch = payload.get("labels") or []
        annotator = payload.get("annotator", "")
        if not batch:
            raise HTTPException(status_code=400, detail="empty label batch")
        with app_state._mutex:
            if app_state.advancing:
                app_state.queued_labels.append((leaf_id, batch, annotator))
                return {"queued": True, "accepted": len(batch)}
        return _apply_labels(app_state, leaf_id, batch, annotator)

    @app.get("/leaves/{leaf_id:path}/stats")
    def stats(leaf_id: str):
        session = get_session(leaf_id)
        with loop.lock:
            by_source: dict[str, int] = {}
            last_ts = None
            for (pid, leaf), _pol in loop.labels.effective().items():
                if leaf != leaf_id:
                    continue
                rec = loop.labels.effective_record(pid, leaf)
                by_source[rec.source] = by_source.get(rec.source, 0) + 1
                last_ts = max(last_ts or 0, rec.timestamp)
            return {
                "leaf_id": leaf_id,
                "positive": len(session.positives),
                "negative": len(session.negatives),
                "served": len(session.served),
                "by_source": by_source,
                "last_label_ms": last_ts,
                "model": {
                    "kind": session.model_kind,
                    "trained": session.model is not None,
                },
                "round": loop.round,
            }

    @app.post("/master/train")
    def train(payload: dict = Body(default={})):
        with app_state._mutex:
            if app_state.train_job is not None and app_state.train_job.state in ("queued", "running"):
                raise HTTPException(status_code=409, detail="a training run is already active")
            job = TrainJob(started_ms=now_ms())
            app_state.train_job = job
        allowed = {"epochs", "batch_size", "lr", "seed", "embed_dim", "train_fraction", "hash_dim"}
        overrides = {key: payload[key] for key in payload.keys() & allowed}
        overrides.setdefault("hash_dim", loop.hash_dim)
        try:
            config = TrainConfig(**overrides)
        except (TypeError, ValueError) as exc:
            job.state = "failed"
            job.error = str(exc)
            raise HTTPException(status_code=400, detail=str(exc))

        def run():
            job.state = "running"
            try:
                snapshot = loop.labels.gold_snapshot()
                gold = {leaf: pos for leaf, (pos, _neg) in snapshot.items() if pos}
                net, _ = train_master(
                    loop.pool, loop.images, gold, config, on_epoch=job.log.append
                )
                with loop.lock:
                    loop.master = net
                job.state = "done"
            except Exception as exc:  # surfaced via /master/status
                job.state = "failed"
                job.error = str(exc)
            job.finished_ms = now_ms()

        threading.Thread(target=run, daemon=True).start()
        return {"status": "queued"}

    @app.get("/master/status")
    def train_status():
        job = app_state.train_job
        if job is None:
            return {"state": "idle", "log": []}
        return {
            "state": job.state,
            "log": list(job.log),
            "error": job.error,
            "started_ms": job.started_ms,
            "finished_ms": job.finished_ms,
        }

    @app.get("/master/predict/{product_id}")
    def master_predict(product_id: str, k: int = Query(5)):
        if loop.master is None:
            raise HTTPException(status_code=409, detail="no trained master model")
        if product_id not in loop.pool:
            raise HTTPException(status_code=404, detail=f"unknown product {product_id!r}")
        kk = max(1, min(k, loop.master.n_classes))
        preds = predict_topk(loop.master, loop.pool[product_id], kk, loop.images)
        return {
            "product_id": product_id,
            "predictions": [{"leaf_id": leaf, "probability": p} for leaf, p in preds],
        }

    @app.post("/rounds/advance")
    def rounds_advance(payload: dict = Body(default={})):
        with app_state._mutex:
            if app_state.advancing:
                raise HTTPException(status_code=409, detail="a round advance is already running")
            app_state.advancing = True
        try:
            allowed = {"epochs", "batch_size", "lr", "seed", "embed_dim", "train_fraction", "hash_dim"}
            overrides = {key: payload[key] for key in payload.keys() & allowed}
            overrides.setdefault("hash_dim", loop.hash_dim)
            config = TrainConfig(**overrides)
            advance_round(loop, config)
            app_state._master_cache = None
        except OrchestratorError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        finally:
            with app_state._mutex:
                app_state.advancing = False
                queued, app_state.queued_labels = app_state.queued_labels, []
        replayed = [
            _apply_labels(app_state, leaf, batch, annotator) for leaf, batch, annotator in queued
        ]
        return {"event": loop.events[-1], "replayed_batches": len(replayed)}

    return app


def _apply_labels(app_state: AppState, leaf_id: str, batch: list, annotator: str) -> dict:
    loop = app_state.loop
    session = loop.sessions[leaf_id]
    applied, errors = 0, []
    with loop.lock:
        for item in batch:
            pid = item.get("product_id")
            polarity = item.get("polarity")
            if polarity not in ("positive", "negative"):
                errors.append({"product_id": pid, "error": f"invalid polarity {polarity!r}"})
                continue
            if pid not in loop.pool:
                errors.append({"product_id": pid, "error": "unknown product"})
                continue
            source = session.served.get(pid, "adhoc")
            try:
                if source == "master" and polarity == "negative":
                    record_master_rejection(loop, leaf_id, pid, annotator)
                else:
                    loop.labels.append(
                        LabelRecord(
                            product_id=pid,
                            leaf_id=leaf_id,
                            polarity=polarity,
                            annotator=annotator,
                            source=source,
                            timestamp=now_ms(),
                        )
                    )
                    session.record_label(pid, polarity)
                    session.model = None  # stale until retrained
                applied += 1
            except (OrchestratorError, ValueError) as exc:
                errors.append({"product_id": pid, "error": str(exc)})
        trained = False
        if session.can_train():
            retrain_session_model(loop, session)
            trained = session.model is not None
    return {
        "leaf_id": leaf_id,
        "applied": applied,
        "errors": errors,
        "positive": len(session.positives),
        "negative": len(session.negatives),
        "local_model_trained": trained,
    }
