"""HTTP session service: recommend, explain, critique.

Sessions live in memory with TTL eviction; the model, gate, and dataset
are shared read-only, and per-session operations serialize on a
per-session lock. Every error body is {code, message}.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from critiq import critiquing
from critiq.simulate import new_session_id

DEFAULT_TOP_N = 20
DEFAULT_EXPLAIN_K = 10
DEFAULT_TTL_SECONDS = 3600.0


class ServiceError(Exception):
    def __init__(self, status, code, message):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


@dataclass
class _SessionEntry:
    session: critiquing.CritiqueSession
    lock: threading.Lock = field(default_factory=threading.Lock)
    touched: float = field(default_factory=time.monotonic)


@dataclass
class ServiceState:
    dataset: object
    model: object
    gate: object = None
    top_n: int = DEFAULT_TOP_N
    explain_k: int = DEFAULT_EXPLAIN_K
    session_ttl: float = DEFAULT_TTL_SECONDS
    sessions: dict = field(default_factory=dict)
    _store_lock: threading.Lock = field(default_factory=threading.Lock)

    def evict_expired(self):
        now = time.monotonic()
        with self._store_lock:
            dead = [sid for sid, e in self.sessions.items()
                    if now - e.touched > self.session_ttl]
            for sid in dead:
                del self.sessions[sid]

    def put(self, entry):
        with self._store_lock:
            self.sessions[entry.session.session_id] = entry

    def get(self, session_id):
        self.evict_expired()
        with self._store_lock:
            entry = self.sessions.get(session_id)
        if entry is None:
            raise ServiceError(404, "session_not_found", f"no session {session_id}")
        entry.touched = time.monotonic()
        return entry


class CreateSessionRequest(BaseModel):
    user_id: str | None = None
    seed_keyphrases: list[str] | None = None
    seed_items: list[str] | None = None
    top_n: int | None = None


class CritiqueRequest(BaseModel):
    keyphrase: str


def _resolve_labels(values, id_map, code, kind):
    indices = []
    for value in values:
        if value not in id_map:
            raise ServiceError(400, code, f"unknown {kind}: {value!r}")
        indices.append(id_map.index_of(value))
    return np.asarray(sorted(set(indices)), dtype=np.int64)


def _session_view(state, session):
    items, scores = session.history[-1]
    dataset = state.dataset
    top_n = session.top_n
    cards = []
    for item, score in zip(items[:top_n], scores[:top_n]):
        cards.append({
            "item": dataset.item_ids.id_of(int(item)),
            "score": float(score),
            "keyphrases": [dataset.keyphrase_labels.id_of(int(c))
                           for c in dataset.k_item.row(int(item))],
        })
    explanation_idx, _ = _explain_for(state, session)
    return {
        "session_id": session.session_id,
        "step": session.step,
        "closed": session.closed,
        "recommendations": cards,
        "explanation": [dataset.keyphrase_labels.id_of(int(c))
                        for c in explanation_idx[:state.explain_k]],
        "critiques": [dataset.keyphrase_labels.id_of(int(c))
                      for c in session.critiques],
    }


def _explain_for(state, session):
    from critiq.model import rank_items

    scores = state.model.keyphrase_scores(session.z_current)[0]
    return rank_items(scores)


def create_app(state):
    app = FastAPI(title="critiq session service")

    @app.exception_handler(ServiceError)
    async def _service_error(request: Request, exc: ServiceError):
        return JSONResponse(status_code=exc.status,
                            content={"code": exc.code, "message": exc.message})

    @app.get("/healthz")
    def healthz():
        from critiq.kernels import BACKEND

        return {"status": "ok", "kernel_backend": BACKEND,
                "n_sessions": len(state.sessions)}

    @app.get("/keyphrases")
    def keyphrases():
        labels = state.dataset.keyphrase_labels.ids()
        return {"keyphrases": [{"index": i, "label": lab}
                               for i, lab in enumerate(labels)]}

    @app.post("/sessions", status_code=201)
    def create_session(body: CreateSessionRequest):
        dataset = state.dataset
        r_indices = None
        k_indices = None
        user_index = None
        if body.user_id is not None:
            if body.user_id not in dataset.user_ids:
                raise ServiceError(404, "user_not_found",
                                   f"unknown user {body.user_id!r}")
            user_index = dataset.user_ids.index_of(body.user_id)
            r_indices = dataset.r_train.row(user_index)
        if body.seed_items:
            seeds = _resolve_labels(body.seed_items, dataset.item_ids,
                                    "unknown_item", "item")
            r_indices = (np.union1d(r_indices, seeds)
                         if r_indices is not None else seeds)
        if body.seed_keyphrases:
            k_indices = _resolve_labels(body.seed_keyphrases, dataset.keyphrase_labels,
                                        "unknown_keyphrase", "keyphrase")
        if r_indices is None and k_indices is None:
            raise ServiceError(400, "empty_seeds",
                               "provide user_id, seed_items, or seed_keyphrases")
        if r_indices is not None and len(r_indices) == 0 and k_indices is None:
            raise ServiceError(400, "empty_seeds", "no usable interactions for user")

        session = critiquing.open_session(
            state.model, new_session_id(),
            r_indices=r_indices if r_indices is not None and len(r_indices) else None,
            k_indices=k_indices,
            exclude=r_indices if r_indices is not None else (),
            top_n=body.top_n or state.top_n,
            user=user_index,
        )
        state.evict_expired()
        state.put(_SessionEntry(session))
        return _session_view(state, session)

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        entry = state.get(session_id)
        with entry.lock:
            return _session_view(state, entry.session)

    @app.delete("/sessions/{session_id}")
    def delete_session(session_id: str):
        entry = state.get(session_id)
        with entry.lock:
            entry.session.closed = True
        return {"session_id": session_id, "closed": True}

    @app.post("/sessions/{session_id}/critiques")
    def critique(session_id: str, body: CritiqueRequest):
        dataset = state.dataset
        entry = state.get(session_id)
        if body.keyphrase not in dataset.keyphrase_labels:
            raise ServiceError(400, "unknown_keyphrase",
                               f"unknown keyphrase {body.keyphrase!r}")
        kp = dataset.keyphrase_labels.index_of(body.keyphrase)
        blender = state.gate if state.gate is not None else critiquing.uac_blend
        with entry.lock:
            if entry.session.closed:
                raise ServiceError(409, "session_closed",
                                   f"session {session_id} is closed")
            critiquing.apply_critique(entry.session, state.model, blender, kp)
            return _session_view(state, entry.session)

    return app


def mount_ui(app, ui_dir):
    from fastapi.staticfiles import StaticFiles

    ui_dir = Path(ui_dir)
    if not (ui_dir / "index.html").exists():
        raise FileNotFoundError(f"no index.html under {ui_dir}")
    app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")
    return app
