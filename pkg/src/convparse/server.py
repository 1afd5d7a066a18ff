"""HTTP/JSON API for the chat UI, stateless above the session store."""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, HTTPException
from fastapi.responses import FileResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .pipeline import EmptyUtterance, Engine, SessionStore


class UtteranceBody(BaseModel):
    text: str


def create_app(engine: Engine, ui_dir: str | Path | None = None, idle_timeout_s: float = 1800.0) -> FastAPI:
    app = FastAPI(title="convparse")
    store = SessionStore(engine, idle_timeout_s=idle_timeout_s)
    app.state.store = store

    @app.post("/api/session")
    def create_session():
        session = store.create()
        return {"session_id": session.session_id}

    @app.post("/api/session/{session_id}/utterance")
    def utterance(session_id: str, body: UtteranceBody):
        session = store.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail="unknown session")
        try:
            record = engine.step(session, body.text)
        except EmptyUtterance:
            raise HTTPException(status_code=422, detail="utterance must be non-empty")
        return record.to_dict(engine.kg.label)

    @app.get("/api/session/{session_id}/history")
    def history(session_id: str):
        session = store.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail="unknown session")
        return {
            "session_id": session.session_id,
            "turns": [r.to_dict(engine.kg.label) for r in session.transcript],
        }

    @app.get("/api/meta")
    def meta():
        return {
            "kg": engine.kg.stats(),
            "checkpoint": engine.checkpoint_id,
            "t_max": engine.t_max,
            "type_linking": engine.use_type_link,
        }

    if ui_dir is not None and Path(ui_dir).exists():
        ui_path = Path(ui_dir)

        @app.get("/")
        def index():
            return FileResponse(ui_path / "index.html")

        app.mount("/ui", StaticFiles(directory=str(ui_path)), name="ui")

    return app
