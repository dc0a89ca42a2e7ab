"""HTTP service for the 2AFC shape-identification experiment.

Serves pre-generated dot stimuli as static assets, hands out trials
strictly in sequence, persists every response to an append-only JSONL
log before acknowledging it, and reports accuracy plus psychometric
summaries.  Correctness feedback is revealed only during the training
phase; no payload sent before a test response contains the answer.
"""

from __future__ import annotations

import json
import os
import secrets
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .evaluation import fit_psychometric

__all__ = ["ExperimentStore", "SessionError", "create_app"]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class SessionError(Exception):
    def __init__(self, status: int, detail: str):
        super().__init__(detail)
        self.status = status
        self.detail = detail


@dataclass
class Session:
    session_id: str
    plan: list[dict]  # per trial: stimulus id, phase, slot assignment
    cursor: int = 0
    created_at: str = field(default_factory=_now)

    @property
    def num_trials(self) -> int:
        return len(self.plan)


class ExperimentStore:
    """Stimulus bank reader plus durable session state.

    Sessions live in ``state_dir/sessions`` as a ``.meta.json`` (the
    trial plan) and a ``.jsonl`` response log.  Both are replayed on
    construction, so a restarted process resumes exactly where the
    previous one acknowledged its last response.
    """

    def __init__(self, bank_dir: str | Path, state_dir: str | Path):
        self.bank_dir = Path(bank_dir)
        bank_meta = self.bank_dir / "bank.json"
        if not bank_meta.is_file():
            raise FileNotFoundError(f"no stimulus bank at {self.bank_dir}")
        self.bank = json.loads(bank_meta.read_text())
        self.trial_ids = sorted(
            p.name for p in (self.bank_dir / "trials").iterdir() if p.is_dir()
        )
        self.state_dir = Path(state_dir)
        self.sessions_dir = self.state_dir / "sessions"
        self.sessions_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._sessions: dict[str, Session] = {}
        self._records: dict[str, list[dict]] = {}
        self._replay()

    # -- persistence ---------------------------------------------------

    def _replay(self):
        for meta_path in sorted(self.sessions_dir.glob("*.meta.json")):
            meta = json.loads(meta_path.read_text())
            session = Session(
                session_id=meta["session_id"],
                plan=meta["plan"],
                created_at=meta["created_at"],
            )
            records = []
            log = meta_path.with_name(meta_path.name.replace(".meta.json", ".jsonl"))
            if log.is_file():
                for line in log.read_text().splitlines():
                    if line.strip():
                        records.append(json.loads(line))
            session.cursor = len(records)
            self._sessions[session.session_id] = session
            self._records[session.session_id] = records

    def _append_record(self, session_id: str, record: dict):
        log = self.sessions_dir / f"{session_id}.jsonl"
        with open(log, "a") as f:
            f.write(json.dumps(record) + "\n")
            f.flush()
            os.fsync(f.fileno())

    # -- sessions ------------------------------------------------------

    def trial_meta(self, stimulus_id: str) -> dict:
        return json.loads((self.bank_dir / "trials" / stimulus_id / "meta.json").read_text())

    def create_session(
        self, n_training: int = 20, n_test: int | None = None, seed: int | None = None
    ) -> Session:
        total_available = len(self.trial_ids)
        if n_test is None:
            n_test = max(total_available - n_training, 0)
        total = n_training + n_test
        if total > total_available:
            raise SessionError(
                409, f"bank has {total_available} trials, session needs {total}"
            )
        if total == 0:
            raise SessionError(422, "session must contain at least one trial")
        rng = np.random.default_rng(seed)
        order = rng.permutation(total_available)[:total]
        plan = []
        for i, bank_index in enumerate(order):
            plan.append(
                {
                    "stimulus_id": self.trial_ids[int(bank_index)],
                    "phase": "training" if i < n_training else "test",
                    "target_slot": "A" if rng.random() < 0.5 else "B",
                }
            )
        session = Session(session_id=secrets.token_hex(8), plan=plan)
        with self._lock:
            meta_path = self.sessions_dir / f"{session.session_id}.meta.json"
            meta_path.write_text(
                json.dumps(
                    {
                        "session_id": session.session_id,
                        "created_at": session.created_at,
                        "plan": session.plan,
                    }
                )
            )
            self._sessions[session.session_id] = session
            self._records[session.session_id] = []
        return session

    def get_session(self, session_id: str) -> Session:
        session = self._sessions.get(session_id)
        if session is None:
            raise SessionError(404, f"unknown session {session_id}")
        return session

    # -- trials ----------------------------------------------------------

    def trial_bundle(self, session_id: str, index: int) -> dict:
        """Stimulus references for the current trial; never the answer."""
        session = self.get_session(session_id)
        if index != session.cursor:
            raise SessionError(
                409, f"trial {index} not current (cursor is {session.cursor})"
            )
        if index >= session.num_trials:
            raise SessionError(410, "session complete")
        entry = session.plan[index]
        sid = entry["stimulus_id"]
        meta = self.trial_meta(sid)
        n_frames = int(meta["duration_frames"])
        frames = [f"/stimuli/trials/{sid}/frames/{t:05d}.png" for t in range(n_frames)]
        target_url = f"/stimuli/trials/{sid}/target.png"
        distractor_url = f"/stimuli/trials/{sid}/distractor.png"
        if entry["target_slot"] == "A":
            option_a, option_b = target_url, distractor_url
        else:
            option_a, option_b = distractor_url, target_url
        return {
            "session_id": session_id,
            "trial_index": index,
            "phase": entry["phase"],
            "total_trials": session.num_trials,
            "frame_rate": meta.get("frame_rate", 30.0),
            "frame_urls": frames,
            "option_a_url": option_a,
            "option_b_url": option_b,
        }

    def post_response(
        self, session_id: str, trial_index: int, choice: str, response_time_ms: float
    ) -> dict:
        if choice not in ("A", "B"):
            raise SessionError(422, "choice must be 'A' or 'B'")
        if not (response_time_ms > 0):
            raise SessionError(422, "response_time_ms must be positive")
        with self._lock:
            session = self.get_session(session_id)
            if trial_index >= session.num_trials:
                raise SessionError(410, "session complete")
            if trial_index < session.cursor:
                raise SessionError(409, f"trial {trial_index} already answered")
            if trial_index != session.cursor:
                raise SessionError(
                    409, f"trial {trial_index} not current (cursor is {session.cursor})"
                )
            entry = session.plan[trial_index]
            correct = choice == entry["target_slot"]
            record = {
                "session_id": session_id,
                "trial_index": trial_index,
                "stimulus_id": entry["stimulus_id"],
                "phase": entry["phase"],
                "choice": choice,
                "correct": correct,
                "response_time_ms": float(response_time_ms),
                "received_at": _now(),
            }
            self._append_record(session_id, record)
            self._records[session_id].append(record)
            session.cursor += 1
            ack = {"accepted": True, "trial_index": trial_index, "phase": entry["phase"]}
            if entry["phase"] == "training":
                ack["correct"] = correct
            return ack

    # -- results ---------------------------------------------------------

    def results(self, session_id: str | None = None) -> dict:
        if session_id is not None:
            self.get_session(session_id)
            records = list(self._records.get(session_id, []))
        else:
            records = [r for recs in self._records.values() for r in recs]
        if not records:
            raise SessionError(404, "no responses recorded")
        test = [r for r in records if r["phase"] == "test"]
        out: dict = {
            "n_sessions": len({r["session_id"] for r in records}),
            "n_responses": len(records),
            "n_test_responses": len(test),
        }
        if not test:
            out["accuracy"] = None
            out["accuracy_defined"] = False
            return out
        out["accuracy_defined"] = True
        out["accuracy"] = sum(r["correct"] for r in test) / len(test)

        # difficulty bins by informative-dot count from the bank metadata
        by_dots: dict[int, list[bool]] = {}
        for r in test:
            dots = self.trial_meta(r["stimulus_id"]).get("informative_dots")
            if dots is not None:
                by_dots.setdefault(int(dots), []).append(bool(r["correct"]))
        bins = sorted(
            (float(x), sum(flags), len(flags)) for x, flags in by_dots.items()
        )
        out["informative_dot_bins"] = [
            {"informative_dots": x, "n_correct": k, "n_total": n} for x, k, n in bins
        ]
        if len(bins) >= 2:
            fit = fit_psychometric(bins)
            out["psychometric"] = {
                "alpha": None if not fit.identifiable else fit.alpha,
                "beta": None if not fit.identifiable else fit.beta,
                "converged": fit.converged,
                "identifiable": fit.identifiable,
            }
        return out


class CreateSessionRequest(BaseModel):
    n_training: int = 20
    n_test: int | None = None
    seed: int | None = None


class ResponseRequest(BaseModel):
    trial_index: int
    choice: str
    response_time_ms: float


def create_app(bank_dir: str | Path, state_dir: str | Path) -> FastAPI:
    store = ExperimentStore(bank_dir, state_dir)
    app = FastAPI(title="shape-identification experiment")
    app.state.store = store

    def guard(fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except SessionError as e:
            raise HTTPException(status_code=e.status, detail=e.detail)

    @app.post("/api/sessions")
    def create_session(req: CreateSessionRequest):
        session = guard(store.create_session, req.n_training, req.n_test, req.seed)
        return {
            "session_id": session.session_id,
            "n_trials": session.num_trials,
            "created_at": session.created_at,
        }

    @app.get("/api/sessions/{session_id}/trials/{index}")
    def get_trial(session_id: str, index: int):
        return guard(store.trial_bundle, session_id, index)

    @app.post("/api/sessions/{session_id}/responses")
    def post_response(session_id: str, req: ResponseRequest):
        return guard(
            store.post_response, session_id, req.trial_index, req.choice, req.response_time_ms
        )

    @app.get("/api/sessions/{session_id}/results")
    def session_results(session_id: str):
        return guard(store.results, session_id)

    @app.get("/api/results")
    def all_results():
        return guard(store.results, None)

    app.mount("/stimuli", StaticFiles(directory=str(bank_dir)), name="stimuli")
    return app
