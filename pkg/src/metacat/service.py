"""HTTP session service for live adaptive testing.

Administers fixed-length tests from a trained checkpoint: a session walks
a respondent through n_max questions picked greedily by the checkpoint's
policy, re-estimating ability after every answer. Sessions persist as
append-only JSON-lines answer logs and are rebuilt by deterministic
replay on restart, so a restart never loses or alters a session.

Serving conventions the training pipeline does not pin down: actions are
greedy for determinism and respondent fairness, the candidate mask is
every not-yet-administered question, and for MLP checkpoints the reported
"ability" is the mean predicted correctness over the question bank (the
adapted hidden vector itself is not human-readable). The response field
``estimate_kind`` labels which scalar a client is looking at.
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from pathlib import Path

import numpy as np
from fastapi import FastAPI
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from . import checkpoints
from .data import PaddedResponses, derived_rng
from .errors import CheckpointError, ConfigError
from .models import map_ability_batch
from .training import POLICY_KINDS, restore_nets, select_actions

LOG_FORMAT_VERSION = 1


class ApiError(Exception):
    """Error carrying the HTTP status and machine-readable code."""

    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


class CreateBody(BaseModel):
    policy: str | None = None


class AnswerBody(BaseModel):
    question_id: str
    correct: int


class Session:
    """One respondent's test: administered history plus the pending pick."""

    def __init__(self, session_id: str, policy: str | None, n_max: int):
        self.session_id = session_id
        self.policy = policy  # None = checkpoint's own policy
        self.n_max = n_max
        self.administered: list[tuple[int, float]] = []
        self.pending: int | None = None
        self.trajectory: list[float] = []
        self.last_touch = time.monotonic()
        self.lock = threading.Lock()

    @property
    def finished(self) -> bool:
        return len(self.administered) >= self.n_max


class SessionService:
    """Checkpoint-backed session store with per-session serialization.

    The checkpoint is immutable shared state; each session carries its own
    lock so distinct sessions proceed concurrently while operations on one
    session are strictly ordered.
    """

    def __init__(self, checkpoint_path, log_dir, n_max: int = 10,
                 lam2: float = 1.0, capacity: int = 1024, seed: int = 0,
                 metadata_path=None, ttl_seconds: float | None = None):
        payload = checkpoints.load_checkpoint(checkpoint_path)
        self.model, self.policy_net, _, self.train_cfg = restore_nets(payload)
        self.adapt_cfg = self.train_cfg.adapt_config(eval_mode=True)
        self.question_ids = [str(q) for q in payload["question_ids"]]
        if not 1 <= n_max <= self.model.num_questions:
            raise ConfigError(
                f"n_max must be in [1, {self.model.num_questions}]")
        if capacity < 1:
            raise ConfigError("capacity must be >= 1")
        self.n_max = n_max
        self.lam2 = lam2
        self.capacity = capacity
        self.seed = seed
        self.ttl_seconds = ttl_seconds
        self.estimate_kind = ("irt-map" if self.model.kind == "biirt"
                              else "mean-correctness")
        self.display = {}
        if metadata_path is not None:
            doc = json.loads(Path(metadata_path).read_text())
            self.display = {str(k): str(v) for k, v in doc.items()}
        self.log_dir = Path(log_dir)
        self.log_dir.mkdir(parents=True, exist_ok=True)
        self.sessions: dict[str, Session] = {}
        self.store_lock = threading.Lock()
        self._replay_logs()

    # ----- persistence -------------------------------------------------

    def _log_path(self, session_id: str) -> Path:
        return self.log_dir / f"{session_id}.jsonl"

    def _append_log(self, session_id: str, record: dict) -> None:
        with open(self._log_path(session_id), "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()

    def _replay_logs(self) -> None:
        for path in sorted(self.log_dir.glob("*.jsonl")):
            records = [json.loads(line) for line
                       in path.read_text().splitlines() if line.strip()]
            if not records or records[0].get("type") != "create":
                raise CheckpointError(f"corrupt session log {path}")
            head = records[0]
            session = Session(head["session_id"], head.get("policy"),
                              head["n_max"])
            expired = False
            for record in records[1:]:
                if record.get("type") == "expire":
                    expired = True
                    break
                expected = self._select(session)
                if self.question_ids[expected] != record["question_id"]:
                    raise CheckpointError(
                        f"replay mismatch in {path}: policy picked "
                        f"{self.question_ids[expected]} but log has "
                        f"{record['question_id']}")
                self._apply_answer(session, expected,
                                   float(record["correct"]))
            if not expired:
                self.sessions[session.session_id] = session

    # ----- model plumbing ----------------------------------------------

    def _admin_packed(self, session: Session) -> PaddedResponses:
        qs = [[q for q, _ in session.administered]]
        ys = [[y for _, y in session.administered]]
        return PaddedResponses.from_lists(qs, ys)

    def _local_params(self, session: Session):
        if not session.administered:
            return self.model.init_local(1)
        return self.model.adapt(self._admin_packed(session), self.adapt_cfg)

    def _select(self, session: Session) -> int:
        num_q = self.model.num_questions
        states = np.zeros((1, num_q))
        avail = np.ones((1, num_q), dtype=bool)
        for q, y in session.administered:
            states[0, q] = 1.0 if y > 0.5 else -1.0
            avail[0, q] = False
        local = self._local_params(session)
        policy = session.policy or self.train_cfg.policy
        rng = derived_rng(self.seed, "session", session.session_id,
                          "step", len(session.administered))
        action = select_actions(policy, self.policy_net, self.model, local,
                                states, avail, rng, greedy=True)
        return int(np.atleast_1d(action)[0])

    def _estimate(self, session: Session) -> float:
        if self.model.kind == "biirt":
            theta = map_ability_batch(
                self._admin_packed(session), self.model.params["difficulty"],
                self.lam2, float(self.model.params["ability_prior"][0]))
            return float(theta[0])
        local = self._local_params(session)
        return float(self.model.predict_all(local).mean())

    def _apply_answer(self, session: Session, qidx: int, y: float) -> None:
        session.administered.append((qidx, y))
        session.pending = None
        session.trajectory.append(self._estimate(session))

    # ----- operations ---------------------------------------------------

    def _sweep_expired(self) -> None:
        if self.ttl_seconds is None:
            return
        now = time.monotonic()
        for sid, session in list(self.sessions.items()):
            if now - session.last_touch > self.ttl_seconds:
                del self.sessions[sid]
                self._append_log(sid, {"type": "expire"})

    def create_session(self, policy: str | None = None) -> dict:
        if policy is not None:
            if policy not in POLICY_KINDS:
                raise ApiError(422, "validation",
                               f"unknown policy {policy!r}")
            if policy in ("unbiased", "approx") and self.policy_net is None:
                raise ApiError(422, "validation",
                               f"checkpoint has no learned policy for "
                               f"{policy!r}")
        with self.store_lock:
            self._sweep_expired()
            active = sum(1 for s in self.sessions.values() if not s.finished)
            if active >= self.capacity:
                raise ApiError(429, "capacity",
                               f"service at capacity ({self.capacity} "
                               "active sessions)")
            session_id = uuid.uuid4().hex
            session = Session(session_id, policy, self.n_max)
            self.sessions[session_id] = session
        self._append_log(session_id, {
            "type": "create", "v": LOG_FORMAT_VERSION,
            "session_id": session_id, "policy": policy,
            "n_max": self.n_max})
        return {"session_id": session_id, "n_max": self.n_max}

    def _get(self, session_id: str) -> Session:
        with self.store_lock:
            session = self.sessions.get(session_id)
        if session is None:
            raise ApiError(404, "not-found",
                           f"unknown session {session_id!r}")
        session.last_touch = time.monotonic()
        return session

    def next_question(self, session_id: str) -> dict:
        session = self._get(session_id)
        with session.lock:
            if session.finished:
                raise ApiError(409, "finished",
                               f"session finished after {session.n_max} "
                               "questions")
            if session.pending is None:
                session.pending = self._select(session)
            public = self.question_ids[session.pending]
            out = {"question_id": public,
                   "step": len(session.administered) + 1,
                   "n_max": session.n_max}
            if public in self.display:
                out["display"] = self.display[public]
            return out

    def submit_answer(self, session_id: str, question_id: str,
                      correct: int) -> dict:
        if correct not in (0, 1):
            raise ApiError(422, "validation",
                           f"correct must be 0 or 1, got {correct!r}")
        session = self._get(session_id)
        with session.lock:
            if session.finished:
                raise ApiError(409, "finished",
                               f"session finished after {session.n_max} "
                               "questions")
            if session.pending is None:
                session.pending = self._select(session)
            pending_public = self.question_ids[session.pending]
            if question_id != pending_public:
                raise ApiError(409, "conflict",
                               f"pending question is {pending_public!r}, "
                               f"not {question_id!r}")
            self._apply_answer(session, session.pending, float(correct))
            self._append_log(session_id, {
                "type": "answer", "question_id": pending_public,
                "correct": correct})
            return {"theta_hat": session.trajectory[-1],
                    "step": len(session.administered),
                    "finished": session.finished,
                    "estimate_kind": self.estimate_kind}

    def get_state(self, session_id: str) -> dict:
        session = self._get(session_id)
        with session.lock:
            return {
                "session_id": session.session_id,
                "status": "finished" if session.finished else "active",
                "policy": session.policy or self.train_cfg.policy,
                "n_max": session.n_max,
                "step": len(session.administered),
                "remaining": session.n_max - len(session.administered),
                "administered": [
                    {"question_id": self.question_ids[q],
                     "correct": int(y)}
                    for q, y in session.administered],
                "trajectory": list(session.trajectory),
                "estimate_kind": self.estimate_kind,
                "pending_question_id": (
                    None if session.pending is None
                    else self.question_ids[session.pending]),
            }


def create_app(checkpoint_path, log_dir, n_max: int = 10,
               lam2: float = 1.0, capacity: int = 1024, seed: int = 0,
               metadata_path=None, ttl_seconds: float | None = None
               ) -> FastAPI:
    """Build the FastAPI app; the checkpoint loads before serving starts."""
    service = SessionService(checkpoint_path, log_dir, n_max=n_max,
                             lam2=lam2, capacity=capacity, seed=seed,
                             metadata_path=metadata_path,
                             ttl_seconds=ttl_seconds)
    app = FastAPI(title="adaptive testing sessions")
    app.state.service = service
    # the browser front end is typically served from another origin
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])

    @app.exception_handler(ApiError)
    async def api_error(request, exc: ApiError):
        return JSONResponse(status_code=exc.status,
                            content={"code": exc.code,
                                     "message": exc.message})

    @app.exception_handler(RequestValidationError)
    async def body_error(request, exc: RequestValidationError):
        return JSONResponse(status_code=422,
                            content={"code": "validation",
                                     "message": str(exc.errors())})

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "model": service.model.kind,
                "sessions": len(service.sessions)}

    @app.post("/sessions")
    def create_session(body: CreateBody | None = None):
        policy = body.policy if body is not None else None
        return service.create_session(policy)

    @app.get("/sessions/{session_id}/next")
    def next_question(session_id: str):
        return service.next_question(session_id)

    @app.post("/sessions/{session_id}/answer")
    def submit_answer(session_id: str, body: AnswerBody):
        return service.submit_answer(session_id, body.question_id,
                                     body.correct)

    @app.get("/sessions/{session_id}")
    def get_state(session_id: str):
        return service.get_state(session_id)

    return app
