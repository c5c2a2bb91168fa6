"""Line-delimited JSON service exposing sessions and scoring.

One request object per line, one response object per line, over TCP or
standard streams.  Commands: ``reset`` (new session, returns the
rendered prompt), ``step`` (advance a session), ``score`` (stateless
reward computation, single or batch), ``stats``.  Responses always
carry ``ok``; failures use ``{"ok": false, "error": ...}`` and never
tear down the connection.

Sessions are shared across connections, serialized per session by a
lock, and dropped once terminal or after ``idle_timeout`` seconds
without a step.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import sys
import threading
import time

from agl.env import Environment, Session, SessionConfig, SessionTerminalError
from agl.graph import TargetInstance
from agl.rewards import RewardConfig, score_record
from agl.tools import ToolConfig

logger = logging.getLogger(__name__)

DEFAULT_IDLE_TIMEOUT = 300.0


class EngineService:
    """Protocol handler: JSON line in, JSON line out.  Thread-safe."""

    def __init__(
        self,
        env: Environment,
        reward_base: RewardConfig | None = None,
        default_stage: int = 1,
        idle_timeout: float = DEFAULT_IDLE_TIMEOUT,
        session_defaults: dict | None = None,
    ):
        self.env = env
        self.reward_base = reward_base
        self.default_stage = default_stage
        self.idle_timeout = idle_timeout
        self.session_defaults = dict(session_defaults or {})
        self.started_at = time.monotonic()
        self._sessions: dict[str, tuple[Session, threading.Lock]] = {}
        self._last_seen: dict[str, float] = {}
        self._table_lock = threading.Lock()

    def handle_line(self, line: str) -> str:
        try:
            reply = self._dispatch(line)
        except Exception as exc:  # never let one request kill the loop
            logger.exception("unhandled service error")
            reply = {"ok": False, "error": f"internal error: {exc}"}
        return json.dumps(reply, ensure_ascii=False)

    def _dispatch(self, line: str) -> dict:
        try:
            request = json.loads(line)
        except json.JSONDecodeError as exc:
            return {"ok": False, "error": f"parse error: {exc.msg}"}
        if not isinstance(request, dict):
            return {"ok": False, "error": "request must be a JSON object"}
        cmd = request.get("cmd")
        payload = request.get("payload") or {}
        if not isinstance(payload, dict):
            return {"ok": False, "error": "'payload' must be an object"}
        if cmd == "reset":
            return self._cmd_reset(payload)
        if cmd == "step":
            return self._cmd_step(request.get("session"), payload)
        if cmd == "score":
            return self._cmd_score(payload)
        if cmd == "stats":
            return self._cmd_stats()
        logger.debug("rejected unknown cmd %r", cmd)
        return {"ok": False, "error": "unknown cmd"}

    def _cmd_reset(self, payload: dict) -> dict:
        self._purge_idle()
        spec = payload.get("target")
        if not isinstance(spec, dict) or "u" not in spec:
            return {"ok": False, "error": "reset needs payload.target with at least 'u'"}
        merged = {**self.session_defaults, **payload}
        task = merged.get("task", "nc")
        try:
            u = int(spec["u"])
            v = int(spec.get("v", u))
            kind = spec.get("kind", "node" if u == v else "pair")
            target = TargetInstance(kind=kind, u=u, v=v, gold=spec.get("gold"))
            tools = None
            if "tools" in merged and merged["tools"] is not None:
                tools = ToolConfig(**merged["tools"])
            config = SessionConfig(
                task=task,
                stage=int(merged.get("stage", self.default_stage)),
                budget=int(merged.get("budget", SessionConfig.budget)),
                template=merged.get("template"),
                label_space=list(merged.get("label_space", [])),
                tools=tools,
                dataset_name=merged.get("dataset"),
            )
            session = self.env.create_session(config, target)
        except (ValueError, IndexError, TypeError) as exc:
            return {"ok": False, "error": str(exc)}
        with self._table_lock:
            self._sessions[session.id] = (session, threading.Lock())
            self._last_seen[session.id] = time.monotonic()
        return {"ok": True, "session": session.id, "observation": session.prompt}

    def _cmd_step(self, session_id, payload: dict) -> dict:
        if not session_id:
            return {"ok": False, "error": "step needs a session id"}
        text = payload.get("text")
        if not isinstance(text, str):
            return {"ok": False, "error": "step needs payload.text as a string"}
        with self._table_lock:
            entry = self._sessions.get(session_id)
            if entry is not None:
                self._last_seen[session_id] = time.monotonic()
        if entry is None:
            return {"ok": False, "error": f"unknown session {session_id!r}"}
        session, lock = entry
        with lock:
            try:
                outcome = self.env.step(session, text)
            except SessionTerminalError as exc:
                return {"ok": False, "error": str(exc)}
        obs: dict = {
            "text": outcome.observation,
            "terminal": outcome.terminal,
            "searches_used": outcome.searches_used,
            "answer": outcome.answer,
        }
        if outcome.terminal:
            obs["raw"] = session.raw
            self._drop(session_id)
        return {"ok": True, "session": session_id, "observation": obs}

    def _cmd_score(self, payload: dict) -> dict:
        if "items" in payload:
            items = payload["items"]
            if not isinstance(items, list):
                return {"ok": False, "error": "'items' must be a list"}
            results = []
            for i, record in enumerate(items):
                try:
                    results.append(score_record(record, self.default_stage, self.reward_base))
                except (ValueError, KeyError, TypeError) as exc:
                    return {"ok": False, "error": f"items[{i}]: {exc}"}
            return {"ok": True, "reward": {"items": results}}
        try:
            result = score_record(payload, self.default_stage, self.reward_base)
        except (ValueError, KeyError, TypeError) as exc:
            return {"ok": False, "error": str(exc)}
        return {"ok": True, "reward": result}

    def _cmd_stats(self) -> dict:
        with self._table_lock:
            active = len(self._sessions)
        return {
            "ok": True,
            "stats": {
                "graph_nodes": self.env.graph.node_count,
                "graph_edges": self.env.graph.edge_count,
                "embedding_dims": self.env.index.dims,
                "active_sessions": active,
                "uptime_s": round(time.monotonic() - self.started_at, 3),
            },
        }

    def _drop(self, session_id: str) -> None:
        with self._table_lock:
            self._sessions.pop(session_id, None)
            self._last_seen.pop(session_id, None)

    def _purge_idle(self) -> None:
        now = time.monotonic()
        with self._table_lock:
            stale = [
                sid for sid, seen in self._last_seen.items()
                if now - seen > self.idle_timeout
            ]
            for sid in stale:
                self._sessions.pop(sid, None)
                self._last_seen.pop(sid, None)
        if stale:
            logger.info("purged %d idle session(s)", len(stale))


class _LineHandler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        service: EngineService = self.server.service  # type: ignore[attr-defined]
        while True:
            try:
                line = self.rfile.readline()
            except (ConnectionError, socket.timeout):
                return
            if not line:
                return
            text = line.decode("utf-8", errors="replace").strip()
            if not text:
                continue
            reply = service.handle_line(text)
            try:
                self.wfile.write(reply.encode("utf-8") + b"\n")
                self.wfile.flush()
            except (ConnectionError, BrokenPipeError):
                return


class ServiceTCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], service: EngineService):
        super().__init__(address, _LineHandler)
        self.service = service


def serve_tcp(service: EngineService, host: str = "127.0.0.1", port: int = 0) -> ServiceTCPServer:
    """Bind and return the server; the caller decides how to run it."""
    return ServiceTCPServer((host, port), service)


def serve_stdio(service: EngineService, stdin=None, stdout=None) -> None:
    """Blocking request loop over standard streams."""
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        stdout.write(service.handle_line(line) + "\n")
        stdout.flush()
