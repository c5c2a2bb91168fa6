"""Synchronous blocking client for the agl environment service.

One request is in flight at a time per client; trainers that want
parallelism create one client per worker. Session state is mirrored
locally so a handle that terminated (or was dropped by a reconnect) is
never sent back over the wire.
"""

from __future__ import annotations

import json
import socket
import subprocess
import threading
import time
from dataclasses import dataclass, field


class ClientError(Exception):
    """Base class for everything this module raises."""


class TransportError(ClientError):
    """The service could not be reached, timed out, or spoke garbage."""


class ServiceError(ClientError):
    """The service answered ``ok: false``; the message is verbatim."""


@dataclass
class SessionHandle:
    """Local mirror of one live server session."""

    id: str
    task: str
    stage: int
    prompt: str
    searches_used: int = 0
    terminal: bool = False
    answer: str | None = None


@dataclass
class StepResult:
    """One wire step: observation text plus terminal bookkeeping."""

    text: str
    terminal: bool
    searches_used: int
    answer: str | None
    raw: str | None = None


@dataclass
class EpisodeResult:
    """A full reset-to-terminal episode driven by :func:`run_episode`."""

    session: str
    prompt: str
    response: str
    answer: str | None
    search_count: int
    steps: list[StepResult] = field(default_factory=list)


class EnvClient:
    """Blocking NDJSON client over TCP or an explicit stream pair."""

    def __init__(self, host: str = "127.0.0.1", port: int = 7461, timeout: float = 30.0):
        self.host = host
        self.port = port
        self.timeout = timeout
        self.sessions: dict[str, SessionHandle] = {}
        self._lock = threading.Lock()
        self._sock: socket.socket | None = None
        self._rfile = None
        self._wfile = None
        self._connect()

    @classmethod
    def from_streams(cls, rfile, wfile, timeout: float = 30.0) -> "EnvClient":
        """Wrap binary file objects (for example a subprocess's pipes)."""
        client = cls.__new__(cls)
        client.host = None
        client.port = None
        client.timeout = timeout
        client.sessions = {}
        client._lock = threading.Lock()
        client._sock = None
        client._rfile = rfile
        client._wfile = wfile
        return client

    def _connect(self) -> None:
        try:
            self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        except OSError as exc:
            raise TransportError(f"cannot reach {self.host}:{self.port}: {exc}") from exc
        self._sock.settimeout(self.timeout)
        self._rfile = self._sock.makefile("rb")
        self._wfile = self._sock.makefile("wb")

    def _rpc(self, request: dict) -> dict:
        if self._wfile is None or self._rfile is None:
            raise ClientError("client is closed")
        line = json.dumps(request, ensure_ascii=False).encode("utf-8") + b"\n"
        with self._lock:
            try:
                self._wfile.write(line)
                self._wfile.flush()
                raw = self._rfile.readline()
            except OSError as exc:
                raise TransportError(f"transport failure: {exc}") from exc
        if not raw:
            raise TransportError("connection closed by service")
        try:
            reply = json.loads(raw)
        except ValueError as exc:
            raise TransportError(f"malformed reply: {raw[:120]!r}") from exc
        if not isinstance(reply, dict):
            raise TransportError(f"reply is not an object: {raw[:120]!r}")
        if not reply.get("ok"):
            raise ServiceError(str(reply.get("error", "unspecified service error")))
        return reply

    # ------------------------------------------------------------ session ops

    def reset(self, target: dict, task: str = "nc", stage: int = 1, **extra) -> tuple[str, str]:
        """Open a session; returns ``(session id, initial prompt)``.

        ``target`` is the wire shape: ``{"u": ..., "v": ..., "gold": ...}``.
        Extra keyword arguments (budget, template, label_space, tools)
        pass through to the service untouched.
        """
        payload = {"task": task, "stage": stage, "target": dict(target), **extra}
        reply = self._rpc({"cmd": "reset", "payload": payload})
        sid = reply["session"]
        prompt = reply["observation"]
        self.sessions[sid] = SessionHandle(id=sid, task=task, stage=stage, prompt=prompt)
        return sid, prompt

    def step(self, session_id: str, text: str) -> StepResult:
        """Advance one session by one model message."""
        handle = self.sessions.get(session_id)
        if handle is None:
            raise ClientError(f"unknown or closed session {session_id!r}")
        reply = self._rpc({"cmd": "step", "session": session_id, "payload": {"text": text}})
        obs = reply["observation"]
        result = StepResult(
            text=obs["text"],
            terminal=obs["terminal"],
            searches_used=obs["searches_used"],
            answer=obs.get("answer"),
            raw=obs.get("raw"),
        )
        handle.searches_used = result.searches_used
        if result.terminal:
            handle.terminal = True
            handle.answer = result.answer
            del self.sessions[session_id]  # a dead id must never go back out
        return result

    # ------------------------------------------------------------ scoring

    def score(self, response: str, gold: str, stage: int | None = None, **extra) -> dict:
        payload = {"response": response, "gold": gold, **extra}
        if stage is not None:
            payload["stage"] = stage
        return self._rpc({"cmd": "score", "payload": payload})["reward"]

    def score_batch(self, items: list[dict | tuple]) -> list[dict]:
        """Score many records in one round trip, order preserved.

        Items are either wire-shaped dicts or ``(response, gold, stage)``
        tuples.
        """
        if not items:
            return []
        records = []
        for item in items:
            if isinstance(item, dict):
                records.append(item)
            else:
                response, gold, stage = item
                records.append({"response": response, "gold": gold, "stage": stage})
        reply = self._rpc({"cmd": "score", "payload": {"items": records}})
        return reply["reward"]["items"]

    def stats(self) -> dict:
        return self._rpc({"cmd": "stats"})["stats"]

    # ------------------------------------------------------------ lifecycle

    def reconnect(self) -> None:
        """Drop the connection and every session mirror, then redial."""
        if self.host is None:
            raise ClientError("a stream-pair client cannot reconnect")
        self.close()
        self.sessions = {}
        self._connect()

    def close(self) -> None:
        for fh in (self._rfile, self._wfile):
            try:
                if fh is not None:
                    fh.close()
            except OSError:
                pass
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
        self._sock = self._rfile = self._wfile = None

    def __enter__(self) -> "EnvClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def run_episode(
    client: EnvClient,
    policy,
    target: dict,
    task: str = "nc",
    stage: int = 1,
    max_steps: int = 32,
    **extra,
) -> EpisodeResult:
    """Drive ``policy`` (a ``context -> text`` callable) to termination.

    The context mirrors what a trainer would feed its model: the prompt,
    then each sent message followed by the observation it earned. Server
    side truncation of text after a terminal construct is not mirrored,
    so policies should emit one construct at a time.
    """
    sid, prompt = client.reset(target, task=task, stage=stage, **extra)
    context = prompt
    steps: list[StepResult] = []
    for _ in range(max_steps):
        text = policy(context)
        result = client.step(sid, text)
        steps.append(result)
        if result.terminal:
            return EpisodeResult(
                session=sid,
                prompt=prompt,
                response=result.raw if result.raw is not None else "",
                answer=result.answer,
                search_count=result.searches_used,
                steps=steps,
            )
        context += text + result.text
    raise ClientError(f"episode did not terminate within {max_steps} steps")


class TrajectoryWriter:
    """Append score-ready JSON lines: response, gold, stage, extras."""

    def __init__(self, path: str):
        self._fh = open(path, "w", encoding="utf-8")

    def write(self, response: str, gold: str, stage: int, **extra) -> dict:
        record = {"response": response, "gold": gold, "stage": stage, **extra}
        self._fh.write(json.dumps(record, ensure_ascii=False) + "\n")
        return record

    def write_episode(self, episode: EpisodeResult, gold: str, stage: int, **extra) -> dict:
        return self.write(
            episode.response, gold, stage,
            answer=episode.answer, search_count=episode.search_count, **extra,
        )

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "TrajectoryWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class LocalServer:
    """Spawn a service subprocess and discover the port it bound.

    ``argv`` is the full server command; the constructor blocks until
    the process prints its ``listening on host:port`` line.
    """

    def __init__(self, argv: list[str], startup_timeout: float = 30.0):
        self.proc = subprocess.Popen(
            argv, stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, text=True
        )
        deadline = time.monotonic() + startup_timeout
        line = ""
        while time.monotonic() < deadline:
            line = self.proc.stdout.readline()
            if "listening on" in line:
                break
            if line == "" and self.proc.poll() is not None:
                raise TransportError(f"server exited with code {self.proc.returncode}")
        else:
            self.terminate()
            raise TransportError(f"server produced no listening line within {startup_timeout}s")
        address = line.rsplit(" ", 1)[-1].strip()
        host, port = address.rsplit(":", 1)
        self.host = host
        self.port = int(port)

    def terminate(self) -> None:
        if self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()

    def __enter__(self) -> "LocalServer":
        return self

    def __exit__(self, *exc) -> None:
        self.terminate()
