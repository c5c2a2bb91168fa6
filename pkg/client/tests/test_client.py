from __future__ import annotations

import json
import socket
import subprocess
import sys
import threading
import time

import pytest

from agl_client import (
    ClientError,
    EnvClient,
    ServiceError,
    TransportError,
    TrajectoryWriter,
    run_episode,
)

from conftest import serve_argv

TOOL_TEXT = "<think>scan <|begin_of_query|>1-hop:evidence<|end_of_query|>"
ANSWER_TEXT = "enough</think><answer>alpha</answer>"

CANONICAL_41 = (
    "<think>plan <|begin_of_query|>1-hop:topic<|end_of_query|>"
    "<|begin_of_documents|>\n(1) evidence text\n<|end_of_documents|>\nnote one "
    "<|begin_of_query|>2-hop:topic<|end_of_query|>"
    "<|begin_of_documents|>\n(1) evidence text\n<|end_of_documents|>\nnote two "
    "<|begin_of_query|>pagerank:hubs<|end_of_query|>"
    "<|begin_of_documents|>\n(1) evidence text\n<|end_of_documents|>\nnote three "
    "<|begin_of_query|>similar:texts<|end_of_query|>"
    "<|begin_of_documents|>\n(1) evidence text\n<|end_of_documents|>\nwrap up</think>\n"
    "<answer>cs.LG</answer>"
)


def fresh_session(engine, u: int, stage: int = 1, budget: int = 4):
    from agl.env import SessionConfig
    from agl.graph import TargetInstance

    return engine.create_session(
        SessionConfig(task="nc", stage=stage, budget=budget),
        TargetInstance.node(u, gold="alpha"),
    )


# ------------------------------------------------------------------ reset


def test_reset_returns_prompt_with_search_pools(client):
    sid, prompt = client.reset({"u": 4, "gold": "alpha"})
    assert sid
    assert prompt
    assert "GRAPH SEARCH POOLS" in prompt
    assert client.sessions[sid].prompt == prompt


def test_reset_prompt_matches_in_process(client, engine):
    _, prompt = client.reset({"u": 3, "gold": "alpha"})
    assert prompt == fresh_session(engine, 3).prompt


def test_service_error_is_surfaced_verbatim(client):
    with pytest.raises(ServiceError) as exc:
        client.reset({"u": 99, "gold": "alpha"})
    assert str(exc.value)  # nonempty server message, passed through untouched


def test_unreachable_endpoint_raises_transport_error():
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    dead_port = probe.getsockname()[1]
    probe.close()
    started = time.monotonic()
    with pytest.raises(TransportError):
        EnvClient("127.0.0.1", dead_port, timeout=2.0)
    assert time.monotonic() - started < 10.0


# ------------------------------------------------------------------- step


def test_stage2_observation_contains_retrospection_trigger(client):
    sid, _ = client.reset({"u": 1, "gold": "alpha"}, stage=2)
    result = client.step(sid, TOOL_TEXT)
    assert "Let me first carefully review" in result.text
    assert result.searches_used == 1
    assert not result.terminal


def test_step_parity_executed_refused_and_terminal(client, engine):
    sid, _ = client.reset({"u": 2, "gold": "alpha"}, stage=1, budget=1)
    mirror = fresh_session(engine, 2, stage=1, budget=1)

    first = client.step(sid, TOOL_TEXT)
    expect = engine.step(mirror, TOOL_TEXT)
    assert first.text == expect.observation
    assert (first.terminal, first.searches_used) == (expect.terminal, expect.searches_used)

    over = "<think>again <|begin_of_query|>2-hop:evidence<|end_of_query|>"
    second = client.step(sid, over)
    expect = engine.step(mirror, over)
    assert second.text == expect.observation  # budget notice, byte-identical
    assert second.searches_used == expect.searches_used == 1

    final = client.step(sid, ANSWER_TEXT)
    expect = engine.step(mirror, ANSWER_TEXT)
    assert expect.terminal and final.terminal
    assert final.answer == expect.answer == "alpha"
    assert final.raw == mirror.raw


def test_terminal_session_handle_is_dropped(client):
    sid, _ = client.reset({"u": 5, "gold": "alpha"})
    result = client.step(sid, "<think>done" + ANSWER_TEXT)
    assert result.terminal
    assert sid not in client.sessions
    with pytest.raises(ClientError, match="unknown or closed"):
        client.step(sid, "more")


def test_session_mirror_tracks_searches(client):
    sid, _ = client.reset({"u": 6, "gold": "alpha"}, budget=4)
    client.step(sid, TOOL_TEXT)
    assert client.sessions[sid].searches_used == 1
    client.step(sid, "<|begin_of_query|>similar:more<|end_of_query|>")
    assert client.sessions[sid].searches_used == 2


# ---------------------------------------------------------------- scoring


def test_score_single_canonical(client):
    reward = client.score(CANONICAL_41, "cs.LG", stage=1)
    assert reward["total"] == 4.1


def test_score_batch_parity_bit_for_bit(client):
    from agl.rewards import RewardConfig, score_record

    items = [
        {"response": CANONICAL_41, "gold": "cs.LG", "stage": 1},
        {"response": "<answer>alpha</answer>", "gold": "alpha", "stage": 1},
        {"response": "<answer>alpha</answer>", "gold": "alpha", "stage": 2},
        {"response": "no tags", "gold": "x", "stage": 1},
    ]
    got = client.score_batch([dict(item) for item in items])
    # the server was started with stage-1 defaults and no overrides
    want = [score_record(dict(item), 1, RewardConfig.for_stage(1)) for item in items]
    assert json.dumps(got, sort_keys=True) == json.dumps(want, sort_keys=True)


def test_score_batch_empty(client):
    assert client.score_batch([]) == []


def test_score_batch_mixed_stages_and_order(client):
    rewards = client.score_batch([
        ("<answer>x</answer>", "x", 1),
        ("<answer>x</answer>", "x", 2),
    ])
    assert [r["total"] for r in rewards] == [1.1, 1.6]


def test_score_batch_error_is_service_error(client):
    with pytest.raises(ServiceError, match=r"items\[1\]"):
        client.score_batch([
            {"response": "<answer>x</answer>", "gold": "x", "stage": 1},
            {"response": "missing gold"},
        ])


# ------------------------------------------------------------------ misc


def test_stats(client):
    stats = client.stats()
    assert stats["graph_nodes"] == 12
    assert stats["embedding_dims"] == 8


def test_reconnect_never_reuses_dead_ids(client):
    sid, _ = client.reset({"u": 1, "gold": "alpha"})
    client.reconnect()
    assert client.sessions == {}
    with pytest.raises(ClientError, match="unknown or closed"):
        client.step(sid, TOOL_TEXT)
    sid2, prompt = client.reset({"u": 1, "gold": "alpha"})
    assert prompt


def test_shared_client_serializes_interleaved_sessions(client, engine):
    expected = {}
    for u in range(8):
        mirror = fresh_session(engine, u)
        expected[u] = engine.step(mirror, TOOL_TEXT).observation
    failures = []

    def worker(u: int):
        try:
            sid, _ = client.reset({"u": u, "gold": "alpha"})
            result = client.step(sid, TOOL_TEXT)
            if result.text != expected[u]:
                failures.append(f"target {u}: foreign observation")
        except Exception as exc:
            failures.append(f"target {u}: {exc}")

    threads = [threading.Thread(target=worker, args=(u,)) for u in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not failures


def test_from_streams_over_stdio(dataset):
    proc = subprocess.Popen(
        serve_argv(dataset, "--stdio"),
        stdin=subprocess.PIPE, stdout=subprocess.PIPE, stderr=subprocess.DEVNULL,
    )
    try:
        c = EnvClient.from_streams(proc.stdout, proc.stdin)
        assert c.score("<answer>y</answer>", "y", stage=1)["total"] == 1.1
        sid, prompt = c.reset({"u": 1, "gold": "alpha"})
        assert "GRAPH SEARCH POOLS" in prompt
        assert c.step(sid, TOOL_TEXT).searches_used == 1
        with pytest.raises(ClientError, match="cannot reconnect"):
            c.reconnect()
        c.close()
    finally:
        proc.terminate()
        proc.wait(timeout=10)


def test_run_episode_and_trajectory_logging(client, tmp_path):
    calls = []

    def policy(context: str) -> str:
        calls.append(context)
        return TOOL_TEXT if len(calls) == 1 else ANSWER_TEXT

    episode = run_episode(client, policy, {"u": 4, "gold": "alpha"}, task="nc", stage=1)
    assert episode.answer == "alpha"
    assert episode.search_count == 1
    assert episode.response.endswith("</answer>")
    assert len(episode.steps) == 2
    # the second policy call saw the first observation in its context
    assert "<|begin_of_documents|>" in calls[1]

    path = str(tmp_path / "log.jsonl")
    with TrajectoryWriter(path) as writer:
        record = writer.write_episode(episode, gold="alpha", stage=1)
    assert record["search_count"] == 1

    scored = subprocess.run(
        [sys.executable, "-m", "agl.cli", "score", path],
        capture_output=True, text=True, timeout=120,
    )
    assert scored.returncode == 0, scored.stderr
    lines = [json.loads(l) for l in scored.stdout.splitlines()]
    assert lines[-1]["aggregate"] == {"count": 1, "accuracy": 1.0, "mean_search": 1.0}


def test_episode_that_never_answers_hits_the_step_cap(client):
    def policy(_context: str) -> str:
        return TOOL_TEXT  # searches forever, never commits to an answer

    with pytest.raises(ClientError, match="did not terminate"):
        run_episode(client, policy, {"u": 1, "gold": "alpha"},
                    budget=10, max_steps=3)
