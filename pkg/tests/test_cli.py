from __future__ import annotations

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from agl import __version__
from agl.cli import main
from agl.curriculum import nc_difficulty_scores
from agl.graph import load_graph

from conftest import random_embeddings, write_dataset

WHEEL_EDGES = (
    [(0, i) for i in range(1, 7)]
    + [(i, i % 6 + 1) for i in range(1, 7)]
    + [(1, 7), (2, 8), (3, 9), (4, 10)]
)
TEXTS = [f"marker{i} node text {i}" for i in range(12)]
LABELS = ["alpha", "alpha", "beta", "alpha", "beta", "alpha", "beta",
          "alpha", "beta", "alpha", None, "alpha"]
SPLITS = ["train"] * 10 + ["test", "train"]
PAIRS = [(1, 2, 1), (3, 4, 0), (5, 6, 1), (7, 8, 0), (2, 9, 1)]


@pytest.fixture
def dataset(tmp_path):
    emb = random_embeddings(7, 12, dims=8)
    return write_dataset(tmp_path, (12, WHEEL_EDGES, TEXTS, LABELS, SPLITS), emb, PAIRS)


def data_flags(paths, pairs=False):
    flags = ["--graph", paths["nodes"], "--edges", paths["edges"],
             "--embeddings", paths["embeddings"]]
    if pairs:
        flags += ["--pairs", paths["pairs"]]
    return flags


def read_jsonl(path):
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_missing_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


# ---------------------------------------------------------------- index


def test_index_writes_cache(dataset, tmp_path, capsys):
    out = str(tmp_path / "cache.npz")
    rc = main(["index", "--graph", dataset["nodes"], "--edges", dataset["edges"],
               "--embeddings", dataset["embeddings"], "--out", out])
    assert rc == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["nodes"] == 12
    assert summary["converged"] is True
    assert summary["out"] == out
    data = np.load(out)
    assert set(data.files) >= {"scores", "damping", "iterations", "residual", "converged", "norms"}
    assert data["scores"].shape == (12,)
    assert data["scores"].sum() == pytest.approx(1.0, abs=1e-9)
    assert data["norms"].shape == (12,)


def test_index_without_embeddings_skips_norms(dataset, tmp_path):
    out = str(tmp_path / "cache.npz")
    rc = main(["index", "--graph", dataset["nodes"], "--edges", dataset["edges"], "--out", out])
    assert rc == 0
    assert "norms" not in np.load(out).files


def test_index_rejects_row_mismatch(dataset, tmp_path, capsys):
    from agl.retrieval import write_embeddings

    bad = str(tmp_path / "bad_emb.bin")
    write_embeddings(bad, random_embeddings(1, 5, dims=8))
    rc = main(["index", "--graph", dataset["nodes"], "--edges", dataset["edges"],
               "--embeddings", bad, "--out", str(tmp_path / "c.npz")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_index_rejects_bad_graph(dataset, tmp_path, capsys):
    broken = tmp_path / "broken_nodes.jsonl"
    broken.write_text('{"id": 0}\n', encoding="utf-8")
    rc = main(["index", "--graph", str(broken), "--edges", dataset["edges"],
               "--out", str(tmp_path / "c.npz")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


# ----------------------------------------------------------- curriculum


def test_curriculum_nc_plan(dataset, tmp_path):
    out = str(tmp_path / "plan.jsonl")
    rc = main(["curriculum", "--task", "nc", "--graph", dataset["nodes"],
               "--edges", dataset["edges"],
               "--quota-stage1", "2", "2", "2", "--quota-stage2", "1", "1", "1",
               "--seed", "3", "--out", out])
    assert rc == 0
    rows = read_jsonl(out)
    assert len(rows) == 9
    assert all(r["kind"] == "node" for r in rows)
    assert [r["stage"] for r in rows] == [1] * 6 + [2] * 3
    by_score = {s.instance.u: round(s.score, 9) for s in nc_difficulty_scores(load_graph(dataset["nodes"], dataset["edges"]))}
    for r in rows:
        assert r["score"] == by_score[r["u"]]
    # no instance drawn twice within a stage
    for stage in (1, 2):
        us = [r["u"] for r in rows if r["stage"] == stage]
        assert len(us) == len(set(us))


def test_curriculum_is_seed_deterministic(dataset, tmp_path):
    args = ["curriculum", "--task", "nc", "--graph", dataset["nodes"],
            "--edges", dataset["edges"],
            "--quota-stage1", "2", "2", "2", "--quota-stage2", "1", "1", "1"]
    a, b, c = (str(tmp_path / f"plan{i}.jsonl") for i in range(3))
    main(args + ["--seed", "5", "--out", a])
    main(args + ["--seed", "5", "--out", b])
    main(args + ["--seed", "6", "--out", c])
    assert open(a, "rb").read() == open(b, "rb").read()
    assert open(a, "rb").read() != open(c, "rb").read()


def test_curriculum_lp_plan(dataset, tmp_path):
    out = str(tmp_path / "plan.jsonl")
    rc = main(["curriculum", "--task", "lp", "--graph", dataset["nodes"],
               "--edges", dataset["edges"], "--embeddings", dataset["embeddings"],
               "--pairs", dataset["pairs"],
               "--quota-stage1", "1", "1", "1", "--quota-stage2", "0", "1", "0",
               "--out", out])
    assert rc == 0
    rows = read_jsonl(out)
    assert len(rows) == 4
    assert all(r["kind"] == "pair" for r in rows)
    assert all(r["v"] != r["u"] for r in rows)


def test_curriculum_quota_too_large(dataset, tmp_path, capsys):
    rc = main(["curriculum", "--task", "nc", "--graph", dataset["nodes"],
               "--edges", dataset["edges"],
               "--quota-stage1", "500", "500", "500",
               "--quota-stage2", "1", "1", "1"])
    assert rc == 1
    assert "exceeds" in capsys.readouterr().err


# -------------------------------------------------------------- rollout


def rollout_args(dataset, out, **kw):
    args = ["rollout", *data_flags(dataset), "--out", out]
    for key, value in kw.items():
        args += [f"--{key.replace('_', '-')}", str(value)]
    return args


def test_rollout_writes_trajectories(dataset, tmp_path):
    out = str(tmp_path / "rollouts.jsonl")
    rc = main(rollout_args(dataset, out, count=5, budget=4, seed=1))
    assert rc == 0
    rows = read_jsonl(out)
    assert len(rows) == 5
    for i, row in enumerate(rows):
        assert row["index"] == i
        assert row["target"]["kind"] == "node"
        assert row["task"] == "nc" and row["stage"] == 1
        assert row["search_count"] == 4  # all-tools policy uses the full budget
        assert row["answer"] == row["gold"]
        assert row["response"].endswith("</answer>")


def test_rollout_stop_after_policy(dataset, tmp_path):
    out = str(tmp_path / "rollouts.jsonl")
    rc = main(rollout_args(dataset, out, count=4, budget=7, policy="stop-after-3"))
    assert rc == 0
    assert all(r["search_count"] == 3 for r in read_jsonl(out))


def test_rollout_answer_only_policy(dataset, tmp_path):
    out = str(tmp_path / "rollouts.jsonl")
    rc = main(rollout_args(dataset, out, count=3, policy="answer-only"))
    assert rc == 0
    assert all(r["search_count"] == 0 for r in read_jsonl(out))


def test_rollout_is_byte_reproducible(dataset, tmp_path):
    a, b = str(tmp_path / "a.jsonl"), str(tmp_path / "b.jsonl")
    main(rollout_args(dataset, a, count=6, seed=9, policy="fuzz"))
    main(rollout_args(dataset, b, count=6, seed=9, policy="fuzz"))
    assert open(a, "rb").read() == open(b, "rb").read()


def test_rollout_lp_task(dataset, tmp_path):
    out = str(tmp_path / "lp.jsonl")
    rc = main(["rollout", *data_flags(dataset, pairs=True), "--task", "lp",
               "--count", "3", "--out", out])
    assert rc == 0
    rows = read_jsonl(out)
    assert all(r["target"]["kind"] == "pair" for r in rows)
    assert all(r["gold"] in ("yes", "no") for r in rows)


def test_rollout_lp_without_pairs_errors(dataset, tmp_path, capsys):
    rc = main(["rollout", *data_flags(dataset), "--task", "lp",
               "--count", "1", "--out", str(tmp_path / "x.jsonl")])
    assert rc == 1
    assert "pairs" in capsys.readouterr().err


def test_rollout_uses_salience_cache(dataset, tmp_path):
    cache = str(tmp_path / "cache.npz")
    main(["index", "--graph", dataset["nodes"], "--edges", dataset["edges"], "--out", cache])
    a, b = str(tmp_path / "a.jsonl"), str(tmp_path / "b.jsonl")
    main(rollout_args(dataset, a, count=4, seed=2))
    main(rollout_args(dataset, b, count=4, seed=2) + ["--cache", cache])
    assert open(a, "rb").read() == open(b, "rb").read()


def test_rollout_rejects_stale_cache(dataset, tmp_path, capsys):
    cache = str(tmp_path / "cache.npz")
    np.savez(cache, scores=np.full(5, 0.2), damping=0.85, iterations=1,
             residual=0.0, converged=True)
    rc = main(rollout_args(dataset, str(tmp_path / "x.jsonl"), count=1) + ["--cache", cache])
    assert rc == 1
    assert "salience cache" in capsys.readouterr().err


def test_rollout_tool_config_overrides(dataset, tmp_path):
    from agl.protocol import parse_trajectory

    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"tools": {"top_k_one_hop": 2}}), encoding="utf-8")
    out = str(tmp_path / "r.jsonl")
    rc = main(rollout_args(dataset, out, count=1, seed=0) + ["--config", str(cfg)])
    assert rc == 0
    trajectory = parse_trajectory(read_jsonl(out)[0]["response"])
    hop_obs = [r.observation for r in trajectory.rounds
               if r.action is not None and r.action.tool == "one_hop"]
    assert hop_obs
    assert all("(2) " in obs and "(3) " not in obs for obs in hop_obs)


def test_rollout_rejects_unknown_tool_key(dataset, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"tools": {"top_k_noop": 2}}), encoding="utf-8")
    rc = main(rollout_args(dataset, str(tmp_path / "r.jsonl"), count=1) + ["--config", str(cfg)])
    assert rc == 1
    assert "unknown tool config keys" in capsys.readouterr().err


# ---------------------------------------------------------------- score


def test_score_file(dataset, tmp_path):
    records = [
        {"response": "<answer>alpha</answer>", "gold": "alpha", "stage": 1},
        {"response": "<answer>beta</answer>", "gold": "alpha", "stage": 1},
        {"response": "no tags at all", "gold": "alpha", "stage": 1},
    ]
    src = tmp_path / "records.jsonl"
    src.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    out = str(tmp_path / "scores.jsonl")
    rc = main(["score", str(src), "--out", out])
    assert rc == 0
    rows = read_jsonl(out)
    assert len(rows) == 4
    assert [r["total"] for r in rows[:3]] == [1.1, -0.4, -1.4]
    assert rows[3] == {"aggregate": {"count": 3, "accuracy": round(1 / 3, 9), "mean_search": 0.0}}


def test_score_reads_stage_from_lines(tmp_path):
    src = tmp_path / "records.jsonl"
    src.write_text(json.dumps({"response": "<answer>x</answer>", "gold": "x", "stage": 2}) + "\n",
                   encoding="utf-8")
    out = str(tmp_path / "scores.jsonl")
    assert main(["score", str(src), "--out", out]) == 0
    row = read_jsonl(out)[0]
    assert row["terms"]["depth"] == 0.5  # only stage 2 pays the depth term


def test_score_stage_flag_fills_missing(tmp_path):
    src = tmp_path / "records.jsonl"
    src.write_text(json.dumps({"response": "<answer>x</answer>", "gold": "x"}) + "\n",
                   encoding="utf-8")
    out = str(tmp_path / "scores.jsonl")
    assert main(["score", str(src), "--stage", "2", "--out", out]) == 0
    assert read_jsonl(out)[0]["terms"]["depth"] == 0.5


def test_score_bad_line_reports_location(tmp_path, capsys):
    src = tmp_path / "records.jsonl"
    src.write_text('{"response": "x", "gold": "g", "stage": 1}\n{"response": "x"}\n',
                   encoding="utf-8")
    rc = main(["score", str(src)])
    assert rc == 1
    assert f"{src}:2:" in capsys.readouterr().err


def test_score_reward_overrides(tmp_path):
    src = tmp_path / "records.jsonl"
    src.write_text(json.dumps({"response": "<answer>x</answer>", "gold": "x", "stage": 1}) + "\n",
                   encoding="utf-8")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"rewards": {"acc_match": 2.5}}), encoding="utf-8")
    out = str(tmp_path / "scores.jsonl")
    assert main(["score", str(src), "--config", str(cfg), "--out", out]) == 0
    # acc lifted from 1.5 to 2.5; shape -0.5 and tag bonus +0.1 unchanged
    assert read_jsonl(out)[0]["total"] == 2.1


def test_rollout_then_score_pipeline(dataset, tmp_path):
    traj = str(tmp_path / "traj.jsonl")
    main(rollout_args(dataset, traj, count=8, budget=4, seed=4))
    out = str(tmp_path / "scores.jsonl")
    assert main(["score", traj, "--out", out]) == 0
    rows = read_jsonl(out)
    aggregate = rows[-1]["aggregate"]
    assert aggregate["count"] == 8
    assert aggregate["accuracy"] == 1.0  # scripted policy always answers gold
    assert aggregate["mean_search"] == 4.0
    for row in rows[:-1]:
        assert row["terms"]["acc"] == 1.5
        assert row["search_count"] == 4


# ---------------------------------------------------------------- serve


def test_serve_stdio_subprocess(dataset):
    requests = [
        json.dumps({"cmd": "stats"}),
        json.dumps({"cmd": "reset", "payload": {"target": {"u": 1, "gold": "alpha"}}}),
        json.dumps({"cmd": "nope"}),
    ]
    proc = subprocess.run(
        [sys.executable, "-m", "agl.cli", "serve", *data_flags(dataset), "--stdio"],
        input="\n".join(requests) + "\n",
        capture_output=True, text=True, timeout=120,
    )
    assert proc.returncode == 0, proc.stderr
    replies = [json.loads(line) for line in proc.stdout.splitlines()]
    assert len(replies) == 3
    assert replies[0]["ok"] and replies[0]["stats"]["graph_nodes"] == 12
    assert replies[1]["ok"] and "<|im_start|>system" in replies[1]["observation"]
    assert replies[2] == {"ok": False, "error": "unknown cmd"}


def test_console_script_version():
    proc = subprocess.run(["agl", "--version"], capture_output=True, text=True, timeout=60)
    assert proc.returncode == 0
    assert __version__ in proc.stdout


def test_log_level_env_var(dataset, tmp_path):
    texts = list(TEXTS)
    texts[5] = ""
    paths = write_dataset(tmp_path, (12, WHEEL_EDGES, texts, LABELS, SPLITS),
                          random_embeddings(7, 12, dims=8), prefix="quiet")
    cmd = [sys.executable, "-m", "agl.cli", "index", "--graph", paths["nodes"],
           "--edges", paths["edges"], "--out", str(tmp_path / "c.npz")]
    default = subprocess.run(cmd, capture_output=True, text=True, timeout=120,
                             env={**os.environ, "AGL_LOG": "WARNING"})
    assert "empty text" in default.stderr
    quiet = subprocess.run(cmd, capture_output=True, text=True, timeout=120,
                           env={**os.environ, "AGL_LOG": "ERROR"})
    assert quiet.returncode == 0
    assert "empty text" not in quiet.stderr
