"""Command-line entry points: index, curriculum, rollout, score, serve.

Shared conventions: ``--graph``/``--edges`` name the node and edge
files, ``--embeddings`` the binary embedding file, ``--config`` a JSON
file of reward/tool overrides.  ``AGL_LOG`` sets the log level.
Deterministic flags (``--seed``) make file outputs byte-reproducible.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from agl import __version__
from agl.curriculum import STAGE_QUOTAS, lp_difficulty_scores, nc_difficulty_scores, stratify
from agl.env import Environment, SessionConfig
from agl.graph import Graph, GraphFormatError, TargetInstance, load_graph
from agl.policies import POLICY_NAMES, make_policy
from agl.retrieval import (
    EmbeddingIndex,
    HashedBagOfWordsEncoder,
    SalienceScores,
    compute_pagerank,
    load_pair_pool,
    read_embeddings,
)
from agl.rewards import RewardConfig, score_record
from agl.service import EngineService, serve_stdio, serve_tcp
from agl.tools import ToolConfig

logger = logging.getLogger("agl")


def _setup_logging() -> None:
    level = os.environ.get("AGL_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return cfg


def _tool_config(task: str, overrides: dict) -> ToolConfig:
    cfg = ToolConfig.for_task(task)
    tool_over = overrides.get("tools", {})
    unknown = set(tool_over) - set(ToolConfig.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown tool config keys: {sorted(unknown)}")
    for key, value in tool_over.items():
        setattr(cfg, key, value)
    return cfg


def _reward_config(stage: int, overrides: dict) -> RewardConfig:
    return RewardConfig.for_stage(stage).with_overrides(overrides.get("rewards", {}))


def _load_assets(args, task: str, overrides: dict):
    """Graph + embeddings + salience (+ pool) as one bundle."""
    graph = load_graph(args.graph, args.edges)
    matrix = read_embeddings(args.embeddings)
    if matrix.shape[0] != graph.node_count:
        raise ValueError(
            f"{args.embeddings}: {matrix.shape[0]} rows for a graph of {graph.node_count} nodes"
        )
    index = EmbeddingIndex(matrix)
    cache = getattr(args, "cache", None)
    if cache and os.path.exists(cache):
        data = np.load(cache)
        salience = SalienceScores(
            scores=data["scores"],
            damping=float(data["damping"]),
            iterations_used=int(data["iterations"]),
            residual=float(data["residual"]),
            converged=bool(data["converged"]),
        )
        if len(salience.scores) != graph.node_count:
            raise ValueError(f"{cache}: salience cache does not match the graph")
    else:
        salience = compute_pagerank(graph)
    pool = None
    if getattr(args, "pairs", None):
        pool = load_pair_pool(args.pairs, index, graph)
    encoder = HashedBagOfWordsEncoder(index.dims)
    env = Environment(graph, index, encoder, salience, pool)
    return graph, index, salience, env


def _add_data_flags(p: argparse.ArgumentParser, pairs: bool = True) -> None:
    p.add_argument("--graph", required=True, help="node file (JSON lines)")
    p.add_argument("--edges", required=True, help="edge list file")
    p.add_argument("--embeddings", required=True, help="binary embedding file")
    if pairs:
        p.add_argument("--pairs", help="pair pool file (JSON lines), needed for lp")
    p.add_argument("--cache", help="salience cache written by 'index'")
    p.add_argument("--config", help="JSON file with 'rewards'/'tools' overrides")


def cmd_index(args) -> int:
    graph = load_graph(args.graph, args.edges)
    norms = None
    if args.embeddings:
        matrix = read_embeddings(args.embeddings)
        if matrix.shape[0] != graph.node_count:
            raise ValueError(
                f"{args.embeddings}: {matrix.shape[0]} rows for a graph of {graph.node_count} nodes"
            )
        norms = EmbeddingIndex(matrix).norms
    salience = compute_pagerank(graph, damping=args.damping)
    out = {
        "scores": salience.scores,
        "damping": salience.damping,
        "iterations": salience.iterations_used,
        "residual": salience.residual,
        "converged": salience.converged,
    }
    if norms is not None:
        out["norms"] = norms
    np.savez(args.out, **out)
    print(
        json.dumps(
            {
                "nodes": graph.node_count,
                "edges": graph.edge_count,
                "self_loops_dropped": graph.self_loops_dropped,
                "pagerank_iterations": salience.iterations_used,
                "converged": salience.converged,
                "out": args.out,
            }
        )
    )
    return 0


def cmd_curriculum(args) -> int:
    graph = load_graph(args.graph, args.edges)
    if args.task == "nc":
        scores = nc_difficulty_scores(graph)
    else:
        matrix = read_embeddings(args.embeddings)
        index = EmbeddingIndex(matrix)
        pool = load_pair_pool(args.pairs, index, graph)
        scores = lp_difficulty_scores(pool, index)
    quotas = (tuple(args.quota_stage1), tuple(args.quota_stage2))
    plan = stratify(scores, quotas, seed=args.seed)
    sink = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for stage_entries in plan.stages:
            for e in stage_entries:
                sink.write(
                    json.dumps(
                        {
                            "u": e.instance.u,
                            "v": e.instance.v,
                            "kind": e.instance.kind,
                            "score": round(e.score, 9),
                            "stratum": e.stratum,
                            "stage": e.stage,
                            "order": e.order,
                        }
                    )
                    + "\n"
                )
    finally:
        if sink is not sys.stdout:
            sink.close()
    return 0


def _iter_targets(graph: Graph, task: str, pool, count: int, seed: int):
    """Deterministic rollout targets: training instances, seed-shuffled."""
    import random

    rng = random.Random(seed)
    if task == "nc":
        ids = [
            v for v in range(graph.node_count)
            if graph.splits[v] == "train" and graph.labels[v] is not None
        ]
        if not ids:
            raise ValueError("no labeled training nodes to roll out on")
        picks = [ids[rng.randrange(len(ids))] for _ in range(count)]
        return [TargetInstance.node(v, gold=graph.labels[v]) for v in picks]
    if pool is None or len(pool) == 0:
        raise ValueError("lp rollouts need --pairs")
    picks = [pool.entries[rng.randrange(len(pool))] for _ in range(count)]
    return [
        TargetInstance.pair(e.u, e.v, gold="yes" if e.label else "no") for e in picks
    ]


def cmd_rollout(args) -> int:
    overrides = _load_config(args.config)
    graph, index, salience, env = _load_assets(args, args.task, overrides)
    tools = _tool_config(args.task, overrides)
    label_space = sorted({l for l in graph.labels if l is not None})
    targets = _iter_targets(graph, args.task, env.pool, args.count, args.seed)
    sink = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for i, target in enumerate(targets):
            config = SessionConfig(
                task=args.task,
                stage=args.stage,
                budget=args.budget,
                template=args.template,
                label_space=label_space if args.task == "nc" else ["yes", "no"],
                tools=tools,
            )
            session = env.create_session(config, target)
            answer = target.gold if target.gold is not None else (label_space or ["yes"])[0]
            policy = make_policy(args.policy, answer, seed=args.seed + i)
            trajectory, searches = env.run_rollout(session, policy)
            sink.write(
                json.dumps(
                    {
                        "index": i,
                        "target": {"kind": target.kind, "u": target.u, "v": target.v},
                        "task": args.task,
                        "stage": args.stage,
                        "gold": target.gold,
                        "response": trajectory.raw,
                        "answer": trajectory.answer,
                        "search_count": searches,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
    finally:
        if sink is not sys.stdout:
            sink.close()
    return 0


def cmd_score(args) -> int:
    overrides = _load_config(args.config)
    base = RewardConfig.for_stage(args.stage or 1).with_overrides(overrides.get("rewards", {}))
    results = []
    with open(args.file, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                results.append((record, score_record(record, args.stage, base)))
            except (ValueError, KeyError, TypeError) as exc:
                print(f"{args.file}:{lineno}: {exc}", file=sys.stderr)
                return 1
    sink = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        matches = 0
        searches = 0
        for record, result in results:
            sink.write(json.dumps(result) + "\n")
            matches += 1 if result["terms"]["acc"] == base.acc_match else 0
            searches += result["search_count"]
        n = len(results)
        aggregate = {
            "aggregate": {
                "count": n,
                "accuracy": round(matches / n, 9) if n else 0.0,
                "mean_search": round(searches / n, 9) if n else 0.0,
            }
        }
        sink.write(json.dumps(aggregate) + "\n")
    finally:
        if sink is not sys.stdout:
            sink.close()
    return 0


def cmd_serve(args) -> int:
    overrides = _load_config(args.config)
    graph, index, salience, env = _load_assets(args, "nc", overrides)
    reward_base = _reward_config(1, overrides)
    defaults: dict = {}
    if overrides.get("tools"):
        defaults["tools"] = overrides["tools"]
    service = EngineService(
        env,
        reward_base=reward_base,
        idle_timeout=args.idle_timeout,
        session_defaults=defaults,
    )
    if args.stdio:
        logger.info("serving over standard streams")
        serve_stdio(service)
        return 0
    server = serve_tcp(service, host=args.host, port=args.port)
    host, port = server.server_address[:2]
    print(f"AGL service listening on {host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        server.server_close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agl", description=__doc__)
    parser.add_argument("--version", action="version", version=f"agl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="validate a graph and cache salience + norms")
    p.add_argument("--graph", required=True)
    p.add_argument("--edges", required=True)
    p.add_argument("--embeddings", help="optional: also cache embedding norms")
    p.add_argument("--damping", type=float, default=0.85)
    p.add_argument("--out", required=True, help="output .npz cache")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("curriculum", help="emit a staged difficulty plan")
    p.add_argument("--task", choices=("nc", "lp"), required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--edges", required=True)
    p.add_argument("--embeddings", help="needed for lp")
    p.add_argument("--pairs", help="pair pool file, needed for lp")
    p.add_argument("--quota-stage1", type=int, nargs=3, default=list(STAGE_QUOTAS[0]),
                   metavar=("EASY", "MEDIUM", "HARD"))
    p.add_argument("--quota-stage2", type=int, nargs=3, default=list(STAGE_QUOTAS[1]),
                   metavar=("EASY", "MEDIUM", "HARD"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output JSON-lines plan (default stdout)")
    p.set_defaults(func=cmd_curriculum)

    p = sub.add_parser("rollout", help="run scripted-policy rollouts")
    _add_data_flags(p)
    p.add_argument("--task", choices=("nc", "lp"), default="nc")
    p.add_argument("--stage", type=int, choices=(1, 2), default=1)
    p.add_argument("--budget", type=int, default=4)
    p.add_argument("--policy", choices=POLICY_NAMES, default="all-tools")
    p.add_argument("--template", help="prompt template id (default per task)")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output JSON-lines trajectories (default stdout)")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("score", help="batch-score a trajectory file")
    p.add_argument("file", help="JSON-lines with 'response', 'gold', optional 'stage'")
    p.add_argument("--stage", type=int, choices=(1, 2), help="stage for lines without one")
    p.add_argument("--config", help="JSON file with 'rewards' overrides")
    p.add_argument("--out", help="per-line results file (default stdout)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("serve", help="serve sessions and scoring over NDJSON")
    _add_data_flags(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7461, help="0 picks an ephemeral port")
    p.add_argument("--stdio", action="store_true", help="serve stdin/stdout instead of TCP")
    p.add_argument("--idle-timeout", type=float, default=300.0)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (GraphFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
