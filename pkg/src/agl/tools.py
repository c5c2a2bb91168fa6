"""Graph-native search tools and evidence rendering.

Four tools share one retrieval skeleton: enumerate a candidate scope,
score candidates, keep the top slots.  The hop-constrained tools split
their budget between common and exclusive neighborhoods; the global
tools rank everything by salience or embedding similarity.

Wire names (the prefixes models write inside query tags):

====================  ==========
internal              wire
====================  ==========
one_hop               1-hop
two_hop               2-hop
salience              pagerank
dense                 similar
====================  ==========
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from agl.graph import Graph, TargetInstance
from agl.retrieval import (
    EmbeddingIndex,
    PairPool,
    SalienceScores,
    TextEncoder,
    dense_top_k,
    fusion_embedding,
    pair_dense_top_k,
    rank_by_score,
    salience_top_k,
)

TOOL_NAMES = ("one_hop", "two_hop", "salience", "dense")

WIRE_NAMES = {
    "one_hop": "1-hop",
    "two_hop": "2-hop",
    "salience": "pagerank",
    "dense": "similar",
}
WIRE_TO_TOOL = {w: t for t, w in WIRE_NAMES.items()}

#: Annotation constants carried on evidence items.
COMMON = "common"
EXCLUSIVE_U = "exclusive_u"
EXCLUSIVE_V = "exclusive_v"
GLOBAL = "global"
WITH_LABEL = "with_label"

LINKS_BOTH_SUFFIX = "This neighbour links both Node U and Node V."


@dataclass
class ToolConfig:
    """Per-tool result budgets plus the query/target fusion weight."""

    top_k_one_hop: int = 5
    top_k_two_hop: int = 5
    top_k_salience: int = 5
    top_k_dense: int = 5
    lambda_r: float = 0.5

    @classmethod
    def for_task(cls, task: str) -> "ToolConfig":
        """Defaults per task: link prediction trims the global pools."""
        if task == "nc":
            return cls()
        if task == "lp":
            return cls(top_k_salience=2, top_k_dense=3)
        raise ValueError(f"task must be 'nc' or 'lp', got {task!r}")

    def top_k(self, tool: str) -> int:
        return {
            "one_hop": self.top_k_one_hop,
            "two_hop": self.top_k_two_hop,
            "salience": self.top_k_salience,
            "dense": self.top_k_dense,
        }[tool]


@dataclass(frozen=True)
class EvidenceItem:
    """One retrieved unit: a node or a reference pair with its text."""

    ref: int | tuple[int, int]
    text: str
    annotation: str
    score: float = 0.0
    label: int | None = None


@dataclass
class Evidence:
    tool: str
    items: list[EvidenceItem] = field(default_factory=list)
    k_requested: int = 0


def quota_split(size_u: int, size_v: int, r: int) -> tuple[int, int]:
    """Split a remaining budget r across two exclusive candidate sets.

    The first side gets at least half the budget (rounded up), more if
    the second side cannot absorb its share; each side is capped by its
    size.  Guarantees k_u + k_v <= r, with equality whenever the two
    sets together can fill the budget.
    """
    if r < 0:
        raise ValueError(f"budget must be non-negative, got {r}")
    if size_u < 0 or size_v < 0:
        raise ValueError("candidate set sizes must be non-negative")
    k_u = min(size_u, max(math.ceil(r / 2), r - size_v))
    k_v = min(size_v, r - k_u)
    return k_u, k_v


def _fusion_for(
    index: EmbeddingIndex, enc: TextEncoder, target: TargetInstance, query: str, lambda_r: float
):
    return fusion_embedding(
        enc.encode(query), index.vector(target.u), index.vector(target.v), lambda_r
    )


def _scoped_search(
    g: Graph,
    index: EmbeddingIndex,
    enc: TextEncoder,
    target: TargetInstance,
    query: str,
    cfg: ToolConfig,
    tool: str,
) -> Evidence:
    """Shared skeleton of the hop-constrained tools.

    Scope sets always exclude the target endpoints.  Output keeps
    common items first, then the u-exclusive slots, then v-exclusive,
    each block ranked score-descending with id tie-breaks.
    """
    target.validate(g.node_count)
    scope = g.neighbors if tool == "one_hop" else g.two_hop
    u, v = target.u, target.v
    banned = {u, v}
    scope_u = scope(u) - banned
    scope_v = scope(v) - banned if v != u else scope_u
    common = scope_u & scope_v
    only_u = scope_u - common
    only_v = scope_v - common

    k = cfg.top_k(tool)
    fusion = _fusion_for(index, enc, target, query, cfg.lambda_r)
    items: list[EvidenceItem] = []
    for node_id, score in rank_by_score(common, fusion, index, k):
        items.append(EvidenceItem(node_id, g.texts[node_id], COMMON, score))
    budget = max(0, k - len(common))
    k_u, k_v = quota_split(len(only_u), len(only_v), budget)
    for node_id, score in rank_by_score(only_u, fusion, index, k_u):
        items.append(EvidenceItem(node_id, g.texts[node_id], EXCLUSIVE_U, score))
    for node_id, score in rank_by_score(only_v, fusion, index, k_v):
        items.append(EvidenceItem(node_id, g.texts[node_id], EXCLUSIVE_V, score))
    return Evidence(tool=tool, items=items, k_requested=k)


def one_hop_search(
    g: Graph,
    index: EmbeddingIndex,
    enc: TextEncoder,
    target: TargetInstance,
    query: str,
    cfg: ToolConfig,
) -> Evidence:
    """Direct neighbors of the target, common neighbors first."""
    return _scoped_search(g, index, enc, target, query, cfg, "one_hop")


def two_hop_search(
    g: Graph,
    index: EmbeddingIndex,
    enc: TextEncoder,
    target: TargetInstance,
    query: str,
    cfg: ToolConfig,
) -> Evidence:
    """Nodes exactly two hops out; never overlaps the 1-hop scope."""
    return _scoped_search(g, index, enc, target, query, cfg, "two_hop")


def _pair_text(g: Graph, u: int, v: int) -> str:
    return f"{g.texts[u]} | {g.texts[v]}"


def salience_search(
    g: Graph,
    scores: SalienceScores,
    target: TargetInstance,
    cfg: ToolConfig,
    pool: PairPool | None = None,
) -> Evidence:
    """Globally salient nodes, or salient reference pairs for pair targets."""
    target.validate(g.node_count)
    k = cfg.top_k("salience")
    if target.kind == "node":
        ranked = salience_top_k(scores, k, exclusions={target.u, target.v}, mode="node")
        items = [EvidenceItem(nid, g.texts[nid], GLOBAL, sc) for nid, sc in ranked]
    else:
        if pool is None:
            raise ValueError("salience search on a pair target requires a pair pool")
        ranked = salience_top_k(
            scores, k, exclusions={(target.u, target.v)}, mode="pair", pool=pool
        )
        by_pair = {(min(e.u, e.v), max(e.u, e.v)): e.label for e in pool.entries}
        items = [
            EvidenceItem(pair, _pair_text(g, *pair), WITH_LABEL, sc,
                         label=by_pair[(min(pair), max(pair))])
            for pair, sc in ranked
        ]
    return Evidence(tool="salience", items=items, k_requested=k)


def dense_search(
    g: Graph,
    index: EmbeddingIndex,
    enc: TextEncoder,
    target: TargetInstance,
    query: str,
    cfg: ToolConfig,
    pool: PairPool | None = None,
) -> Evidence:
    """Embedding-similarity retrieval over all nodes, or over a pair pool.

    Node mode ranks every non-target node against the fusion of the
    query text and the target embedding.  Pair mode ignores the query
    and matches the target pair's embedding against the pool.
    """
    target.validate(g.node_count)
    if index.node_count != g.node_count:
        raise ValueError(
            f"embedding rows ({index.node_count}) != graph nodes ({g.node_count})"
        )
    k = cfg.top_k("dense")
    if target.kind == "node":
        fusion = _fusion_for(index, enc, target, query, cfg.lambda_r)
        ranked = dense_top_k(fusion, index, k, exclusions={target.u, target.v})
        items = [EvidenceItem(nid, g.texts[nid], GLOBAL, sc) for nid, sc in ranked]
    else:
        if pool is None:
            raise ValueError("dense search on a pair target requires a pair pool")
        ranked = pair_dense_top_k((target.u, target.v), pool, index, k)
        items = [
            EvidenceItem(
                (pool.entries[pos].u, pool.entries[pos].v),
                _pair_text(g, pool.entries[pos].u, pool.entries[pos].v),
                WITH_LABEL,
                sc,
                label=pool.entries[pos].label,
            )
            for pos, sc in ranked
        ]
    return Evidence(tool="dense", items=items, k_requested=k)


def run_tool(
    tool: str,
    g: Graph,
    index: EmbeddingIndex,
    enc: TextEncoder,
    salience: SalienceScores,
    target: TargetInstance,
    query: str,
    cfg: ToolConfig,
    pool: PairPool | None = None,
) -> Evidence:
    """Dispatch by internal tool name."""
    if tool == "one_hop":
        return one_hop_search(g, index, enc, target, query, cfg)
    if tool == "two_hop":
        return two_hop_search(g, index, enc, target, query, cfg)
    if tool == "salience":
        return salience_search(g, salience, target, cfg, pool)
    if tool == "dense":
        return dense_search(g, index, enc, target, query, cfg, pool)
    raise ValueError(f"unknown tool {tool!r}")


def render_documents(e: Evidence, task: str) -> str:
    """Render evidence as the document block injected into rollouts.

    Byte-deterministic.  Items are numbered ``(1)``..; link-prediction
    rollouts additionally annotate where each item sits relative to the
    target pair, and reference pairs carry their stored edge status.
    """
    if task not in ("nc", "lp"):
        raise ValueError(f"task must be 'nc' or 'lp', got {task!r}")
    hop = "one_hop" if e.tool == "one_hop" else "two_hop"
    lines = ["<|begin_of_documents|>"]
    for i, item in enumerate(e.items, 1):
        body = item.text
        if task == "lp":
            if item.annotation == COMMON:
                body = f"[common {hop} neighbour] {item.text} {LINKS_BOTH_SUFFIX}"
            elif item.annotation == EXCLUSIVE_U:
                body = f"[{hop} neighbour of Node U] {item.text}"
            elif item.annotation == EXCLUSIVE_V:
                body = f"[{hop} neighbour of Node V] {item.text}"
            elif item.annotation == WITH_LABEL:
                status = "yes" if item.label else "no"
                body = f"[reference pair] {item.text} [edge status: {status}]"
        lines.append(f"({i}) {body}")
    lines.append("<|end_of_documents|>")
    return "\n".join(lines)
