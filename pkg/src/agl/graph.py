"""Immutable text-attributed graph backed by CSR adjacency.

On-disk formats:

* Node file: JSON lines, one object per node with keys ``id`` (int),
  ``text`` (str), ``label`` (str or null) and ``split`` (one of
  ``train``/``test``/``none``).  Ids must be dense, covering exactly
  ``0..n-1`` in any order.
* Edge file: whitespace-separated ``u v`` pairs, one per line.  Lines
  starting with ``#`` and blank lines are ignored.  The graph is
  undirected: each edge is symmetrized regardless of the direction it
  was written in.  Self-loops are dropped (counted, warned about once),
  duplicate edges collapse to one.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

VALID_SPLITS = ("train", "test", "none")


class GraphFormatError(ValueError):
    """A node or edge file violates the on-disk format."""


@dataclass(frozen=True)
class Graph:
    """Undirected graph with per-node text attributes.

    Adjacency is CSR: the neighbors of node ``z`` are
    ``indices[indptr[z]:indptr[z + 1]]``, sorted ascending.  Instances
    are frozen after construction; all engine state lives elsewhere.
    """

    node_count: int
    indptr: np.ndarray
    indices: np.ndarray
    texts: list[str]
    labels: list[str | None]
    splits: list[str]
    self_loops_dropped: int = field(default=0, compare=False)
    duplicate_edges_dropped: int = field(default=0, compare=False)

    @classmethod
    def from_edge_list(
        cls,
        node_count: int,
        edges: list[tuple[int, int]],
        texts: list[str] | None = None,
        labels: list[str | None] | None = None,
        splits: list[str] | None = None,
    ) -> "Graph":
        """Build a graph from an in-memory edge list (symmetrizing it)."""
        n = node_count
        texts = [""] * n if texts is None else list(texts)
        labels = [None] * n if labels is None else list(labels)
        splits = ["none"] * n if splits is None else list(splits)
        if not (len(texts) == len(labels) == len(splits) == n):
            raise GraphFormatError(
                f"attribute lists must have exactly {n} entries "
                f"(texts={len(texts)}, labels={len(labels)}, splits={len(splits)})"
            )
        for s in splits:
            if s not in VALID_SPLITS:
                raise GraphFormatError(f"invalid split {s!r}; expected one of {VALID_SPLITS}")

        self_loops = 0
        us: list[int] = []
        vs: list[int] = []
        for u, v in edges:
            if not (0 <= u < n and 0 <= v < n):
                raise GraphFormatError(f"edge ({u}, {v}) references a node outside 0..{n - 1}")
            if u == v:
                self_loops += 1
                continue
            us.extend((u, v))
            vs.extend((v, u))

        dupes = 0
        if us:
            # Encode (u, v) as u * n + v so np.unique both dedupes and
            # yields the row-major (u, then v) order CSR needs.
            keys = np.asarray(us, dtype=np.int64) * n + np.asarray(vs, dtype=np.int64)
            uniq = np.unique(keys)
            dupes = (len(keys) - len(uniq)) // 2
            src = uniq // n
            dst = uniq % n
            indptr = np.zeros(n + 1, dtype=np.int64)
            np.add.at(indptr, src + 1, 1)
            indptr = np.cumsum(indptr)
            indices = dst.astype(np.int64)
        else:
            indptr = np.zeros(n + 1, dtype=np.int64)
            indices = np.zeros(0, dtype=np.int64)

        if self_loops:
            logger.warning("dropped %d self-loop(s) while building graph", self_loops)
        empty_texts = sum(1 for t in texts if not t)
        if empty_texts:
            logger.warning("%d node(s) have empty text", empty_texts)

        return cls(
            node_count=n,
            indptr=indptr,
            indices=indices,
            texts=texts,
            labels=labels,
            splits=splits,
            self_loops_dropped=self_loops,
            duplicate_edges_dropped=dupes,
        )

    @property
    def edge_count(self) -> int:
        """Number of undirected edges."""
        return len(self.indices) // 2

    def neighbor_array(self, z: int) -> np.ndarray:
        """Sorted neighbor ids of ``z`` as an array view (no copy)."""
        self._check_node(z)
        return self.indices[self.indptr[z]:self.indptr[z + 1]]

    def neighbors(self, z: int) -> set[int]:
        """1-hop neighborhood of ``z``.  Never contains ``z`` itself."""
        return set(int(x) for x in self.neighbor_array(z))

    def two_hop(self, z: int) -> set[int]:
        """Nodes at distance exactly 2 from ``z``.

        Excludes ``z`` and its direct neighbors, so the result is
        disjoint from ``neighbors(z)``.
        """
        first = self.neighbors(z)
        out: set[int] = set()
        for w in first:
            out.update(int(x) for x in self.neighbor_array(w))
        out -= first
        out.discard(z)
        return out

    def degree(self, z: int) -> int:
        self._check_node(z)
        return int(self.indptr[z + 1] - self.indptr[z])

    def _check_node(self, z: int) -> None:
        if not (0 <= z < self.node_count):
            raise IndexError(f"node id {z} outside 0..{self.node_count - 1}")


@dataclass(frozen=True)
class TargetInstance:
    """A prediction target: a single node or an unordered node pair.

    For node targets ``v == u`` by convention.  ``gold`` is the reference
    answer (a category label, or ``yes``/``no`` for pair targets) and may
    be absent for unlabeled rollouts.
    """

    kind: str
    u: int
    v: int
    gold: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("node", "pair"):
            raise ValueError(f"kind must be 'node' or 'pair', got {self.kind!r}")
        if self.kind == "node" and self.u != self.v:
            raise ValueError("node targets require u == v")
        if self.kind == "pair" and self.u == self.v:
            raise ValueError("pair targets require two distinct nodes")

    @classmethod
    def node(cls, u: int, gold: str | None = None) -> "TargetInstance":
        return cls(kind="node", u=u, v=u, gold=gold)

    @classmethod
    def pair(cls, u: int, v: int, gold: str | None = None) -> "TargetInstance":
        return cls(kind="pair", u=u, v=v, gold=gold)

    def validate(self, node_count: int) -> None:
        """Raise IndexError when an endpoint is outside the graph."""
        for z in (self.u, self.v):
            if not (0 <= z < node_count):
                raise IndexError(f"target references node {z} outside 0..{node_count - 1}")


def load_graph(nodes_path: str, edges_path: str) -> Graph:
    """Load a graph from a node JSON-lines file and an edge list file.

    Raises GraphFormatError naming the file and line for malformed
    lines, duplicate or non-dense node ids, and edges whose endpoints
    do not exist.
    """
    texts_by_id: dict[int, str] = {}
    labels_by_id: dict[int, str | None] = {}
    splits_by_id: dict[int, str] = {}

    with open(nodes_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise GraphFormatError(f"{nodes_path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict) or "id" not in rec or "text" not in rec:
                raise GraphFormatError(f"{nodes_path}:{lineno}: node objects need 'id' and 'text'")
            nid = rec["id"]
            if not isinstance(nid, int) or isinstance(nid, bool) or nid < 0:
                raise GraphFormatError(f"{nodes_path}:{lineno}: node id must be a non-negative int")
            if nid in texts_by_id:
                raise GraphFormatError(f"{nodes_path}:{lineno}: duplicate node id {nid}")
            text = rec["text"]
            if not isinstance(text, str):
                raise GraphFormatError(f"{nodes_path}:{lineno}: 'text' must be a string")
            label = rec.get("label")
            if label is not None and not isinstance(label, str):
                raise GraphFormatError(f"{nodes_path}:{lineno}: 'label' must be a string or null")
            split = rec.get("split", "none")
            if split not in VALID_SPLITS:
                raise GraphFormatError(
                    f"{nodes_path}:{lineno}: split {split!r} not one of {VALID_SPLITS}"
                )
            texts_by_id[nid] = text
            labels_by_id[nid] = label
            splits_by_id[nid] = split

    n = len(texts_by_id)
    missing = [i for i in range(n) if i not in texts_by_id]
    if missing:
        raise GraphFormatError(
            f"{nodes_path}: node ids must be dense 0..{n - 1}; missing {missing[:5]}"
        )

    edges: list[tuple[int, int]] = []
    with open(edges_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split()
            if len(parts) != 2:
                raise GraphFormatError(
                    f"{edges_path}:{lineno}: expected 'u v', got {stripped!r}"
                )
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise GraphFormatError(
                    f"{edges_path}:{lineno}: endpoints must be integers, got {stripped!r}"
                ) from exc
            if not (0 <= u < n and 0 <= v < n):
                raise GraphFormatError(
                    f"{edges_path}:{lineno}: edge ({u}, {v}) references a node "
                    f"outside 0..{n - 1}"
                )
            edges.append((u, v))

    return Graph.from_edge_list(
        n,
        edges,
        texts=[texts_by_id[i] for i in range(n)],
        labels=[labels_by_id[i] for i in range(n)],
        splits=[splits_by_id[i] for i in range(n)],
    )
