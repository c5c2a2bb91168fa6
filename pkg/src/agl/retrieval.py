"""Embedding index, score fusion, exact top-k retrieval and salience.

Ranking convention used everywhere: cosine similarity descending, ties
broken by ascending node id (or ascending pool position for pair
entries).  Zero-norm vectors have cosine 0 against everything, so
ranking never divides by zero and never produces NaN.  Retrieval is
exhaustive and exact; no approximate-NN structures are involved.

Embedding files are little-endian binary: magic ``AGLE``, u32 version
(currently 1), u32 row count, u32 dims, then float32 row-major data.
Pair pools are JSON lines ``{"u": int, "v": int, "label": 0|1}``.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from agl.graph import Graph

logger = logging.getLogger(__name__)

EMBEDDING_MAGIC = b"AGLE"
EMBEDDING_VERSION = 1


class EmbeddingIndex:
    """Dense per-node embeddings with cached norms.

    The matrix is float32 at rest; similarity math runs in float64 so
    results do not depend on accumulation quirks of the storage dtype.
    """

    def __init__(self, matrix: np.ndarray):
        matrix = np.asarray(matrix)
        if matrix.ndim != 2 or matrix.shape[1] == 0:
            raise ValueError(f"embedding matrix must be 2-D with dims > 0, got shape {matrix.shape}")
        if not np.all(np.isfinite(matrix)):
            raise ValueError("embedding matrix contains non-finite values")
        self._matrix = np.ascontiguousarray(matrix, dtype=np.float32)
        self._f64 = self._matrix.astype(np.float64)
        self._norms = np.linalg.norm(self._f64, axis=1)

    @property
    def node_count(self) -> int:
        return self._matrix.shape[0]

    @property
    def dims(self) -> int:
        return self._matrix.shape[1]

    @property
    def norms(self) -> np.ndarray:
        return self._norms

    def vector(self, node_id: int) -> np.ndarray:
        """Float64 embedding of one node."""
        return self._f64[node_id]

    def mean_vector(self, u: int, v: int) -> np.ndarray:
        """Midpoint of two node embeddings; the embedding of a pair."""
        return 0.5 * (self._f64[u] + self._f64[v])

    def cosine_to(self, vec: np.ndarray) -> np.ndarray:
        """Cosine of every node against ``vec`` (zero-norm rows score 0)."""
        return cosine_against_rows(self._f64, self._norms, vec)


def cosine_against_rows(rows: np.ndarray, row_norms: np.ndarray, vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    vnorm = float(np.linalg.norm(vec))
    if vnorm == 0.0 or rows.shape[0] == 0:
        return np.zeros(rows.shape[0], dtype=np.float64)
    dots = rows @ vec
    out = np.zeros(rows.shape[0], dtype=np.float64)
    nz = row_norms > 0.0
    out[nz] = dots[nz] / (row_norms[nz] * vnorm)
    return out


def fusion_embedding(
    h_query: np.ndarray, h_u: np.ndarray, h_v: np.ndarray, lambda_r: float
) -> np.ndarray:
    """Blend a query embedding with a target embedding.

    Returns ``lambda_r * h_query + (1 - lambda_r) * h_x`` where ``h_x``
    is the midpoint of the target endpoints (for node targets pass the
    node's embedding twice).  ``lambda_r`` must lie in [0, 1].
    """
    if not (0.0 <= lambda_r <= 1.0):
        raise ValueError(f"lambda_r must be in [0, 1], got {lambda_r}")
    h_query = np.asarray(h_query, dtype=np.float64)
    h_u = np.asarray(h_u, dtype=np.float64)
    h_v = np.asarray(h_v, dtype=np.float64)
    if not (h_query.shape == h_u.shape == h_v.shape):
        raise ValueError(
            f"dimension mismatch: query {h_query.shape}, u {h_u.shape}, v {h_v.shape}"
        )
    h_x = 0.5 * (h_u + h_v)
    return lambda_r * h_query + (1.0 - lambda_r) * h_x


def _ranked(ids: np.ndarray, scores: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Order (id, score) pairs by score desc, id asc; keep the first k."""
    if k <= 0 or len(ids) == 0:
        return []
    order = np.lexsort((ids, -scores))[:k]
    return [(int(ids[i]), float(scores[i])) for i in order]


def rank_by_score(
    candidates, fusion: np.ndarray, index: EmbeddingIndex, k: int
) -> list[tuple[int, float]]:
    """Exact top-k of a candidate set against a fusion vector.

    ``candidates`` is any iterable of node ids.  Returns at most ``k``
    ``(node_id, score)`` pairs, score descending, id ascending on ties.
    """
    ids = np.fromiter(sorted(int(c) for c in candidates), dtype=np.int64, count=-1)
    if len(ids) == 0:
        return []
    rows = index._f64[ids]
    norms = index._norms[ids]
    scores = cosine_against_rows(rows, norms, fusion)
    return _ranked(ids, scores, k)


def dense_top_k(
    query_vec: np.ndarray, index: EmbeddingIndex, k: int, exclusions: set[int] | None = None
) -> list[tuple[int, float]]:
    """Global exact top-k over every node, minus ``exclusions``."""
    exclusions = exclusions or set()
    scores = index.cosine_to(query_vec)
    ids = np.arange(index.node_count, dtype=np.int64)
    if exclusions:
        keep = np.fromiter(
            (i not in exclusions for i in range(index.node_count)), dtype=bool, count=index.node_count
        )
        ids, scores = ids[keep], scores[keep]
    return _ranked(ids, scores, k)


@dataclass(frozen=True)
class PairPoolEntry:
    u: int
    v: int
    label: int


class PairPool:
    """Candidate node pairs with known edge status.

    Entries keep their file order; pair-mode retrieval breaks score
    ties by that position.  Each entry's vector is the midpoint of its
    endpoint embeddings.
    """

    def __init__(self, entries: list[PairPoolEntry], index: EmbeddingIndex, graph: Graph | None = None):
        seen: set[tuple[int, int]] = set()
        for i, e in enumerate(entries):
            if e.u == e.v:
                raise ValueError(f"pool entry {i}: pair endpoints must differ, got ({e.u}, {e.v})")
            if not (0 <= e.u < index.node_count and 0 <= e.v < index.node_count):
                raise ValueError(f"pool entry {i}: pair ({e.u}, {e.v}) outside the index")
            if e.label not in (0, 1):
                raise ValueError(f"pool entry {i}: label must be 0 or 1, got {e.label!r}")
            key = (min(e.u, e.v), max(e.u, e.v))
            if key in seen:
                raise ValueError(f"pool entry {i}: duplicate pair ({e.u}, {e.v})")
            seen.add(key)
            if graph is not None:
                for z in (e.u, e.v):
                    if graph.splits[z] != "train":
                        raise ValueError(
                            f"pool entry {i}: node {z} is split {graph.splits[z]!r}; "
                            "pools must be drawn from the training split"
                        )
        self.entries = list(entries)
        if entries:
            self._vectors = np.stack([index.mean_vector(e.u, e.v) for e in entries])
            self._norms = np.linalg.norm(self._vectors, axis=1)
        else:
            self._vectors = np.zeros((0, index.dims), dtype=np.float64)
            self._norms = np.zeros(0, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.entries)

    def top_k_by_vector(
        self, vec: np.ndarray, k: int, exclude_pair: tuple[int, int] | None = None
    ) -> list[tuple[int, float]]:
        """Top-k entry positions by cosine against ``vec``.

        ``exclude_pair`` drops entries equal to it as an unordered pair.
        Returns (entry_position, score) with ties broken by position.
        """
        scores = cosine_against_rows(self._vectors, self._norms, vec)
        pos = np.arange(len(self.entries), dtype=np.int64)
        if exclude_pair is not None:
            key = (min(exclude_pair), max(exclude_pair))
            keep = np.fromiter(
                ((min(e.u, e.v), max(e.u, e.v)) != key for e in self.entries),
                dtype=bool,
                count=len(self.entries),
            )
            pos, scores = pos[keep], scores[keep]
        return _ranked(pos, scores, k)


def pair_dense_top_k(
    target_pair: tuple[int, int], pool: PairPool, index: EmbeddingIndex, k: int
) -> list[tuple[int, float]]:
    """Pool entries most similar to a target pair, excluding the pair itself."""
    u, v = target_pair
    return pool.top_k_by_vector(index.mean_vector(u, v), k, exclude_pair=(u, v))


@dataclass
class SalienceScores:
    """Global PageRank scores plus convergence diagnostics."""

    scores: np.ndarray
    damping: float
    iterations_used: int
    residual: float
    converged: bool


def compute_pagerank(
    g: Graph, damping: float = 0.85, tol: float = 1e-10, max_iter: int = 200
) -> SalienceScores:
    """Power-iteration PageRank with uniform teleport.

    Mass from isolated (dangling) nodes is redistributed uniformly each
    step, so scores always sum to 1.  Stops when the L1 step residual
    drops below ``tol``; hitting ``max_iter`` first is reported via
    ``converged=False`` (with a warning) rather than an exception.
    """
    if not (0.0 < damping < 1.0):
        raise ValueError(f"damping must be in (0, 1), got {damping}")
    n = g.node_count
    if n == 0:
        return SalienceScores(np.zeros(0), damping, 0, 0.0, True)

    adj = sparse.csr_matrix(
        (np.ones(len(g.indices), dtype=np.float64), g.indices, g.indptr), shape=(n, n)
    )
    deg = np.diff(g.indptr).astype(np.float64)
    dangling = deg == 0.0
    inv_deg = np.zeros(n, dtype=np.float64)
    inv_deg[~dangling] = 1.0 / deg[~dangling]

    x = np.full(n, 1.0 / n, dtype=np.float64)
    teleport = (1.0 - damping) / n
    residual = 0.0
    iterations = 0
    converged = False
    for iterations in range(1, max_iter + 1):
        spread = adj @ (x * inv_deg)
        loose = float(x[dangling].sum())
        x_next = teleport + damping * (spread + loose / n)
        residual = float(np.abs(x_next - x).sum())
        x = x_next
        if residual < tol:
            converged = True
            break
    if not converged:
        logger.warning(
            "pagerank stopped at max_iter=%d with residual %.3e (tol %.3e)",
            max_iter, residual, tol,
        )
    return SalienceScores(x, damping, iterations, residual, converged)


def salience_top_k(
    scores: SalienceScores,
    k: int,
    exclusions: set | None = None,
    mode: str = "node",
    pool: PairPool | None = None,
) -> list[tuple[int, float]] | list[tuple[tuple[int, int], float]]:
    """Most salient nodes, or pool pairs by mean endpoint salience.

    Node mode: ``exclusions`` is a set of node ids; returns (id, score).
    Pair mode: ``exclusions`` is a set of unordered pair tuples; returns
    ((u, v), mean_score) in pool order on ties.
    """
    exclusions = exclusions or set()
    s = scores.scores
    if mode == "node":
        ids = np.arange(len(s), dtype=np.int64)
        if exclusions:
            keep = np.fromiter((i not in exclusions for i in range(len(s))), dtype=bool, count=len(s))
            ids = ids[keep]
        return _ranked(ids, s[ids], k)
    if mode == "pair":
        if pool is None:
            raise ValueError("pair mode requires a pair pool")
        excl = {(min(p), max(p)) for p in exclusions}
        pos: list[int] = []
        mean: list[float] = []
        for i, e in enumerate(pool.entries):
            if (min(e.u, e.v), max(e.u, e.v)) in excl:
                continue
            pos.append(i)
            mean.append(0.5 * (float(s[e.u]) + float(s[e.v])))
        ranked = _ranked(np.asarray(pos, dtype=np.int64), np.asarray(mean, dtype=np.float64), k)
        return [((pool.entries[p].u, pool.entries[p].v), sc) for p, sc in ranked]
    raise ValueError(f"mode must be 'node' or 'pair', got {mode!r}")


class TextEncoder:
    """Anything that turns text into a fixed-width vector."""

    dims: int

    def encode(self, text: str) -> np.ndarray:
        raise NotImplementedError


class HashedBagOfWordsEncoder(TextEncoder):
    """Deterministic test-grade encoder: hashed token counts.

    Tokens are lowercased whitespace splits; each token increments the
    bucket chosen by a salt-free blake2b digest, so the same text maps
    to the same vector in every process.  Empty text is the zero vector.
    """

    def __init__(self, dims: int):
        if dims <= 0:
            raise ValueError(f"dims must be positive, got {dims}")
        self.dims = dims

    def encode(self, text: str) -> np.ndarray:
        import hashlib

        vec = np.zeros(self.dims, dtype=np.float64)
        for token in text.lower().split():
            digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
            vec[int.from_bytes(digest, "little") % self.dims] += 1.0
        return vec


def write_embeddings(path: str, matrix: np.ndarray) -> None:
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise ValueError(f"embedding matrix must be 2-D, got shape {matrix.shape}")
    rows, dims = matrix.shape
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<III", EMBEDDING_VERSION, rows, dims))
        fh.write(matrix.tobytes(order="C"))


def read_embeddings(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16 or head[:4] != EMBEDDING_MAGIC:
            raise ValueError(f"{path}: not an embedding file (bad magic)")
        version, rows, dims = struct.unpack("<III", head[4:16])
        if version != EMBEDDING_VERSION:
            raise ValueError(f"{path}: unsupported embedding version {version}")
        payload = fh.read(rows * dims * 4)
        if len(payload) != rows * dims * 4:
            raise ValueError(f"{path}: truncated embedding payload")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, dims).copy()


def load_pair_pool(path: str, index: EmbeddingIndex, graph: Graph | None = None) -> PairPool:
    entries: list[PairPoolEntry] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            try:
                entries.append(PairPoolEntry(int(rec["u"]), int(rec["v"]), int(rec["label"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: expected {{'u', 'v', 'label'}}") from exc
    return PairPool(entries, index, graph)


def save_pair_pool(path: str, pool: PairPool) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in pool.entries:
            fh.write(json.dumps({"u": e.u, "v": e.v, "label": e.label}) + "\n")
