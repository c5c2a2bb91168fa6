from __future__ import annotations

import json
import random

import numpy as np
import pytest

from agl.graph import Graph
from agl.retrieval import (
    EmbeddingIndex,
    HashedBagOfWordsEncoder,
    PairPool,
    PairPoolEntry,
    compute_pagerank,
)


def random_graph(rng: random.Random, max_nodes: int = 256) -> tuple[int, list[tuple[int, int]]]:
    """Random undirected edge list; sparse enough to have structure."""
    n = rng.randint(2, max_nodes)
    target_edges = rng.randint(0, min(3 * n, n * (n - 1) // 2))
    edges = []
    for _ in range(target_edges):
        u = rng.randrange(n)
        v = rng.randrange(n)
        edges.append((u, v))  # self-loops and duplicates exercised on purpose
    return n, edges


def build_graph(n: int, edges: list[tuple[int, int]], **attrs) -> Graph:
    return Graph.from_edge_list(n, edges, **attrs)


def random_embeddings(rng_seed: int, n: int, dims: int = 16) -> np.ndarray:
    rs = np.random.RandomState(rng_seed)
    return rs.standard_normal((n, dims)).astype(np.float32)


def write_dataset(tmp_path, graph_spec, embeddings=None, pairs=None, prefix="toy"):
    """Write node/edge/embedding/pool files; returns the paths."""
    n, edges, texts, labels, splits = graph_spec
    nodes_path = tmp_path / f"{prefix}_nodes.jsonl"
    with open(nodes_path, "w", encoding="utf-8") as fh:
        for i in range(n):
            fh.write(
                json.dumps(
                    {"id": i, "text": texts[i], "label": labels[i], "split": splits[i]}
                )
                + "\n"
            )
    edges_path = tmp_path / f"{prefix}_edges.txt"
    with open(edges_path, "w", encoding="utf-8") as fh:
        fh.write("# edge list\n")
        for u, v in edges:
            fh.write(f"{u} {v}\n")
    paths = {"nodes": str(nodes_path), "edges": str(edges_path)}
    if embeddings is not None:
        from agl.retrieval import write_embeddings

        emb_path = tmp_path / f"{prefix}_emb.bin"
        write_embeddings(str(emb_path), embeddings)
        paths["embeddings"] = str(emb_path)
    if pairs is not None:
        pool_path = tmp_path / f"{prefix}_pairs.jsonl"
        with open(pool_path, "w", encoding="utf-8") as fh:
            for u, v, label in pairs:
                fh.write(json.dumps({"u": u, "v": v, "label": label}) + "\n")
        paths["pairs"] = str(pool_path)
    return paths


@pytest.fixture
def toy_assets():
    """Small fixed graph with labels, embeddings, salience and a pool.

    12 nodes on a wheel-ish layout: node 0 is a hub joined to 1..6,
    nodes 1..6 form a cycle, 7..10 hang off the cycle, 11 is isolated.
    """
    edges = [(0, i) for i in range(1, 7)]
    edges += [(i, i % 6 + 1) for i in range(1, 7)]
    edges += [(1, 7), (2, 8), (3, 9), (4, 10)]
    texts = [f"marker{i} node text {i}" for i in range(12)]
    labels = ["alpha", "alpha", "beta", "alpha", "beta", "alpha", "beta",
              "alpha", "beta", "alpha", None, "alpha"]
    splits = ["train"] * 10 + ["test", "train"]
    g = build_graph(12, edges, texts=texts, labels=labels, splits=splits)
    emb = random_embeddings(7, 12, dims=8)
    index = EmbeddingIndex(emb)
    salience = compute_pagerank(g)
    pool = PairPool(
        [PairPoolEntry(u, v, label)
         for u, v, label in [(1, 2, 1), (3, 4, 0), (5, 6, 1), (7, 8, 0), (2, 9, 1)]],
        index,
    )
    encoder = HashedBagOfWordsEncoder(index.dims)
    return g, index, encoder, salience, pool
