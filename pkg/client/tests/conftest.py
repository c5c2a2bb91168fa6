from __future__ import annotations

import json
import sys

import numpy as np
import pytest

from agl_client import EnvClient, LocalServer

# fixed toy dataset shared by the server subprocess and in-process parity checks
EDGES = (
    [(0, i) for i in range(1, 7)]
    + [(i, i % 6 + 1) for i in range(1, 7)]
    + [(1, 7), (2, 8), (3, 9), (4, 10)]
)
TEXTS = [f"marker{i} node text {i}" for i in range(12)]
LABELS = ["alpha", "alpha", "beta", "alpha", "beta", "alpha", "beta",
          "alpha", "beta", "alpha", None, "alpha"]
SPLITS = ["train"] * 10 + ["test", "train"]
PAIRS = [(1, 2, 1), (3, 4, 0), (5, 6, 1), (7, 8, 0), (2, 9, 1)]


def embedding_matrix() -> np.ndarray:
    return np.random.RandomState(7).standard_normal((12, 8)).astype(np.float32)


@pytest.fixture(scope="session")
def dataset(tmp_path_factory):
    from agl.retrieval import write_embeddings

    root = tmp_path_factory.mktemp("data")
    nodes = root / "nodes.jsonl"
    with open(nodes, "w", encoding="utf-8") as fh:
        for i in range(12):
            fh.write(json.dumps(
                {"id": i, "text": TEXTS[i], "label": LABELS[i], "split": SPLITS[i]}
            ) + "\n")
    edges = root / "edges.txt"
    with open(edges, "w", encoding="utf-8") as fh:
        for u, v in EDGES:
            fh.write(f"{u} {v}\n")
    pairs = root / "pairs.jsonl"
    with open(pairs, "w", encoding="utf-8") as fh:
        for u, v, label in PAIRS:
            fh.write(json.dumps({"u": u, "v": v, "label": label}) + "\n")
    emb = root / "emb.bin"
    write_embeddings(str(emb), embedding_matrix())
    return {"nodes": str(nodes), "edges": str(edges),
            "pairs": str(pairs), "embeddings": str(emb)}


def serve_argv(dataset, *extra: str) -> list[str]:
    return [sys.executable, "-m", "agl.cli", "serve",
            "--graph", dataset["nodes"], "--edges", dataset["edges"],
            "--embeddings", dataset["embeddings"], "--pairs", dataset["pairs"],
            *extra]


@pytest.fixture(scope="session")
def server(dataset):
    with LocalServer(serve_argv(dataset, "--port", "0")) as srv:
        yield srv


@pytest.fixture
def client(server):
    with EnvClient(server.host, server.port, timeout=30.0) as c:
        yield c


@pytest.fixture(scope="session")
def engine(dataset):
    """The same assets loaded in process, for parity expectations."""
    from agl.env import Environment
    from agl.graph import load_graph
    from agl.retrieval import (
        EmbeddingIndex,
        HashedBagOfWordsEncoder,
        compute_pagerank,
        load_pair_pool,
        read_embeddings,
    )

    graph = load_graph(dataset["nodes"], dataset["edges"])
    index = EmbeddingIndex(read_embeddings(dataset["embeddings"]))
    pool = load_pair_pool(dataset["pairs"], index, graph)
    return Environment(graph, index, HashedBagOfWordsEncoder(index.dims),
                       compute_pagerank(graph), pool)
