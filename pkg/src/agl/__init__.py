"""Environment engine for agentic graph learning on text-attributed graphs."""

from agl.graph import Graph, GraphFormatError, TargetInstance, load_graph
from agl.retrieval import (
    EmbeddingIndex,
    HashedBagOfWordsEncoder,
    PairPool,
    SalienceScores,
    compute_pagerank,
)
from agl.tools import Evidence, ToolConfig, quota_split
from agl.protocol import Action, FormatReport, Round, Trajectory
from agl.rewards import RewardBreakdown, RewardConfig
from agl.env import Environment, Session, SessionConfig

__all__ = [
    "Action",
    "EmbeddingIndex",
    "Environment",
    "Evidence",
    "FormatReport",
    "Graph",
    "GraphFormatError",
    "HashedBagOfWordsEncoder",
    "PairPool",
    "RewardBreakdown",
    "RewardConfig",
    "Round",
    "SalienceScores",
    "Session",
    "SessionConfig",
    "TargetInstance",
    "ToolConfig",
    "Trajectory",
    "compute_pagerank",
    "load_graph",
    "quota_split",
]

__version__ = "0.1.0"
