"""Graph-conditioned difficulty scores and staged sampling plans.

Higher score = easier instance.  Node targets score by how consistently
their neighborhood shares their label (Wilson lower bound, so low-degree
nodes cannot fake confidence) plus a log-degree information bonus.
Pair targets score by how well embedding similarity already agrees with
the edge label.  Instances are ranked, cut into tertile strata, and
each training stage draws seeded quotas per stratum.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

import numpy as np

from agl.graph import Graph, TargetInstance
from agl.retrieval import EmbeddingIndex, PairPool

WILSON_Z = 1.96
DEGREE_ETA = 0.05

#: Per-stage default draw sizes (easy, medium, hard).
STAGE_QUOTAS = ((800, 500, 500), (200, 500, 500))

STRATUM_NAMES = ("easy", "medium", "hard")


def neighbor_label_consistency(g: Graph, labels: list[str | None], v: int) -> float:
    """Fraction of labeled neighbors sharing v's label.

    ``labels`` is the visible label list (hide test labels by passing
    None there).  Falls back to 0.5 when no neighbor is labeled, the
    uninformative prior.  ``v`` itself must be labeled.
    """
    if labels[v] is None:
        raise ValueError(f"node {v} has no label; consistency is undefined")
    labeled = [w for w in g.neighbor_array(v) if labels[w] is not None]
    if not labeled:
        return 0.5
    same = sum(1 for w in labeled if labels[w] == labels[v])
    return same / len(labeled)


def nc_difficulty(p_hat: float, d: int, z: float = WILSON_Z, eta: float = DEGREE_ETA) -> float:
    """Wilson lower bound of p_hat at pseudo-count d, plus eta*ln(1+d).

    d is the full degree of the node, not the labeled-neighbor count:
    sparse neighborhoods are penalized even when their few labels agree.
    d = 0 scores 0.
    """
    if not (0.0 <= p_hat <= 1.0):
        raise ValueError(f"p_hat must be in [0, 1], got {p_hat}")
    if d < 0:
        raise ValueError(f"degree must be non-negative, got {d}")
    if d == 0:
        return 0.0
    z2 = z * z
    center = p_hat + z2 / (2 * d)
    margin = z * math.sqrt(p_hat * (1 - p_hat) / d + z2 / (4 * d * d))
    wilson = (center - margin) / (1 + z2 / d)
    return wilson + eta * math.log1p(d)


def lp_difficulty(sim: float, y: int) -> float:
    """Agreement between cosine similarity and edge label.

    sim is clamped to [0, 1]; y = 1 scores sim, y = 0 scores 1 - sim.
    """
    if y not in (0, 1):
        raise ValueError(f"edge label must be 0 or 1, got {y!r}")
    sim = min(1.0, max(0.0, sim))
    return y * sim + (1 - y) * (1.0 - sim)


@dataclass(frozen=True)
class DifficultyScore:
    instance: TargetInstance
    score: float
    components: dict = field(default_factory=dict, compare=False)


def nc_difficulty_scores(
    g: Graph, z: float = WILSON_Z, eta: float = DEGREE_ETA
) -> list[DifficultyScore]:
    """Score every labeled training node; only training labels are visible."""
    visible: list[str | None] = [
        g.labels[i] if g.splits[i] == "train" else None for i in range(g.node_count)
    ]
    out: list[DifficultyScore] = []
    for v in range(g.node_count):
        if g.splits[v] != "train" or g.labels[v] is None:
            continue
        p_hat = neighbor_label_consistency(g, visible, v)
        d = g.degree(v)
        out.append(
            DifficultyScore(
                TargetInstance.node(v, gold=g.labels[v]),
                nc_difficulty(p_hat, d, z, eta),
                components={"p_hat": p_hat, "degree": d},
            )
        )
    return out


def lp_difficulty_scores(pool: PairPool, index: EmbeddingIndex) -> list[DifficultyScore]:
    """Score every pool pair by similarity/label agreement."""
    out: list[DifficultyScore] = []
    for e in pool.entries:
        hu, hv = index.vector(e.u), index.vector(e.v)
        nu, nv = float(np.linalg.norm(hu)), float(np.linalg.norm(hv))
        sim = float(hu @ hv / (nu * nv)) if nu > 0 and nv > 0 else 0.0
        sim = min(1.0, max(0.0, sim))
        out.append(
            DifficultyScore(
                TargetInstance.pair(e.u, e.v, gold="yes" if e.label else "no"),
                lp_difficulty(sim, e.label),
                components={"sim": sim, "label": e.label},
            )
        )
    return out


@dataclass(frozen=True)
class PlanEntry:
    instance: TargetInstance
    score: float
    stratum: str
    stage: int
    order: int


@dataclass
class CurriculumPlan:
    """Tertile strata plus the per-stage ordered draws."""

    strata: dict[str, list[DifficultyScore]]
    stage_quotas: tuple
    seed: int
    stages: list[list[PlanEntry]]


def _tertile_bounds(n: int) -> tuple[int, int]:
    # Remainders pad the earlier (easier) strata, matching a 3-way
    # array split.
    base, rem = divmod(n, 3)
    first = base + (1 if rem >= 1 else 0)
    second = base + (1 if rem >= 2 else 0)
    return first, first + second


def stratify(
    scores: list[DifficultyScore],
    quotas: tuple = STAGE_QUOTAS,
    seed: int = 0,
) -> CurriculumPlan:
    """Rank scores, cut tertiles, and draw per-stage seeded samples.

    Ranking is score-descending with input order breaking ties, so a
    given score list always produces the same plan for the same seed.
    Each stage draws its (easy, medium, hard) quota without replacement
    and emits easy first, then medium, then hard; inside a stratum the
    draw is ordered easiest first.  Quotas larger than a stratum raise.
    """
    ranked = sorted(enumerate(scores), key=lambda t: (-t[1].score, t[0]))
    ordered = [s for _, s in ranked]
    cut1, cut2 = _tertile_bounds(len(ordered))
    strata = {
        "easy": ordered[:cut1],
        "medium": ordered[cut1:cut2],
        "hard": ordered[cut2:],
    }

    stages: list[list[PlanEntry]] = []
    for stage_idx, stage_quota in enumerate(quotas, start=1):
        if len(stage_quota) != 3:
            raise ValueError(f"stage {stage_idx}: quota must have 3 entries, got {stage_quota!r}")
        entries: list[PlanEntry] = []
        order = 0
        for name, want in zip(STRATUM_NAMES, stage_quota):
            members = strata[name]
            if want > len(members):
                raise ValueError(
                    f"stage {stage_idx}: quota {want} exceeds {name} stratum size {len(members)}"
                )
            rng = random.Random(f"{seed}:{stage_idx}:{name}")
            drawn = rng.sample(range(len(members)), want)
            for pos in sorted(drawn):  # stratum members are already easiest-first
                s = members[pos]
                entries.append(PlanEntry(s.instance, s.score, name, stage_idx, order))
                order += 1
        stages.append(entries)

    return CurriculumPlan(strata=strata, stage_quotas=tuple(quotas), seed=seed, stages=stages)
