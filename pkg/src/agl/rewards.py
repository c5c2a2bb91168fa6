"""Composite trajectory rewards for two training stages.

Stage "bootstrap" pays for answer accuracy, output format, and tooluse
coverage (distinct tools, 0.5 each, capped at 2.0).  Stage "mso" swaps
coverage for reasoning depth: every post-retrieval segment shorter than
``delta_tokens`` whitespace tokens costs 0.2, a rollout with no short
segment earns 0.5.

All scoring runs off the raw response text, so the in-process path and
the wire path cannot disagree.  Terms and totals are rounded to 9
decimal places: every reachable value is an exact multiple of 0.1, and
rounding keeps float addition from leaking ulps into stored fixtures
or JSON output.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from agl.protocol import (
    FormatReport,
    Trajectory,
    extract_answer,
    segment_reasoning_text,
    validate_format,
)

STAGE_NAMES = {1: "bootstrap", 2: "mso"}


def _round(x: float) -> float:
    return round(x, 9)


@dataclass(frozen=True)
class RewardConfig:
    """Reward constants; stage selects which composite applies."""

    stage: str = "bootstrap"

    acc_match: float = 1.5
    acc_mismatch: float = 0.0
    acc_missing: float = -1.0
    acc_invalid: float = -0.5

    fmt_shape_ok: float = 0.5       # exactly one think block, one answer block
    fmt_shape_bad: float = -0.5
    fmt_tags_ok: float = 0.1        # query/document begin and end counts balance
    fmt_tags_bad: float = -0.3
    fmt_leak_penalty: float = -0.5  # tool tags inside the answer
    fmt_verbose_penalty: float = -0.2
    fmt_residual_think_penalty: float = -0.3
    verbose_limit: int = 12         # answer tokens allowed without penalty

    cov_per_tool: float = 0.5
    cov_cap: float = 2.0

    depth_bonus: float = 0.5
    depth_penalty: float = 0.2      # per short segment (or flat, see depth_mode)
    delta_tokens: int = 100
    depth_mode: str = "per_segment"  # or "flat": one penalty no matter how many

    def __post_init__(self) -> None:
        if self.stage not in ("bootstrap", "mso"):
            raise ValueError(f"stage must be 'bootstrap' or 'mso', got {self.stage!r}")
        if self.depth_mode not in ("per_segment", "flat"):
            raise ValueError(f"depth_mode must be 'per_segment' or 'flat', got {self.depth_mode!r}")

    @classmethod
    def for_stage(cls, stage: int | str, **overrides) -> "RewardConfig":
        if isinstance(stage, int):
            if stage not in STAGE_NAMES:
                raise ValueError(f"stage must be 1 or 2, got {stage}")
            stage = STAGE_NAMES[stage]
        return cls(stage=stage, **overrides)

    def with_overrides(self, mapping: dict) -> "RewardConfig":
        unknown = set(mapping) - set(self.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown reward config keys: {sorted(unknown)}")
        return replace(self, **mapping)


@dataclass(frozen=True)
class RewardBreakdown:
    r_fmt: float
    r_acc: float
    r_cov: float
    r_depth: float
    total: float
    n_short: int = 0
    tools_used: frozenset[str] = field(default_factory=frozenset)

    def terms(self) -> dict[str, float]:
        return {"fmt": self.r_fmt, "acc": self.r_acc, "cov": self.r_cov, "depth": self.r_depth}


def accuracy_reward(
    pred: str | None, gold: str, cfg: RewardConfig, valid_index: bool = True
) -> float:
    """Exact-match accuracy on normalized strings.

    An invalid sample index outranks everything else; a present but
    wrong answer scores 0 rather than a penalty.
    """
    if not gold:
        raise ValueError("gold answer must be non-empty")
    if not valid_index:
        return _round(cfg.acc_invalid)
    if pred is None:
        return _round(cfg.acc_missing)
    norm_pred = " ".join(pred.split()).lower()
    norm_gold = " ".join(gold.split()).lower()
    return _round(cfg.acc_match if norm_pred == norm_gold else cfg.acc_mismatch)


def format_reward(report: FormatReport, cfg: RewardConfig) -> float:
    """Shape term plus tag-balance term plus independent penalties."""
    r = cfg.fmt_shape_ok if (report.think_count == 1 and report.answer_count == 1) else cfg.fmt_shape_bad
    balanced = (
        report.query_begin_count == report.query_end_count
        and report.doc_begin_count == report.doc_end_count
    )
    r += cfg.fmt_tags_ok if balanced else cfg.fmt_tags_bad
    if report.answer_contains_tool_tags:
        r += cfg.fmt_leak_penalty
    if report.answer_token_count > cfg.verbose_limit:
        r += cfg.fmt_verbose_penalty
    if report.answer_contains_think:
        r += cfg.fmt_residual_think_penalty
    return _round(r)


def coverage_reward(tools_used: frozenset[str] | set[str], cfg: RewardConfig) -> float:
    return _round(min(cfg.cov_per_tool * len(tools_used), cfg.cov_cap))


def depth_reward(segments: list[tuple[str, int]], cfg: RewardConfig) -> tuple[float, int]:
    """(reward, short_segment_count) for post-retrieval reasoning depth."""
    n_short = sum(1 for _, tokens in segments if tokens < cfg.delta_tokens)
    if n_short == 0:
        return _round(cfg.depth_bonus), 0
    if cfg.depth_mode == "flat":
        return _round(-cfg.depth_penalty), n_short
    return _round(-cfg.depth_penalty * n_short), n_short


def score_text(
    response: str, gold: str, cfg: RewardConfig, valid_index: bool = True
) -> RewardBreakdown:
    """Score one raw response text against a gold answer."""
    report = validate_format(response)
    r_fmt = format_reward(report, cfg)
    r_acc = accuracy_reward(extract_answer(response), gold, cfg, valid_index)
    if cfg.stage == "bootstrap":
        r_cov = coverage_reward(report.tools_used, cfg)
        r_depth = 0.0
        n_short = 0
    else:
        r_cov = 0.0
        r_depth, n_short = depth_reward(segment_reasoning_text(response), cfg)
    total = _round(r_fmt + r_acc + r_cov + r_depth)
    return RewardBreakdown(
        r_fmt=r_fmt,
        r_acc=r_acc,
        r_cov=r_cov,
        r_depth=r_depth,
        total=total,
        n_short=n_short,
        tools_used=report.tools_used,
    )


def total_reward(
    traj: Trajectory, gold: str, cfg: RewardConfig, valid_index: bool = True
) -> RewardBreakdown:
    """Score a structured trajectory (by scoring its raw text)."""
    return score_text(traj.raw, gold, cfg, valid_index)


def score_record(record: dict, default_stage: int | str | None = None, base: RewardConfig | None = None) -> dict:
    """Score one wire/file record {"response", "gold", "stage"?, "valid"?}.

    Returns the serializable result dict used by both the service and
    the batch CLI: {"total", "terms", "n_short", "tools_used",
    "search_count"}.
    """
    from agl.protocol import executed_search_count
    from agl.tools import WIRE_NAMES

    if "response" not in record or "gold" not in record:
        raise ValueError("score records need 'response' and 'gold'")
    response = record["response"]
    gold = record["gold"]
    if not isinstance(response, str) or not isinstance(gold, str):
        raise ValueError("'response' and 'gold' must be strings")
    stage = record.get("stage", default_stage)
    if stage is None:
        raise ValueError("no stage given (record has no 'stage' and no default set)")
    if base is not None:
        name = STAGE_NAMES[stage] if isinstance(stage, int) and stage in STAGE_NAMES else stage
        if name not in ("bootstrap", "mso"):
            raise ValueError(f"stage must be 1 or 2, got {stage!r}")
        cfg = replace(base, stage=name)
    else:
        cfg = RewardConfig.for_stage(stage)
    bd = score_text(response, gold, cfg, valid_index=bool(record.get("valid", True)))
    return {
        "total": bd.total,
        "terms": bd.terms(),
        "n_short": bd.n_short,
        "tools_used": sorted(WIRE_NAMES[t] for t in bd.tools_used),
        "search_count": executed_search_count(response),
    }
