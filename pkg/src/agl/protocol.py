"""Tag grammar for rollouts: parsing, validation, segmentation.

All tags are literal byte strings; there is no nesting-aware grammar.
A "block" below means an opening tag with a matching closing tag after
it, scanned left to right without overlap.  Parsing never raises on
model output: malformed input comes back as a structured error so the
caller (environment or scorer) can decide what it costs.

Truncation rule: a response is consumed up to the end of its first
well-formed query tag or answer block, whichever starts first.  Text
after that point is discarded -- models cannot smuggle extra actions or
answers behind the first one.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from agl.tools import WIRE_NAMES, WIRE_TO_TOOL

THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
QUERY_BEGIN = "<|begin_of_query|>"
QUERY_END = "<|end_of_query|>"
DOCS_BEGIN = "<|begin_of_documents|>"
DOCS_END = "<|end_of_documents|>"
ANSWER_OPEN = "<answer>"
ANSWER_CLOSE = "</answer>"

TOOL_TAG_LITERALS = (QUERY_BEGIN, QUERY_END, DOCS_BEGIN, DOCS_END)

RETROSPECTION_TEMPLATE = (
    "Let me first carefully review the searched documents of {tool} and decide "
    "whether another search is necessary before proceeding."
)
_RETROSPECTION_RE = re.compile(
    r"Let me first carefully review the searched documents of \S+ and decide "
    r"whether another search is necessary before proceeding\."
)

BUDGET_NOTICE = "Search budget exhausted. Provide your final answer now inside <answer> tags."

#: Same length as the notice so masked offsets index the original text.
_NOTICE_MASK = "\x00" * len(BUDGET_NOTICE)


def _mask_notices(text: str) -> str:
    """Blank out budget notices before scanning for answer tags.

    The notice contains a literal ``<answer>`` substring; without the
    mask an injected notice would pair with the model's closing tag and
    swallow the real answer block.
    """
    if BUDGET_NOTICE not in text:
        return text
    return text.replace(BUDGET_NOTICE, _NOTICE_MASK)


@dataclass(frozen=True)
class Action:
    """A tool invocation parsed off the wire."""

    tool: str   # internal name: one_hop / two_hop / salience / dense
    query: str

    @property
    def wire(self) -> str:
        return WIRE_NAMES[self.tool]

    def render(self) -> str:
        return f"{QUERY_BEGIN}{self.wire}:{self.query}{QUERY_END}"


@dataclass
class Round:
    """One interaction round: free text, then optionally a tool call.

    ``observation`` is present iff the action was executed (a refused
    call keeps its tag inside ``reasoning`` and gets a notice instead).
    """

    reasoning: str
    action: Action | None = None
    observation: str | None = None


@dataclass
class Trajectory:
    rounds: list[Round] = field(default_factory=list)
    answer: str | None = None
    raw: str = ""

    @property
    def tools_used(self) -> frozenset[str]:
        """Distinct tools actually executed (observation present)."""
        return frozenset(
            r.action.tool for r in self.rounds if r.action is not None and r.observation is not None
        )

    @property
    def search_count(self) -> int:
        return sum(1 for r in self.rounds if r.action is not None and r.observation is not None)


@dataclass
class ParsedResponse:
    """Outcome of parsing one model response.

    ``end`` is the offset just past the consumed portion (tag close),
    i.e. where the environment truncates.  ``error`` is set instead of
    raising; an errored parse carries neither action nor answer.
    """

    reasoning: str
    action: Action | None
    answer: str | None
    end: int
    error: str | None = None


def _find_answer_block(text: str, start: int = 0) -> tuple[int, int, str] | None:
    """(open_pos, end_pos_past_close, content) of the first answer block."""
    masked = _mask_notices(text)
    a = masked.find(ANSWER_OPEN, start)
    if a < 0:
        return None
    c = masked.find(ANSWER_CLOSE, a + len(ANSWER_OPEN))
    if c < 0:
        return None
    return a, c + len(ANSWER_CLOSE), text[a + len(ANSWER_OPEN):c]


def parse_response(text: str) -> ParsedResponse:
    """Extract the first well-formed query tag or answer block.

    A query tag is well-formed when it is closed and its payload starts
    with a known tool prefix before the first colon.  Closed tags with
    an unknown prefix are skipped (they stay in the reasoning text and
    are only penalized by scoring); an unclosed tag or unclosed answer
    is a parse error.
    """
    first_answer_open = _mask_notices(text).find(ANSWER_OPEN)

    search_from = 0
    action: Action | None = None
    action_start = -1
    action_end = -1
    while True:
        qb = text.find(QUERY_BEGIN, search_from)
        if qb < 0 or (0 <= first_answer_open < qb):
            break
        qe = text.find(QUERY_END, qb + len(QUERY_BEGIN))
        if qe < 0:
            return ParsedResponse(text, None, None, len(text), error="unterminated query tag")
        payload = text[qb + len(QUERY_BEGIN):qe]
        wire, sep, query = payload.partition(":")
        if sep and wire in WIRE_TO_TOOL:
            action = Action(WIRE_TO_TOOL[wire], query)
            action_start = qb
            action_end = qe + len(QUERY_END)
            break
        search_from = qe + len(QUERY_END)

    if action is not None and (first_answer_open < 0 or action_start < first_answer_open):
        return ParsedResponse(text[:action_start], action, None, action_end)

    if first_answer_open >= 0:
        block = _find_answer_block(text, first_answer_open)
        if block is None:
            return ParsedResponse(text, None, None, len(text), error="unterminated answer tag")
        a, end, content = block
        return ParsedResponse(text[:a], None, content, end)

    return ParsedResponse(text, None, None, len(text))


def _count_blocks(text: str, open_tag: str, close_tag: str) -> int:
    """Complete, non-overlapping open..close blocks, scanned left to right."""
    text = _mask_notices(text)
    count = 0
    pos = 0
    while True:
        o = text.find(open_tag, pos)
        if o < 0:
            return count
        c = text.find(close_tag, o + len(open_tag))
        if c < 0:
            return count
        count += 1
        pos = c + len(close_tag)


def _well_formed_tools(text: str) -> frozenset[str]:
    tools: set[str] = set()
    pos = 0
    while True:
        qb = text.find(QUERY_BEGIN, pos)
        if qb < 0:
            return frozenset(tools)
        qe = text.find(QUERY_END, qb + len(QUERY_BEGIN))
        if qe < 0:
            return frozenset(tools)
        wire, sep, _ = text[qb + len(QUERY_BEGIN):qe].partition(":")
        if sep and wire in WIRE_TO_TOOL:
            tools.add(WIRE_TO_TOOL[wire])
        pos = qe + len(QUERY_END)


@dataclass(frozen=True)
class FormatReport:
    """Literal tag accounting over a full response text."""

    think_count: int
    answer_count: int
    query_begin_count: int
    query_end_count: int
    doc_begin_count: int
    doc_end_count: int
    answer_contains_tool_tags: bool
    answer_token_count: int
    answer_contains_think: bool
    tools_used: frozenset[str]
    parse_ok: bool


def validate_format(full_text: str) -> FormatReport:
    """Count tags and inspect the (first) answer block.

    ``parse_ok`` is the canonical-shape flag: exactly one think block
    and one answer block, balanced query and document tags, and a clean
    answer (no tool tags, no think tags inside it).
    """
    think_count = _count_blocks(full_text, THINK_OPEN, THINK_CLOSE)
    answer_count = _count_blocks(full_text, ANSWER_OPEN, ANSWER_CLOSE)
    qb = full_text.count(QUERY_BEGIN)
    qe = full_text.count(QUERY_END)
    db = full_text.count(DOCS_BEGIN)
    de = full_text.count(DOCS_END)

    leak = False
    tokens = 0
    residual_think = False
    block = _find_answer_block(full_text)
    if block is not None:
        _, _, content = block
        leak = any(tag in content for tag in TOOL_TAG_LITERALS)
        tokens = len(content.split())
        residual_think = THINK_OPEN in content or THINK_CLOSE in content

    parse_ok = (
        think_count == 1
        and answer_count == 1
        and qb == qe
        and db == de
        and not leak
        and not residual_think
    )
    return FormatReport(
        think_count=think_count,
        answer_count=answer_count,
        query_begin_count=qb,
        query_end_count=qe,
        doc_begin_count=db,
        doc_end_count=de,
        answer_contains_tool_tags=leak,
        answer_token_count=tokens,
        answer_contains_think=residual_think,
        tools_used=_well_formed_tools(full_text),
        parse_ok=parse_ok,
    )


def extract_answer(text: str) -> str | None:
    """Normalized content of the first answer block, if any.

    Normalization: lowercase, strip, collapse internal whitespace.
    """
    block = _find_answer_block(text)
    if block is None:
        return None
    return " ".join(block[2].split()).lower()


def segment_reasoning(traj: Trajectory) -> list[tuple[str, int]]:
    """Post-retrieval reasoning segments, one per executed action.

    The segment for an executed action is the model text that follows
    its observation, up to the next query tag (executed or not) or the
    close of the think block, whichever comes first.  Token counts are
    whitespace splits.
    """
    segments: list[tuple[str, int]] = []
    for i, r in enumerate(traj.rounds):
        if r.action is None or r.observation is None:
            continue
        following = traj.rounds[i + 1].reasoning if i + 1 < len(traj.rounds) else ""
        cuts = [c for c in (following.find(THINK_CLOSE), following.find(QUERY_BEGIN)) if c >= 0]
        seg = following[:min(cuts)] if cuts else following
        segments.append((seg, len(seg.split())))
    return segments


def segment_reasoning_text(full_text: str) -> list[tuple[str, int]]:
    """Text-level twin of segment_reasoning, for scoring raw responses.

    Segments start after each document block; an injected retrospection
    sentence straight after the block is not the model's reasoning and
    is skipped before counting.
    """
    segments: list[tuple[str, int]] = []
    pos = 0
    while True:
        de = full_text.find(DOCS_END, pos)
        if de < 0:
            return segments
        start = de + len(DOCS_END)
        m = _RETROSPECTION_RE.match(full_text, start)
        if m is None and full_text.startswith("\n", start):
            m = _RETROSPECTION_RE.match(full_text, start + 1)
        if m is not None:
            start = m.end()
        next_q = full_text.find(QUERY_BEGIN, start)
        next_t = full_text.find(THINK_CLOSE, start)
        ends = [e for e in (next_q, next_t) if e >= 0]
        end = min(ends) if ends else len(full_text)
        seg = full_text[start:end]
        segments.append((seg, len(seg.split())))
        pos = de + len(DOCS_END)


def executed_search_count(full_text: str) -> int:
    """Executed actions in a rendered rollout: one document block each."""
    return full_text.count(DOCS_BEGIN)


def parse_trajectory(text: str) -> Trajectory:
    """Split a full rendered rollout back into rounds.

    Inverse of rendering for environment-produced texts.  A query tag
    immediately followed by a document block is an executed action; the
    observation runs through the block plus its trailing newline or
    retrospection sentence.  A tag followed by the budget notice was
    refused: tag and notice stay inside the next round's reasoning.
    ``render_trajectory`` of the result reproduces ``text`` byte for
    byte for such texts.
    """
    rounds: list[Round] = []
    answer: str | None = None
    pos = 0
    carry = ""

    while pos <= len(text):
        parsed = parse_response(text[pos:])
        if parsed.error is not None or (parsed.action is None and parsed.answer is None):
            tail = carry + text[pos:]
            if tail or not rounds:
                rounds.append(Round(reasoning=tail))
            break
        if parsed.answer is not None:
            rounds.append(Round(reasoning=carry + parsed.reasoning))
            answer = parsed.answer
            break

        tag_end = pos + parsed.end
        if text.startswith(DOCS_BEGIN, tag_end):
            de = text.find(DOCS_END, tag_end)
            if de < 0:
                rounds.append(Round(reasoning=carry + text[pos:]))
                break
            obs_end = de + len(DOCS_END)
            if text.startswith("\n", obs_end):
                m = _RETROSPECTION_RE.match(text, obs_end + 1)
                obs_end = m.end() if m is not None else obs_end + 1
            rounds.append(
                Round(
                    reasoning=carry + parsed.reasoning,
                    action=parsed.action,
                    observation=text[tag_end:obs_end],
                )
            )
            carry = ""
            pos = obs_end
        elif text.startswith(BUDGET_NOTICE, tag_end):
            obs_end = tag_end + len(BUDGET_NOTICE)
            if text.startswith("\n", obs_end):
                obs_end += 1
            carry = carry + text[pos:obs_end]
            pos = obs_end
        else:
            # Tag with no observation after it: not executed, keep the
            # bytes and continue scanning after the tag.
            carry = carry + text[pos:tag_end]
            pos = tag_end
        if pos >= len(text) and carry:
            rounds.append(Round(reasoning=carry))
            break

    return Trajectory(rounds=rounds, answer=answer, raw=text)


def render_trajectory(traj: Trajectory) -> str:
    """Byte-exact inverse of parse_trajectory for well-formed rollouts."""
    parts: list[str] = []
    for r in traj.rounds:
        parts.append(r.reasoning)
        if r.action is not None:
            parts.append(r.action.render())
        if r.observation is not None:
            parts.append(r.observation)
    if traj.answer is not None:
        parts.append(f"{ANSWER_OPEN}{traj.answer}{ANSWER_CLOSE}")
    return "".join(parts)
