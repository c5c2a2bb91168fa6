"""Scripted policies for exercising rollouts without a model.

Each policy is a per-rollout callable: it receives the full context
string and returns the next model text.  They are deterministic given
their constructor arguments, which is what makes scripted rollouts
byte-reproducible across runs.
"""

from __future__ import annotations

import random

from agl.protocol import ANSWER_CLOSE, ANSWER_OPEN, QUERY_BEGIN, QUERY_END, THINK_CLOSE, THINK_OPEN

WIRE_SEQUENCE = ("1-hop", "2-hop", "pagerank", "similar")

_FILLER_WORD = "evidence"


def _filler(tokens: int) -> str:
    return " ".join(f"{_FILLER_WORD}{i}" for i in range(tokens))


class AnswerOnlyPolicy:
    """Answers immediately, no searches."""

    def __init__(self, answer: str):
        self.answer = answer

    def __call__(self, context: str) -> str:
        return (
            f"{THINK_OPEN}The anchor text alone is enough here.{THINK_CLOSE}\n"
            f"{ANSWER_OPEN}{self.answer}{ANSWER_CLOSE}"
        )


class AllToolsPolicy:
    """Runs each of the four pools once, in wire order, then answers."""

    def __init__(self, answer: str, query: str = "anchor context", segment_tokens: int = 12):
        self.answer = answer
        self.query = query
        self.segment_tokens = segment_tokens
        self._step = 0

    def __call__(self, context: str) -> str:
        i = self._step
        self._step += 1
        if i == 0:
            return (
                f"{THINK_OPEN}Let me gather graph context first.\n"
                f"{QUERY_BEGIN}{WIRE_SEQUENCE[0]}:{self.query}{QUERY_END}"
            )
        if i < len(WIRE_SEQUENCE):
            return (
                f"{_filler(self.segment_tokens)}\n"
                f"{QUERY_BEGIN}{WIRE_SEQUENCE[i]}:{self.query}{QUERY_END}"
            )
        return (
            f"{_filler(self.segment_tokens)}\n{THINK_CLOSE}\n"
            f"{ANSWER_OPEN}{self.answer}{ANSWER_CLOSE}"
        )


class StopAfterPolicy:
    """Searches ``searches`` times (cycling pools), reviews, then answers.

    ``segment_tokens`` controls how long each post-retrieval reflection
    is; set it at or above the depth threshold for deep-reasoning
    rollouts.
    """

    def __init__(self, answer: str, searches: int = 3, query: str = "anchor context",
                 segment_tokens: int = 120):
        self.answer = answer
        self.searches = searches
        self.query = query
        self.segment_tokens = segment_tokens
        self._step = 0

    def __call__(self, context: str) -> str:
        i = self._step
        self._step += 1
        if i == 0 and self.searches > 0:
            return (
                f"{THINK_OPEN}Plan: inspect the graph before answering.\n"
                f"{QUERY_BEGIN}{WIRE_SEQUENCE[0]}:{self.query}{QUERY_END}"
            )
        if i < self.searches:
            wire = WIRE_SEQUENCE[i % len(WIRE_SEQUENCE)]
            return (
                f"{_filler(self.segment_tokens)}\n"
                f"{QUERY_BEGIN}{wire}:{self.query}{QUERY_END}"
            )
        if self.searches == 0:
            return (
                f"{THINK_OPEN}No search needed.{THINK_CLOSE}\n"
                f"{ANSWER_OPEN}{self.answer}{ANSWER_CLOSE}"
            )
        return (
            f"{_filler(self.segment_tokens)}\n{THINK_CLOSE}\n"
            f"{ANSWER_OPEN}{self.answer}{ANSWER_CLOSE}"
        )


class OveruseFuzzPolicy:
    """Adversarial: spams random tool calls and malformed text.

    Used to probe the budget gate; it answers only when its RNG feels
    like it, so forced-termination paths get exercised too.
    """

    def __init__(self, seed: int, answer: str = "yes"):
        self.rng = random.Random(seed)
        self.answer = answer
        self._step = 0

    def __call__(self, context: str) -> str:
        i = self._step
        self._step += 1
        rng = self.rng
        parts = []
        if i == 0:
            parts.append(THINK_OPEN)
        roll = rng.random()
        if roll < 0.55:
            wire = rng.choice(WIRE_SEQUENCE + ("0-hop", "HOP", ""))
            parts.append(f"noise {rng.randint(0, 999)} {QUERY_BEGIN}{wire}:q{i}{QUERY_END} tail")
        elif roll < 0.7:
            parts.append(f"{QUERY_BEGIN}{rng.choice(WIRE_SEQUENCE)}:unterminated")
        elif roll < 0.8:
            parts.append("")
        elif roll < 0.9:
            parts.append(f"just musing {rng.randint(0, 999)}")
        else:
            parts.append(f"{THINK_CLOSE}{ANSWER_OPEN}{self.answer}{ANSWER_CLOSE}")
        return "".join(parts)


POLICY_NAMES = ("answer-only", "all-tools", "stop-after-3", "fuzz")


def make_policy(name: str, answer: str, seed: int = 0, segment_tokens: int = 120):
    """Factory used by the CLI; returns a fresh per-rollout policy."""
    if name == "answer-only":
        return AnswerOnlyPolicy(answer)
    if name == "all-tools":
        return AllToolsPolicy(answer)
    if name == "stop-after-3":
        return StopAfterPolicy(answer, searches=3, segment_tokens=segment_tokens)
    if name == "fuzz":
        return OveruseFuzzPolicy(seed, answer)
    raise ValueError(f"unknown policy {name!r}; expected one of {POLICY_NAMES}")
