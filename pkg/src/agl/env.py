"""Interactive rollout sessions over a frozen graph snapshot.

A session renders a task prompt from a template, then alternates model
text and tool observations under a hard search budget.  The engine
keeps the full raw context: the initial prompt plus, per step, the
model text it kept (truncated at the first action or answer) and the
observation it injected.  Concatenating those pieces reproduces the
exact context a policy saw at any point.

Stage semantics: stage 1 injects plain document blocks; stage 2 appends
a fixed retrospection sentence after every document block, nudging the
policy to audit its evidence before searching again.
"""

from __future__ import annotations

import json
import logging
import re
import uuid
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from agl.graph import Graph, TargetInstance
from agl.protocol import (
    BUDGET_NOTICE,
    RETROSPECTION_TEMPLATE,
    THINK_CLOSE,
    THINK_OPEN,
    Action,
    Round,
    Trajectory,
    parse_response,
)
from agl.retrieval import EmbeddingIndex, PairPool, SalienceScores, TextEncoder
from agl.tools import WIRE_NAMES, ToolConfig, render_documents, run_tool

logger = logging.getLogger(__name__)

DEFAULT_BUDGET = 4

#: Consecutive empty policy outputs tolerated before forcing termination.
EMPTY_OUTPUT_LIMIT = 3

_PLACEHOLDER_RE = re.compile(r"\{\{([A-Z_]+)\}\}")

NC_TEMPLATES = ("nc-arxiv", "nc-pubmed", "nc-amazon", "nc-reddit")
LP_TEMPLATES = ("lp-arxiv", "lp-pubmed", "lp-amazon", "lp-products", "lp-reddit", "lp-default")


class TemplateError(ValueError):
    """Unknown template id or unresolved placeholder."""


def _read_asset(name: str, templates_dir: str | None) -> str:
    if templates_dir is not None:
        return (Path(templates_dir) / name).read_text(encoding="utf-8")
    return resources.files("agl.templates").joinpath(name).read_text(encoding="utf-8")


def render_template(text: str, values: dict[str, str], max_passes: int = 3) -> str:
    """Substitute {{NAME}} placeholders; insert values may nest once.

    Raises TemplateError naming the first placeholder with no value.
    """
    for _ in range(max_passes):
        names = set(_PLACEHOLDER_RE.findall(text))
        if not names:
            return text
        missing = sorted(n for n in names if n not in values)
        if missing:
            raise TemplateError(f"no value for placeholder {{{{{missing[0]}}}}}")
        text = _PLACEHOLDER_RE.sub(lambda m: values[m.group(1)], text)
    leftover = _PLACEHOLDER_RE.findall(text)
    if leftover:
        raise TemplateError(f"placeholder {{{{{leftover[0]}}}}} did not resolve")
    return text


def load_template_parts(template_id: str, templates_dir: str | None = None) -> tuple[str, dict[str, str]]:
    """(core text, insert values) for a template id like ``nc-arxiv``."""
    if template_id in NC_TEMPLATES:
        core = _read_asset("nc_core.txt", templates_dir)
        insert = json.loads(_read_asset(template_id.replace("-", "_") + ".json", templates_dir))
        return core, dict(insert)
    if template_id in LP_TEMPLATES:
        core = _read_asset("lp_core.txt", templates_dir)
        variants = json.loads(_read_asset("lp_inserts.json", templates_dir))
        return core, dict(variants[template_id.split("-", 1)[1]])
    raise TemplateError(f"unknown template id {template_id!r}")


@dataclass
class SessionConfig:
    """Everything that shapes one rollout besides the target itself."""

    task: str = "nc"
    stage: int = 1
    budget: int = DEFAULT_BUDGET
    template: str | None = None          # default: first template for the task
    label_space: list[str] = field(default_factory=list)
    tools: ToolConfig | None = None
    dataset_name: str | None = None      # overrides the template's DATASET insert

    def __post_init__(self) -> None:
        if self.task not in ("nc", "lp"):
            raise ValueError(f"task must be 'nc' or 'lp', got {self.task!r}")
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.budget < 0:
            raise ValueError(f"budget must be non-negative, got {self.budget}")

    def resolved_template(self) -> str:
        if self.template is not None:
            return self.template
        return "nc-arxiv" if self.task == "nc" else "lp-default"

    def resolved_tools(self) -> ToolConfig:
        return self.tools if self.tools is not None else ToolConfig.for_task(self.task)


@dataclass
class StepOutcome:
    observation: str | None
    terminal: bool
    answer: str | None
    searches_used: int
    trajectory: Trajectory | None = None


class SessionTerminalError(RuntimeError):
    """Raised when stepping a session that already finished."""


class Session:
    """Mutable state of one rollout; all shared assets live on the engine."""

    def __init__(self, config: SessionConfig, target: TargetInstance, prompt: str):
        self.id = uuid.uuid4().hex
        self.config = config
        self.target = target
        self.prompt = prompt
        self.rounds: list[Round] = []
        self.turns: list[tuple[str, str | None]] = []  # (kept model text, observation)
        self.searches_used = 0
        self.answer: str | None = None
        self.terminal = False
        # Bytes not yet owned by a round: refused tool calls and their
        # notices become part of the next round's reasoning, keeping
        # observations exclusive to executed actions.
        self.pending = ""

    @property
    def raw(self) -> str:
        """Everything after the prompt: kept model text and observations."""
        parts = []
        for kept, obs in self.turns:
            parts.append(kept)
            if obs is not None:
                parts.append(obs)
        return "".join(parts)

    @property
    def context(self) -> str:
        return self.prompt + self.raw

    def trajectory(self) -> Trajectory:
        return Trajectory(rounds=list(self.rounds), answer=self.answer, raw=self.raw)


class Environment:
    """Frozen assets (graph, embeddings, salience, pools) plus sessions."""

    def __init__(
        self,
        graph: Graph,
        index: EmbeddingIndex,
        encoder: TextEncoder,
        salience: SalienceScores,
        pool: PairPool | None = None,
        templates_dir: str | None = None,
    ):
        if index.node_count != graph.node_count:
            raise ValueError(
                f"embedding rows ({index.node_count}) != graph nodes ({graph.node_count})"
            )
        self.graph = graph
        self.index = index
        self.encoder = encoder
        self.salience = salience
        self.pool = pool
        self.templates_dir = templates_dir

    def create_session(self, config: SessionConfig, target: TargetInstance) -> Session:
        """Validate the target and render the initial prompt."""
        target.validate(self.graph.node_count)
        if config.task == "nc" and target.kind != "node":
            raise ValueError("node classification sessions need a node target")
        if config.task == "lp" and target.kind != "pair":
            raise ValueError("link prediction sessions need a pair target")

        template_id = config.resolved_template()
        if (config.task == "nc") != template_id.startswith("nc-"):
            raise TemplateError(f"template {template_id!r} does not fit task {config.task!r}")
        core, values = load_template_parts(template_id, self.templates_dir)

        tools = config.resolved_tools()
        values.update(
            TOPK_ONE_HOP=str(tools.top_k_one_hop),
            TOPK_TWO_HOP=str(tools.top_k_two_hop),
            TOPK_PAGERANK=str(tools.top_k_salience),
            TOPK_SIMILAR=str(tools.top_k_dense),
            MAX_SEARCH_LIMIT=str(config.budget),
        )
        if config.label_space:
            values["CATEGORY_LIST"] = "\n- ".join(config.label_space)
        if config.task == "nc":
            values["SUMMARY_SNIPPET"] = self.graph.texts[target.u]
        else:
            values.update(
                NODE_U=str(target.u),
                NODE_V=str(target.v),
                SUMMARY_U=self.graph.texts[target.u],
                SUMMARY_V=self.graph.texts[target.v],
            )
            if config.dataset_name is not None:
                values["DATASET"] = config.dataset_name

        prompt = render_template(core, values)
        return Session(config, target, prompt)

    def step(self, session: Session, model_text: str) -> StepOutcome:
        """Advance a session with one model response.

        Exactly one of three things happens: a tool runs and its
        rendered documents come back as the observation; the budget
        gate refuses the call and a fixed notice comes back; or the
        session terminates (answer found, nothing actionable, or an
        action emitted outside the think block).
        """
        if session.terminal:
            raise SessionTerminalError(f"session {session.id} already terminated")
        cfg = session.config
        parsed = parse_response(model_text)

        if parsed.error is not None or (parsed.action is None and parsed.answer is None):
            if parsed.error is not None:
                logger.debug("session %s: parse error: %s", session.id, parsed.error)
            session.turns.append((model_text, None))
            session.rounds.append(Round(reasoning=session.pending + model_text))
            session.pending = ""
            return self._finish(session, answer=None)

        if parsed.answer is not None:
            kept = model_text[:parsed.end]
            session.turns.append((kept, None))
            session.rounds.append(Round(reasoning=session.pending + parsed.reasoning))
            session.pending = ""
            return self._finish(session, answer=parsed.answer)

        kept = model_text[:parsed.end]
        prefix = session.raw + parsed.reasoning
        inside_think = prefix.count(THINK_OPEN) > prefix.count(THINK_CLOSE)
        if not inside_think:
            # Tool tags outside the think block are dead letters: keep
            # the bytes, execute nothing, let scoring handle the rest.
            session.turns.append((kept, None))
            session.rounds.append(Round(reasoning=session.pending + kept))
            session.pending = ""
            return self._finish(session, answer=None)

        if session.searches_used >= cfg.budget:
            observation = BUDGET_NOTICE + "\n"
            session.turns.append((kept, observation))
            session.pending += kept + observation
            return StepOutcome(observation, False, None, session.searches_used)

        evidence = run_tool(
            parsed.action.tool,
            self.graph,
            self.index,
            self.encoder,
            self.salience,
            session.target,
            parsed.action.query,
            cfg.resolved_tools(),
            self.pool,
        )
        docs = render_documents(evidence, cfg.task)
        observation = docs + "\n"
        if cfg.stage == 2:
            observation += RETROSPECTION_TEMPLATE.format(tool=WIRE_NAMES[parsed.action.tool])
        session.searches_used += 1
        session.turns.append((kept, observation))
        session.rounds.append(
            Round(
                reasoning=session.pending + parsed.reasoning,
                action=parsed.action,
                observation=observation,
            )
        )
        session.pending = ""
        return StepOutcome(observation, False, None, session.searches_used)

    def _finish(self, session: Session, answer: str | None) -> StepOutcome:
        if session.pending:
            session.rounds.append(Round(reasoning=session.pending))
            session.pending = ""
        session.answer = answer
        session.terminal = True
        return StepOutcome(
            None, True, answer, session.searches_used, trajectory=session.trajectory()
        )

    def run_rollout(
        self, session: Session, policy, max_rounds: int | None = None
    ) -> tuple[Trajectory, int]:
        """Drive a policy callable until the session terminates.

        The policy sees the full context and returns the next model
        text.  Liveness guards: three consecutive empty outputs force
        termination, as does exceeding ``max_rounds`` (budget + 8 by
        default), so a looping policy cannot hang a rollout.
        """
        if max_rounds is None:
            max_rounds = session.config.budget + 8
        empty_streak = 0
        rounds_run = 0
        while not session.terminal:
            if rounds_run >= max_rounds:
                logger.warning("session %s: forced termination after %d rounds", session.id, rounds_run)
                self._finish(session, answer=None)
                break
            text = policy(session.context)
            rounds_run += 1
            if not text:
                empty_streak += 1
                if empty_streak >= EMPTY_OUTPUT_LIMIT:
                    self._finish(session, answer=None)
                    break
                continue
            empty_streak = 0
            self.step(session, text)
        return session.trajectory(), session.searches_used
