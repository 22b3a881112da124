"""Critic prompt rendering and critic output parsing.

Templates are plain text files with ``{{placeholder}}`` markers. The
defaults ship in ``iterrefine/templates``; pass another directory to
:class:`PromptTemplates` to override any of them.
"""

from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .core import ALL_ACTIONS, Action, CriticDecision, ImageRef, ReportMode, TaskPrompt, VerifierReport
from .errors import ParseError

logger = logging.getLogger(__name__)

_PLACEHOLDER = re.compile(r"\{\{\s*(\w+)\s*\}\}")

# order in which actions are listed to the critic
ACTION_ORDER = (Action.CONTINUE, Action.BACKTRACK, Action.RESTART, Action.STOP)


class PromptTemplates:
    """Loads template files, falling back to the packaged defaults."""

    def __init__(self, directory: str | os.PathLike | None = None):
        self.directory = Path(directory) if directory is not None else None
        self._cache: dict[str, str] = {}

    def get(self, name: str) -> str:
        if name not in self._cache:
            text = None
            if self.directory is not None and (self.directory / name).exists():
                text = (self.directory / name).read_text(encoding="utf-8")
            if text is None:
                text = resources.files("iterrefine").joinpath("templates", name).read_text(encoding="utf-8")
            self._cache[name] = text.rstrip("\n")
        return self._cache[name]

    def render(self, name: str, **values) -> str:
        return fill(self.get(name), **values)


DEFAULT_TEMPLATES = PromptTemplates()


def fill(template: str, **values) -> str:
    """Substitute ``{{name}}`` markers; every marker must be supplied."""
    missing = sorted({m for m in _PLACEHOLDER.findall(template) if m not in values})
    if missing:
        raise KeyError(f"template placeholders without values: {missing}")
    return _PLACEHOLDER.sub(lambda m: str(values[m.group(1)]), template)


def _steps_left(max_rounds: int, round: int) -> str:
    left = max_rounds - round
    return f"{left} step" if left == 1 else f"{left} steps"


def _action_lines(templates: PromptTemplates) -> dict[Action, str]:
    lines = {}
    for line in templates.get("critic_actions.txt").splitlines():
        if ":" in line:
            label = line.split(":", 1)[0].strip()
            lines[Action.parse(label)] = line.strip()
    return lines


def render_system_prompt(
    max_rounds: int,
    round: int,
    allowed_actions: Iterable[Action] = ALL_ACTIONS,
    templates: PromptTemplates = DEFAULT_TEMPLATES,
) -> str:
    if not 1 <= round <= max_rounds:
        raise ValueError(f"round {round} outside 1..{max_rounds}")
    allowed = set(allowed_actions)
    descriptions = _action_lines(templates)
    shown = [a for a in ACTION_ORDER if a in allowed]
    actions = "\n".join(f"{i}. {descriptions[a]}" for i, a in enumerate(shown, 1))
    return templates.render(
        "critic_system.txt",
        actions=actions,
        max_rounds=max_rounds,
        round=round,
        steps_left=_steps_left(max_rounds, round),
    )


def format_score(score: Fraction) -> str:
    """Three decimals, truncated: 6/7 -> '0.857'."""
    thousandths = (Fraction(score) * 1000).__floor__()
    return f"{thousandths // 1000}.{thousandths % 1000:03d}"


@dataclass(frozen=True)
class CriticPromptContext:
    full_prompt: str
    step_prompts: tuple[str, ...]
    report: VerifierReport
    round: int
    max_rounds: int

    def __post_init__(self):
        object.__setattr__(self, "step_prompts", tuple(self.step_prompts))
        if self.round > self.max_rounds:
            raise ValueError(f"round {self.round} > max_rounds {self.max_rounds}")
        if len(self.step_prompts) not in (0, self.round - 1):
            raise ValueError(f"round {self.round} expects {self.round - 1} prior step prompts, got {len(self.step_prompts)}")


def render_user_prompt(ctx: CriticPromptContext, templates: PromptTemplates = DEFAULT_TEMPLATES) -> str:
    steps = ctx.step_prompts or (ctx.full_prompt,)
    step_lines = "\n".join(f"- Step {i}: {p}" for i, p in enumerate(steps, 1))
    report = ctx.report
    if report.mode is ReportMode.BINARY:
        score_lines = [f"- {q}: {v}" for q, v in report.answers]
        score_lines.append(f"- Cumulative mean binary score: {format_score(report.score)}")
    else:
        score_lines = [f"- Verifier score (1 to 100): {report.raw_score}"]
    return templates.render(
        "critic_user.txt",
        full_prompt=ctx.full_prompt,
        step_prompts=step_lines,
        scores="\n".join(score_lines),
        max_rounds=ctx.max_rounds,
        round=ctx.round,
        steps_left=_steps_left(ctx.max_rounds, ctx.round),
    )


_ACTION_RE = re.compile(r"action\s*:", re.IGNORECASE)
_TOKEN_RE = re.compile(r"[\s*\[(\"'`]*([A-Za-z][A-Za-z_\\-]*)")
_PROMPT_RE = re.compile(r"prompt\s*:", re.IGNORECASE)


def parse_critic_output(text: str) -> CriticDecision:
    """Extract (action, sub-prompt) from ``Action: ...`` / ``Prompt: ...`` text."""
    m = _ACTION_RE.search(text)
    if m is None:
        raise ParseError("no 'Action:' line in critic output")
    tm = _TOKEN_RE.match(text, m.end())
    if tm is None:
        raise ParseError("empty action token")
    try:
        action = Action.parse(tm.group(1))
    except ValueError as exc:
        raise ParseError(str(exc)) from None
    rest = text[tm.end():]
    pm = _PROMPT_RE.search(rest)
    sub_prompt = ""
    if pm is not None:
        # "**Prompt:** text" leaves the closing bold marker glued to the colon
        first, _, tail = rest[pm.end():].lstrip("*").partition("\n")
        lines = [first.strip()]
        for line in tail.split("\n"):
            if not line.strip():
                break
            lines.append(line.strip())
        sub_prompt = "\n".join(lines).strip()
    if action is not Action.STOP and not sub_prompt:
        raise ParseError(f"{action.value} without a prompt")
    return CriticDecision(action, sub_prompt, raw_response=text)


class ChatCritic:
    """Critic role on top of any chat model, using the critic templates."""

    def __init__(
        self,
        chat,
        allowed_actions: Iterable[Action] = ALL_ACTIONS,
        templates: PromptTemplates = DEFAULT_TEMPLATES,
        max_parse_retries: int = 2,
    ):
        self.chat = chat
        self.allowed_actions = frozenset(allowed_actions)
        self.templates = templates
        self.max_parse_retries = max_parse_retries
        self.fallbacks = 0

    def critique(
        self,
        image: ImageRef,
        task: TaskPrompt,
        history: Sequence[str],
        report: VerifierReport,
        round: int,
        max_rounds: int,
        previous_report: VerifierReport | None = None,
    ) -> CriticDecision:
        system = render_system_prompt(max_rounds, round, self.allowed_actions, self.templates)
        user = render_user_prompt(CriticPromptContext(task.text, tuple(history), report, round, max_rounds), self.templates)
        raw = ""
        for _ in range(self.max_parse_retries + 1):
            raw = self.chat.chat(system, user, [image])
            try:
                return parse_critic_output(raw)
            except ParseError as exc:
                logger.warning("critic output unparseable (%s); retrying", exc)
        self.fallbacks += 1
        logger.warning("critic output unparseable after %d retries; falling back to CONTINUE", self.max_parse_retries)
        return CriticDecision(Action.CONTINUE, raw.strip() or task.text, raw_response=raw)
