"""Verifier protocols and benchmark aggregation.

Binary mode asks every yes/no question in one prompt and expects one
``<index>: <0|1>`` line per question. Continuous mode asks for a single
1-100 alignment score.
"""

from __future__ import annotations

import logging
import re
from collections import defaultdict
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from scipy import stats

from .core import ImageRef, TaskPrompt, VerifierReport
from .errors import ParseError
from .prompts import DEFAULT_TEMPLATES, PromptTemplates

logger = logging.getLogger(__name__)

VERIFIER_SYSTEM = "You are a careful visual question answering assistant."

_ANSWER_LINE = re.compile(r"^\s*(?:q(?:uestion)?\s*)?(\d+)\s*[:.)\-]\s*\**\s*(0|1|yes|no|true|false)\b", re.IGNORECASE | re.MULTILINE)
_TRUTHY = {"1": 1, "yes": 1, "true": 1, "0": 0, "no": 0, "false": 0}


def parse_binary_answers(text: str, n_questions: int) -> dict[int, int]:
    """Map 1-based question index -> verdict for every parseable line."""
    found: dict[int, int] = {}
    for m in _ANSWER_LINE.finditer(text):
        idx = int(m.group(1))
        if 1 <= idx <= n_questions and idx not in found:
            found[idx] = _TRUTHY[m.group(2).lower()]
    return found


def score_binary(image: ImageRef, task: TaskPrompt, vlm, templates: PromptTemplates = DEFAULT_TEMPLATES) -> VerifierReport:
    if not task.questions:
        raise ValueError(f"task {task.id!r} has no questions for binary scoring")
    n = len(task.questions)
    block = "\n".join(f"{i}: {q}" for i, q in enumerate(task.questions, 1))
    user = templates.render("verifier_binary.txt", questions=block)
    found = parse_binary_answers(vlm.chat(VERIFIER_SYSTEM, user, [image]), n)
    if len(found) < n:
        logger.warning("verifier answered %d/%d questions; retrying once", len(found), n)
        retry = parse_binary_answers(vlm.chat(VERIFIER_SYSTEM, user, [image]), n)
        found = retry if len(retry) >= len(found) else found
    degraded = len(found) < n
    answers = [(q, found.get(i, 0)) for i, q in enumerate(task.questions, 1)]
    return VerifierReport.binary(answers, degraded=degraded)


_INT = re.compile(r"-?\d+")


def parse_continuous_score(text: str) -> int:
    m = _INT.search(text)
    if m is None:
        raise ParseError(f"no integer score in {text[:60]!r}")
    return int(m.group(0))


def score_continuous(image: ImageRef, task: TaskPrompt, vlm, templates: PromptTemplates = DEFAULT_TEMPLATES) -> VerifierReport:
    if not task.continuous_rubric:
        raise ValueError(f"task {task.id!r} has no continuous rubric")
    user = templates.render("verifier_continuous.txt", prompt=task.text, rubric=task.continuous_rubric)
    try:
        raw = parse_continuous_score(vlm.chat(VERIFIER_SYSTEM, user, [image]))
    except ParseError:
        logger.warning("continuous verifier output unparseable; retrying once")
        raw = parse_continuous_score(vlm.chat(VERIFIER_SYSTEM, user, [image]))
    clamped = min(100, max(1, raw))
    return VerifierReport.continuous(clamped, degraded=clamped != raw)


class ChatVerifier:
    """Verifier role over a chat model; binary when the task has questions."""

    def __init__(self, vlm, templates: PromptTemplates = DEFAULT_TEMPLATES):
        self.vlm = vlm
        self.templates = templates

    def verify(self, image: ImageRef, task: TaskPrompt) -> VerifierReport:
        if task.questions:
            return score_binary(image, task, self.vlm, self.templates)
        return score_continuous(image, task, self.vlm, self.templates)


def full_solve_rate(reports: Sequence[VerifierReport | Fraction]) -> Fraction:
    """Share of tasks whose final score is exactly 1 (no float threshold)."""
    if not reports:
        raise ValueError("full_solve_rate of an empty result list")
    scores = [r.score if isinstance(r, VerifierReport) else Fraction(r) for r in reports]
    return Fraction(sum(1 for s in scores if s == 1), len(scores))


def category_means(results: Mapping[str, Iterable[tuple[str, Fraction]]]) -> list[dict]:
    """Mean score per category for each method.

    ``results`` maps a method name to (category, score) pairs. Rows are
    sorted by category; a method without any result in a category gets
    ``None`` in that cell, never zero.
    """
    sums: dict[str, dict[str, list]] = defaultdict(dict)
    for method, pairs in results.items():
        for category, score in pairs:
            sums[category].setdefault(method, []).append(Fraction(score))
    rows = []
    for category in sorted(sums):
        row: dict = {"category": category}
        for method in results:
            vals = sums[category].get(method)
            row[method] = sum(vals, Fraction(0)) / len(vals) if vals else None
        rows.append(row)
    return rows


def sign_test(wins: int, losses: int) -> float:
    """One-sided sign test p-value for wins > losses (ties dropped)."""
    n = wins + losses
    if n == 0:
        return 1.0
    return float(stats.binomtest(wins, n, 0.5, alternative="greater").pvalue)
