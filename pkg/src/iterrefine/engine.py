"""Critic-guided iterative refinement over parallel streams under a unit budget.

Each of the M streams spends its first unit on a fresh generation. In each
of the remaining T-1 rounds the critic looks at the stream's latest
(already verified) candidate and picks an action:

* CONTINUE  edit the latest candidate
* BACKTRACK edit the candidate before the latest (history is never truncated)
* RESTART   generate from scratch with the critic's sub-prompt
* STOP      finish the stream; costs nothing

Every produced candidate is verified once. The final answer is the highest
scoring verified candidate over all streams, ties going to the lower stream
id and then the earlier candidate.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Sequence

from .core import (
    ALL_ACTIONS,
    Action,
    Budget,
    Candidate,
    CriticDecision,
    EventKind,
    ProducedBy,
    UNIT_EVENTS,
    RunJournal,
    StreamState,
    TaskPrompt,
)
from .errors import BackendError, ConfigError, RunFailed, SelectionImpossible

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EngineConfig:
    budget: Budget
    allowed_actions: frozenset = ALL_ACTIONS
    stop_on_perfect_score: bool = True
    seed: int = 0
    disallowed_action_fallback: Action = Action.CONTINUE
    continue_from_global_best: bool = False
    max_workers: int = 1

    def __post_init__(self):
        allowed = frozenset(Action(a) for a in self.allowed_actions)
        object.__setattr__(self, "allowed_actions", allowed)
        if not {Action.CONTINUE, Action.STOP} <= allowed:
            raise ConfigError("allowed_actions must contain CONTINUE and STOP")
        if self.disallowed_action_fallback not in allowed:
            raise ConfigError("disallowed_action_fallback must itself be allowed")
        if self.max_workers < 1:
            raise ConfigError("max_workers must be >= 1")

    def to_json(self) -> dict:
        return {
            "budget": {"B": self.budget.total_units, "T": self.budget.rounds, "M": self.budget.streams},
            "allowed_actions": sorted(a.value for a in self.allowed_actions),
            "stop_on_perfect_score": self.stop_on_perfect_score,
            "seed": self.seed,
            "disallowed_action_fallback": self.disallowed_action_fallback.value,
            "continue_from_global_best": self.continue_from_global_best,
        }


@dataclass
class RefinementResult:
    best: Candidate
    best_stream: int
    best_index: int
    journal: RunJournal
    per_round_best_scores: list[Fraction]
    streams: list[StreamState] = field(default_factory=list)

    @property
    def units_consumed(self) -> int:
        return sum(s.units_consumed for s in self.streams)

    @property
    def critic_calls(self) -> int:
        return self.journal.count(EventKind.CRITIQUED)

    def to_json(self) -> dict:
        return {
            "run_id": self.journal.run_id,
            "final_selection": {"stream_id": self.best_stream, "candidate_index": self.best_index},
            "best_score": self.best.report.score,
            "best_report": self.best.report.to_json(),
            "best_image": self.best.image.digest(),
            "units_consumed": self.units_consumed,
            "critic_calls": self.critic_calls,
            "per_round_best_scores": list(self.per_round_best_scores),
            "streams": [
                {"stream_id": s.stream_id, "units": s.units_consumed, "stopped": s.stopped, "failed": s.failed}
                for s in self.streams
            ],
        }


def derive_seed(seed: int, stream_id: int, round: int) -> int:
    """Per-call seed, stable across processes and independent of scheduling."""
    digest = hashlib.sha256(f"{seed}:{stream_id}:{round}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


class _StreamFailed(Exception):
    pass


def _call(fn: Callable, *args, **kwargs):
    """One retry for a failed backend call; a second failure fails the stream."""
    try:
        return fn(*args, **kwargs)
    except BackendError as first:
        logger.warning("backend call failed (%s); retrying once", first)
        try:
            return fn(*args, **kwargs)
        except BackendError as second:
            raise _StreamFailed(str(second)) from second


def apply_action(
    stream: StreamState,
    decision: CriticDecision,
    task: TaskPrompt,
    g,
    e,
    seed: int = 0,
    events: list | None = None,
    global_best: tuple[int, int, Candidate] | None = None,
) -> StreamState:
    """Apply one critic decision to a stream, spending one unit unless STOP.

    ``events`` collects (kind, payload) pairs for the journal. ``global_best``
    is the (stream_id, index, candidate) that CONTINUE edits when refining from the
    cross-stream best instead of the stream's own latest image.
    """
    if stream.stopped:
        raise ValueError(f"stream {stream.stream_id} already stopped")
    log = events if events is not None else []
    action = decision.action
    if action is Action.BACKTRACK and len(stream.history) < 2:
        logger.info("stream %d: BACKTRACK with a single candidate, using CONTINUE", stream.stream_id)
        log.append((EventKind.FALLBACK, {"requested": "BACKTRACK", "applied": "CONTINUE", "reason": "history length 1"}))
        action = Action.CONTINUE

    if action is Action.STOP:
        stream.stopped = True
        log.append((EventKind.STOPPED, {"reason": "critic"}))
        return stream

    if action is Action.RESTART:
        image = _call(g.generate, task.text, decision.sub_prompt, seed)
        idx = stream.append(Candidate(image, ProducedBy.RESTART, step_prompt=decision.sub_prompt))
        log.append((EventKind.RESTARTED, {"candidate_index": idx, "image": image.digest(), "seed": seed}))
        return stream

    if action is Action.BACKTRACK:
        source = len(stream.history) - 2
        log.append((EventKind.BACKTRACKED, {"from_index": len(stream.history) - 1, "to_index": source}))
        image = _call(e.edit, stream.history[source].image, decision.sub_prompt, seed)
        idx = stream.append(Candidate(image, ProducedBy.EDIT_AFTER_BACKTRACK, source, step_prompt=decision.sub_prompt))
        log.append((EventKind.EDITED, {"candidate_index": idx, "source_index": source, "image": image.digest(), "seed": seed}))
        return stream

    if global_best is not None:
        src_stream, src_idx, src = global_best
        image = _call(e.edit, src.image, decision.sub_prompt, seed)
        cand = Candidate(image, ProducedBy.EDIT, src_idx, step_prompt=decision.sub_prompt,
                         source_stream=None if src_stream == stream.stream_id else src_stream)
        idx = stream.append(cand)
        log.append((EventKind.EDITED, {"candidate_index": idx, "source_index": src_idx, "source_stream": src_stream,
                                       "image": image.digest(), "seed": seed}))
        return stream

    source = len(stream.history) - 1
    image = _call(e.edit, stream.latest.image, decision.sub_prompt, seed)
    idx = stream.append(Candidate(image, ProducedBy.EDIT, source, step_prompt=decision.sub_prompt))
    log.append((EventKind.EDITED, {"candidate_index": idx, "source_index": source, "image": image.digest(), "seed": seed}))
    return stream


def select_best(streams: Sequence[StreamState]) -> tuple[int, int]:
    best: tuple[int, int] | None = None
    best_score = None
    for s in sorted(streams, key=lambda s: s.stream_id):
        for i, cand in enumerate(s.history):
            if cand.report is None:
                continue
            if best_score is None or cand.report.score > best_score:
                best, best_score = (s.stream_id, i), cand.report.score
    if best is None:
        raise SelectionImpossible("no verified candidate in any stream")
    return best


def run_refinement(
    task: TaskPrompt,
    cfg: EngineConfig,
    g,
    e,
    v,
    c,
    journal: RunJournal | None = None,
) -> RefinementResult:
    T, M = cfg.budget.rounds, cfg.budget.streams
    if journal is None:
        journal = RunJournal(task.id, {"engine": cfg.to_json(), "task": task.to_json()})
    streams = [StreamState(m) for m in range(M)]
    per_round_best: list[Fraction] = []

    def verify(stream: StreamState, round: int, log: list) -> None:
        cand = stream.latest
        cand.report = _call(v.verify, cand.image, task)
        log.append((EventKind.VERIFIED, {"candidate_index": len(stream.history) - 1, "report": cand.report.to_json()}))

    def first_round(stream: StreamState) -> list:
        log: list = []
        seed = derive_seed(cfg.seed, stream.stream_id, 1)
        try:
            image = _call(g.generate, task.text, None, seed)
            stream.append(Candidate(image, ProducedBy.GENERATE, step_prompt=task.text))
            log.append((EventKind.GENERATED, {"candidate_index": 0, "image": image.digest(), "seed": seed}))
            verify(stream, 1, log)
        except _StreamFailed as exc:
            stream.failed = True
            log.append((EventKind.BACKEND_FAILED, {"error": str(exc)}))
        return log

    def later_round(stream: StreamState, round: int, global_best) -> list:
        log: list = []
        latest = stream.latest
        if cfg.stop_on_perfect_score and latest.report.perfect:
            stream.stopped = True
            log.append((EventKind.STOPPED, {"reason": "perfect_score"}))
            return log
        history = [cand.step_prompt for cand in stream.history]
        previous = stream.history[-2].report if len(stream.history) > 1 else None
        try:
            decision = _call(c.critique, latest.image, task, history, latest.report, round, T, previous_report=previous)
            log.append((EventKind.CRITIQUED, {"action": decision.action.value, "sub_prompt": decision.sub_prompt,
                                              "raw_response": decision.raw_response}))
            if decision.action not in cfg.allowed_actions:
                fallback = cfg.disallowed_action_fallback
                logger.info("stream %d: %s not allowed, using %s", stream.stream_id, decision.action.value, fallback.value)
                log.append((EventKind.FALLBACK, {"requested": decision.action.value, "applied": fallback.value,
                                                 "reason": "action masked"}))
                sub_prompt = decision.sub_prompt or task.text
                decision = CriticDecision(fallback, sub_prompt, decision.raw_response)
            gb = global_best if (cfg.continue_from_global_best and decision.action is Action.CONTINUE) else None
            units_before = stream.units_consumed
            apply_action(stream, decision, task, g, e, derive_seed(cfg.seed, stream.stream_id, round), log, gb)
            if stream.units_consumed > units_before:
                verify(stream, round, log)
        except _StreamFailed as exc:
            stream.failed = True
            log.append((EventKind.BACKEND_FAILED, {"error": str(exc)}))
        return log

    def run_round(round: int, work: Callable[[StreamState], list], active: list[StreamState]) -> None:
        if cfg.max_workers > 1 and len(active) > 1:
            with ThreadPoolExecutor(max_workers=min(cfg.max_workers, len(active))) as pool:
                logs = list(pool.map(work, active))
        else:
            logs = [work(s) for s in active]
        # appended in stream order so journals do not depend on thread timing
        for stream, log in zip(active, logs):
            for kind, payload in log:
                journal.append(kind, stream.stream_id, round, payload)
                if kind in UNIT_EVENTS:
                    journal.save_image(f"{stream.stream_id}_{round}", stream.history[payload["candidate_index"]].image)

    def best_so_far() -> tuple[int, int, Candidate] | None:
        try:
            sid, idx = select_best(streams)
        except SelectionImpossible:
            return None
        return sid, idx, streams[sid].history[idx]

    run_round(1, first_round, streams)
    for round in range(2, T + 1):
        per_round_best.append(_best_score(streams))
        active = [s for s in streams if not s.stopped and not s.failed]
        if not active:
            break
        gb = best_so_far() if cfg.continue_from_global_best else None
        run_round(round, lambda s, r=round, gb=gb: later_round(s, r, gb), active)
    per_round_best.append(_best_score(streams))

    if all(s.failed for s in streams):
        journal.close()
        raise RunFailed(f"task {task.id}: every stream failed", journal)
    for s in streams:
        if not s.stopped and not s.failed:
            journal.append(EventKind.BUDGET_EXHAUSTED, s.stream_id, T, {"units": s.units_consumed})
    sid, idx = select_best(streams)
    best = streams[sid].history[idx]
    journal.append(EventKind.SELECTED, None, None, {"stream_id": sid, "candidate_index": idx, "score": best.report.score})
    journal.close()
    return RefinementResult(best, sid, idx, journal, per_round_best, streams)


def _best_score(streams: Iterable[StreamState]) -> Fraction | None:
    scores = [c.report.score for s in streams for c in s.history if c.report is not None]
    return max(scores) if scores else None
