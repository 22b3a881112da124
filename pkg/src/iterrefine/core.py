"""Domain types shared by every module, plus the persistent run journal."""

from __future__ import annotations

import base64
import hashlib
import json
import mimetypes
import os
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from .errors import ConfigError, JournalFinalized, JournalStorageError

_EXTENSIONS = {
    "image/png": "png",
    "image/jpeg": "jpg",
    "image/webp": "webp",
    "application/x-sim-image": "sim.json",
    "application/x-sim-scene": "scene.json",
}


@dataclass(frozen=True)
class ImageRef:
    """Opaque image handle: a file path or inline bytes with a media type.

    The engine never looks inside; only backends interpret the bytes.
    """

    data: bytes | None = None
    media_type: str = "image/png"
    path: str | None = None

    def __post_init__(self):
        if (self.data is None) == (self.path is None):
            raise ValueError("ImageRef needs exactly one of data or path")

    @classmethod
    def from_file(cls, path: str | os.PathLike, media_type: str | None = None) -> ImageRef:
        path = str(path)
        if media_type is None:
            media_type = mimetypes.guess_type(path)[0] or "application/octet-stream"
        return cls(path=path, media_type=media_type)

    def read_bytes(self) -> bytes:
        if self.data is not None:
            return self.data
        return Path(self.path).read_bytes()

    def digest(self) -> str:
        """Content hash; stable across inline/path representations."""
        return hashlib.sha256(self.media_type.encode() + b"\0" + self.read_bytes()).hexdigest()

    @property
    def extension(self) -> str:
        return _EXTENSIONS.get(self.media_type, "bin")

    def to_json(self) -> dict:
        return {
            "media_type": self.media_type,
            "b64": base64.b64encode(self.read_bytes()).decode("ascii"),
        }

    @classmethod
    def from_json(cls, obj: dict) -> ImageRef:
        return cls(data=base64.b64decode(obj["b64"]), media_type=obj["media_type"])


@dataclass(frozen=True)
class TaskPrompt:
    """A complex prompt together with its optional yes/no evaluation questions."""

    id: str
    text: str
    questions: tuple[str, ...] = ()
    category: str | None = None
    continuous_rubric: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "questions", tuple(self.questions))
        if not self.text or not self.text.strip():
            raise ValueError(f"task {self.id!r}: prompt text is empty")
        if any(not q or not q.strip() for q in self.questions):
            raise ValueError(f"task {self.id!r}: empty question")
        if len(set(self.questions)) != len(self.questions):
            raise ValueError(f"task {self.id!r}: duplicate questions")

    @classmethod
    def from_json(cls, obj: dict) -> TaskPrompt:
        if not isinstance(obj, dict):
            raise ValueError("task must be a JSON object")
        text = obj.get("prompt", obj.get("text"))
        if not isinstance(obj.get("id"), (str, int)) or not isinstance(text, str):
            raise ValueError("task needs string 'id' and 'prompt'")
        questions = obj.get("questions") or []
        if not isinstance(questions, list) or not all(isinstance(q, str) for q in questions):
            raise ValueError("'questions' must be a list of strings")
        return cls(
            id=str(obj["id"]),
            text=text,
            questions=tuple(questions),
            category=obj.get("category"),
            continuous_rubric=obj.get("continuous_rubric"),
        )

    def to_json(self) -> dict:
        out: dict[str, Any] = {"id": self.id, "prompt": self.text, "questions": list(self.questions)}
        if self.category is not None:
            out["category"] = self.category
        if self.continuous_rubric is not None:
            out["continuous_rubric"] = self.continuous_rubric
        return out


@dataclass(frozen=True)
class Budget:
    """B = T x M unit operations; one unit per generator or editor call."""

    total_units: int
    rounds: int
    streams: int

    def __post_init__(self):
        validate_budget(self.total_units, self.rounds, self.streams)

    @classmethod
    def of(cls, rounds: int, streams: int) -> Budget:
        return cls(rounds * streams, rounds, streams)


def validate_budget(total: int, rounds: int, streams: int) -> Budget:
    triple = (total, rounds, streams)
    if not all(isinstance(v, int) and not isinstance(v, bool) for v in triple):
        raise ConfigError(f"budget (B, T, M) = {triple}: values must be integers")
    if min(triple) <= 0:
        raise ConfigError(f"budget (B, T, M) = {triple}: values must be positive")
    if total != rounds * streams:
        raise ConfigError(f"budget (B, T, M) = {triple}: {rounds} x {streams} != {total}")
    # Budget.__post_init__ calls back here; build without re-validating
    budget = object.__new__(Budget)
    object.__setattr__(budget, "total_units", total)
    object.__setattr__(budget, "rounds", rounds)
    object.__setattr__(budget, "streams", streams)
    return budget


def factorizations(total: int) -> list[Budget]:
    """All (T, M) splits of a budget, T ascending."""
    return [Budget(total, t, total // t) for t in range(1, total + 1) if total % t == 0]


class Action(str, Enum):
    STOP = "STOP"
    BACKTRACK = "BACKTRACK"
    RESTART = "RESTART"
    CONTINUE = "CONTINUE"

    @classmethod
    def parse(cls, token: str) -> Action:
        key = token.strip().strip("[]()*`'\" ").upper().replace("-", "_").replace(" ", "_")
        key = key.replace("\\_", "_")
        if key == "FRESH_START":
            return cls.RESTART
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown action token {token!r}") from None


ALL_ACTIONS = frozenset(Action)


@dataclass(frozen=True)
class CriticDecision:
    action: Action
    sub_prompt: str = ""
    raw_response: str = ""

    def __post_init__(self):
        if self.action is not Action.STOP and not self.sub_prompt.strip():
            raise ValueError(f"{self.action.value} decision needs a sub-prompt")


class ReportMode(str, Enum):
    BINARY = "binary"
    CONTINUOUS = "continuous"


@dataclass(frozen=True)
class VerifierReport:
    """Verifier output for one image.

    Binary scores are exact fractions (mean of 0/1 verdicts); continuous
    scores keep the raw 1-100 value and store raw/100.
    """

    mode: ReportMode
    score: Fraction
    answers: tuple[tuple[str, int], ...] = ()
    raw_score: int | None = None
    degraded: bool = False

    @classmethod
    def binary(cls, answers: Iterable[tuple[str, int]], degraded: bool = False) -> VerifierReport:
        answers = tuple((q, int(v)) for q, v in answers)
        if any(v not in (0, 1) for _, v in answers):
            raise ValueError("binary verdicts must be 0 or 1")
        # zero questions: nothing can fail, as for a k=0 prompt
        score = Fraction(sum(v for _, v in answers), len(answers)) if answers else Fraction(1)
        return cls(ReportMode.BINARY, score, answers, degraded=degraded)

    @classmethod
    def continuous(cls, raw: int, degraded: bool = False) -> VerifierReport:
        if not 1 <= raw <= 100:
            raise ValueError(f"continuous score {raw} outside 1..100")
        return cls(ReportMode.CONTINUOUS, Fraction(raw, 100), raw_score=raw, degraded=degraded)

    @property
    def perfect(self) -> bool:
        return self.score == 1

    def to_json(self) -> dict:
        out: dict[str, Any] = {
            "mode": self.mode.value,
            "score": f"{self.score.numerator}/{self.score.denominator}",
        }
        if self.mode is ReportMode.BINARY:
            out["answers"] = [[q, v] for q, v in self.answers]
        else:
            out["raw_score"] = self.raw_score
        if self.degraded:
            out["degraded"] = True
        return out

    @classmethod
    def from_json(cls, obj: dict) -> VerifierReport:
        mode = ReportMode(obj["mode"])
        degraded = bool(obj.get("degraded", False))
        if mode is ReportMode.BINARY:
            if not obj.get("answers") and "score" in obj:
                # a bare score with no per-question verdicts
                return cls(mode, Fraction(obj["score"]), (), degraded=degraded)
            return cls.binary([(q, v) for q, v in obj["answers"]], degraded=degraded)
        return cls.continuous(int(obj["raw_score"]), degraded=degraded)


class ProducedBy(str, Enum):
    GENERATE = "generate"
    EDIT = "edit"
    EDIT_AFTER_BACKTRACK = "edit_after_backtrack"
    RESTART = "restart"


@dataclass
class Candidate:
    image: ImageRef
    produced_by: ProducedBy
    source_index: int | None = None
    report: VerifierReport | None = None
    step_prompt: str = ""
    # set only when editing another stream's candidate (continue_from_global_best)
    source_stream: int | None = None

    def __post_init__(self):
        fresh = self.produced_by in (ProducedBy.GENERATE, ProducedBy.RESTART)
        if fresh and self.source_index is not None:
            raise ValueError("fresh generations have no source candidate")
        if not fresh and self.source_index is None:
            raise ValueError("edited candidates need a source_index")


@dataclass
class StreamState:
    stream_id: int
    history: list[Candidate] = field(default_factory=list)
    stopped: bool = False
    failed: bool = False
    units_consumed: int = 0

    @property
    def latest(self) -> Candidate:
        return self.history[-1]

    def append(self, candidate: Candidate) -> int:
        if self.stopped:
            raise RuntimeError(f"stream {self.stream_id} is stopped")
        if candidate.source_index is not None and candidate.source_stream is None:
            if not 0 <= candidate.source_index < len(self.history):
                raise ValueError("source_index must point at an earlier candidate")
        self.history.append(candidate)
        self.units_consumed += 1
        return len(self.history) - 1

    def provenance_root(self, index: int) -> int:
        """Follow source links within this stream back to a fresh generation."""
        seen = set()
        while True:
            cand = self.history[index]
            if cand.source_index is None or cand.source_stream is not None:
                return index
            if index in seen:
                raise RuntimeError("provenance cycle")
            seen.add(index)
            index = cand.source_index


class EventKind(str, Enum):
    GENERATED = "Generated"
    VERIFIED = "Verified"
    CRITIQUED = "Critiqued"
    EDITED = "Edited"
    BACKTRACKED = "Backtracked"
    RESTARTED = "Restarted"
    STOPPED = "Stopped"
    BUDGET_EXHAUSTED = "BudgetExhausted"
    SELECTED = "Selected"
    # decomposition runs
    PROPOSED = "Proposed"
    REMOVAL_VERIFIED = "RemovalVerified"
    STEP_ACCEPTED = "StepAccepted"
    # failures are logged, never silently dropped
    BACKEND_FAILED = "BackendFailed"
    FALLBACK = "Fallback"


UNIT_EVENTS = frozenset({EventKind.GENERATED, EventKind.EDITED, EventKind.RESTARTED})


def _fraction_default(obj):
    if isinstance(obj, Fraction):
        return f"{obj.numerator}/{obj.denominator}"
    if isinstance(obj, Enum):
        return obj.value
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def dumps(obj: Any, **kw) -> str:
    """json.dumps that understands Fractions and Enums."""
    return json.dumps(obj, default=_fraction_default, sort_keys=True, **kw)


class RunJournal:
    """Append-only event log of one run.

    With a ``run_dir`` every event is written (and flushed) to
    ``journal.jsonl`` before ``append`` returns. Appends are serialized by a
    lock so worker threads may share one journal.
    """

    def __init__(
        self,
        run_id: str,
        config: dict | None = None,
        run_dir: str | os.PathLike | None = None,
        clock: Callable[[], float] = time.time,
    ):
        self.run_id = run_id
        self.config = dict(config or {})
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.events: list[dict] = []
        self.final_selection: tuple[int, int] | None = None
        self._clock = clock
        self._lock = threading.Lock()
        self._fh = None
        if self.run_dir is not None:
            try:
                self.run_dir.mkdir(parents=True, exist_ok=True)
                (self.run_dir / "images").mkdir(exist_ok=True)
                self._fh = open(self.run_dir / "journal.jsonl", "w", encoding="utf-8")
            except OSError as exc:
                raise JournalStorageError(f"cannot open journal in {self.run_dir}: {exc}") from exc
            self._write({"kind": "RunStarted", "run_id": run_id, "config": self.config})

    def __len__(self) -> int:
        return len(self.events)

    @property
    def finalized(self) -> bool:
        return self.final_selection is not None

    def _write(self, record: dict) -> None:
        if self._fh is None:
            return
        try:
            self._fh.write(dumps(record) + "\n")
            self._fh.flush()
            os.fsync(self._fh.fileno())
        except OSError as exc:
            raise JournalStorageError(f"journal write failed: {exc}") from exc

    def append(
        self,
        kind: EventKind,
        stream_id: int | None = None,
        round: int | None = None,
        payload: dict | None = None,
    ) -> dict:
        kind = EventKind(kind)
        with self._lock:
            if self.finalized:
                raise JournalFinalized(f"run {self.run_id} already has a Selected event")
            event = {
                "seq": len(self.events),
                "timestamp": self._clock(),
                "stream_id": stream_id,
                "round": round,
                "kind": kind.value,
                "payload": dict(payload or {}),
            }
            self._write(event)
            self.events.append(event)
            if kind is EventKind.SELECTED:
                p = event["payload"]
                self.final_selection = (p["stream_id"], p["candidate_index"])
        return event

    def save_image(self, name: str, image: ImageRef) -> ImageRef:
        """Persist an image under ``images/``; no-op for in-memory journals."""
        if self.run_dir is None:
            return image
        target = self.run_dir / "images" / f"{name}.{image.extension}"
        try:
            target.write_bytes(image.read_bytes())
        except OSError as exc:
            raise JournalStorageError(f"cannot write {target}: {exc}") from exc
        return image

    def count(self, *kinds: EventKind) -> int:
        wanted = {EventKind(k).value for k in kinds}
        return sum(1 for e in self.events if e["kind"] in wanted)

    def of_kind(self, kind: EventKind) -> list[dict]:
        return [e for e in self.events if e["kind"] == EventKind(kind).value]

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    @staticmethod
    def load(path: str | os.PathLike) -> list[dict]:
        """Read a journal.jsonl back into records (header line included)."""
        records = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(json.loads(line))
        return records


def journal_is_complete(run_dir: str | os.PathLike) -> bool:
    path = Path(run_dir) / "journal.jsonl"
    if not path.exists():
        return False
    try:
        return any(r.get("kind") == EventKind.SELECTED.value for r in RunJournal.load(path))
    except (OSError, json.JSONDecodeError):
        return False
