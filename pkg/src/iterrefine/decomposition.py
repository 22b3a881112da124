"""Scene decomposition: remove objects one at a time, each removal verified.

Per step a proposer names the next object and a removal phrase, the editor
applies it, and a critic compares the before/after images. A failed check
sends the critic's feedback back to the proposer and the step is retried
until it passes or the per-step budget runs out, in which case the best
scoring attempt is kept and the sequence continues.

The module also carries a synthetic scene world (objects on a support DAG
with injectable removal flaws) so both policies can be compared offline.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .core import EventKind, ImageRef, RunJournal
from .engine import derive_seed
from .errors import BackendError, ConfigError, ParseError, ProposerDone
from .prompts import DEFAULT_TEMPLATES, PromptTemplates

logger = logging.getLogger(__name__)

VIOLATIONS = ("not_removed", "wrong_object_removed", "artifact", "identity_drift", "implausible_change")
UNVERIFIABLE = "unverifiable"


@dataclass(frozen=True)
class DecompositionTask:
    initial_scene: ImageRef
    max_steps: int
    per_step_budget: int = 4
    scene_id: str = "scene"

    def __post_init__(self):
        if self.per_step_budget < 1:
            raise ConfigError("per_step_budget must be >= 1")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")


@dataclass(frozen=True)
class RemovalVerdict:
    removed_ok: bool
    violations: tuple[str, ...] = ()
    feedback: str = ""
    score: Fraction = Fraction(0)

    def __post_init__(self):
        object.__setattr__(self, "violations", tuple(self.violations))
        if self.removed_ok and self.violations:
            raise ValueError("a verified removal carries no violations")
        if not 0 <= self.score <= 1:
            raise ValueError("score outside [0, 1]")

    @classmethod
    def from_violations(cls, violations: Sequence[str], feedback: str = "") -> RemovalVerdict:
        violations = tuple(dict.fromkeys(violations))
        if UNVERIFIABLE in violations:
            score = Fraction(0)
        else:
            score = Fraction(len(VIOLATIONS) - len(violations), len(VIOLATIONS))
        return cls(not violations, violations, feedback, score)

    def to_json(self) -> dict:
        return {"removed_ok": self.removed_ok, "violations": list(self.violations),
                "feedback": self.feedback, "score": self.score}


@dataclass(frozen=True)
class Proposal:
    phrase: str
    target: str


# --------------------------------------------------------------------------
# operations


def propose_removal(scene: ImageRef, history: Sequence[str], prior_feedback: str | None, vlm) -> Proposal:
    return vlm.propose(scene, list(history), prior_feedback)


def verify_removal(prev: ImageRef, next: ImageRef, phrase: str, vlm) -> RemovalVerdict:
    if prev.digest() == next.digest():
        return RemovalVerdict.from_violations(["not_removed"], "The image did not change; the object is still there.")
    return vlm.verify_removal(prev, next, phrase)


@dataclass
class Attempt:
    attempt: int
    phrase: str
    target: str
    image: ImageRef | None
    verdict: RemovalVerdict | None
    error: str | None = None


@dataclass
class StepRecord:
    step: int
    attempts: list[Attempt]
    accepted: Attempt | None

    @property
    def ok(self) -> bool:
        return self.accepted is not None and self.accepted.verdict is not None and self.accepted.verdict.removed_ok

    @property
    def editor_calls(self) -> int:
        return len(self.attempts)

    @property
    def verifier_calls(self) -> int:
        return sum(1 for a in self.attempts if a.verdict is not None)


@dataclass
class DecompositionResult:
    steps: list[StepRecord]
    solved: bool
    emptied: bool
    journal: RunJournal

    def to_json(self) -> dict:
        return {
            "solved": self.solved,
            "emptied": self.emptied,
            "steps": [
                {"step": s.step, "ok": s.ok, "attempts": len(s.attempts),
                 "phrase": s.accepted.phrase if s.accepted else None}
                for s in self.steps
            ],
        }


def _best_attempt(attempts: Sequence[Attempt]) -> Attempt | None:
    best = None
    for a in attempts:
        if a.verdict is None:
            continue
        if best is None or a.verdict.score > best.verdict.score:
            best = a
    return best


def _record(journal: RunJournal, step: int, a: Attempt) -> None:
    if a.image is not None:
        journal.save_image(f"step_{step}_attempt_{a.attempt}", a.image)
        journal.append(EventKind.EDITED, None, step, {"attempt": a.attempt, "phrase": a.phrase, "image": a.image.digest()})
    else:
        journal.append(EventKind.BACKEND_FAILED, None, step, {"attempt": a.attempt, "error": a.error})
    if a.verdict is not None:
        journal.append(EventKind.REMOVAL_VERIFIED, None, step, {"attempt": a.attempt, **a.verdict.to_json()})


def _finish(steps, scene, proposer, history, emptied, journal) -> DecompositionResult:
    if not emptied:
        try:
            proposer.propose(scene, list(history), None)
        except ProposerDone:
            emptied = True
    journal.close()
    return DecompositionResult(steps, emptied and all(s.ok for s in steps), emptied, journal)


def _run(task: DecompositionTask, proposer, editor, critic, journal, seed: int, iterative: bool) -> DecompositionResult:
    if journal is None:
        journal = RunJournal(task.scene_id, {"policy": "iterative" if iterative else "parallel",
                                             "per_step_budget": task.per_step_budget})
    journal.save_image("step_0", task.initial_scene)
    scene = task.initial_scene
    history: list[str] = []
    steps: list[StepRecord] = []
    emptied = False
    for step in range(1, task.max_steps + 1):
        try:
            proposal = propose_removal(scene, history, None, proposer)
        except ProposerDone:
            emptied = True
            break
        journal.append(EventKind.PROPOSED, None, step, {"attempt": 1, "phrase": proposal.phrase, "target": proposal.target})
        attempts: list[Attempt] = []
        feedback: list[str] = []
        for n in range(1, task.per_step_budget + 1):
            if iterative and n > 1:
                proposal = propose_removal(scene, history, "\n".join(feedback), proposer)
                journal.append(EventKind.PROPOSED, None, step, {"attempt": n, "phrase": proposal.phrase,
                                                                "target": proposal.target, "feedback": feedback[-1]})
            try:
                image = editor.edit(scene, proposal.phrase, derive_seed(seed, step, n))
            except BackendError as exc:
                # a failed edit still uses up the attempt
                a = Attempt(n, proposal.phrase, proposal.target, None, None, str(exc))
            else:
                a = Attempt(n, proposal.phrase, proposal.target, image, verify_removal(scene, image, proposal.phrase, critic))
            attempts.append(a)
            _record(journal, step, a)
            if iterative:
                if a.verdict is not None and a.verdict.removed_ok:
                    break
                feedback.append(a.verdict.feedback if a.verdict is not None else f"The edit failed: {a.error}")
        accepted = next((a for a in attempts if a.verdict is not None and a.verdict.removed_ok), None)
        accepted = accepted or _best_attempt(attempts)
        record = StepRecord(step, attempts, accepted)
        steps.append(record)
        journal.append(EventKind.STEP_ACCEPTED, None, step, {
            "attempt": accepted.attempt if accepted else None, "ok": record.ok,
            "degraded": accepted is not None and not record.ok,
        })
        if accepted is not None:
            scene = accepted.image
            history.append(accepted.phrase)
    return _finish(steps, scene, proposer, history, emptied, journal)


def run_decomposition(task: DecompositionTask, proposer, editor, critic, journal: RunJournal | None = None,
                      seed: int = 0) -> DecompositionResult:
    """Feedback-guided iterative removal."""
    return _run(task, proposer, editor, critic, journal, seed, iterative=True)


def parallel_removal_baseline(task: DecompositionTask, proposer, editor, critic, journal: RunJournal | None = None,
                              seed: int = 0) -> DecompositionResult:
    """Budget-matched best-of-N: N edits of one phrase per step, critic picks."""
    return _run(task, proposer, editor, critic, journal, seed, iterative=False)


# --------------------------------------------------------------------------
# chat-model roles


_OBJECT = re.compile(r"^\s*object\s*:\s*(.+)$", re.IGNORECASE | re.MULTILINE)
_PHRASE = re.compile(r"^\s*phrase\s*:\s*(.+)$", re.IGNORECASE | re.MULTILINE)
_REMOVED = re.compile(r"^\s*removed\s*:\s*\[?\s*(yes|no|true|false)", re.IGNORECASE | re.MULTILINE)
_VIOL = re.compile(r"^\s*violations\s*:\s*(.*)$", re.IGNORECASE | re.MULTILINE)
_FEEDBACK = re.compile(r"^\s*feedback\s*:\s*(.*)$", re.IGNORECASE | re.MULTILINE | re.DOTALL)


class ChatProposer:
    def __init__(self, chat, templates: PromptTemplates = DEFAULT_TEMPLATES):
        self.chat = chat
        self.templates = templates

    def propose(self, scene, history, prior_feedback=None):
        hist = "\n".join(f"- {h}" for h in history) or "- none"
        fb = f"The previous attempt at this step was rejected. Critic feedback:\n{prior_feedback}\n\n" if prior_feedback else ""
        user = self.templates.render("jenga_proposer.txt", history=hist, feedback=fb)
        text = self.chat.chat("You plan object removals for scene decomposition.", user, [scene])
        obj, phrase = _OBJECT.search(text), _PHRASE.search(text)
        if obj and obj.group(1).strip().strip("[]").upper() == "NONE":
            raise ProposerDone("proposer reports an empty scene")
        if not phrase:
            raise ParseError("proposer output has no 'Phrase:' line")
        target = obj.group(1).strip().strip("[]") if obj else phrase.group(1).strip()
        return Proposal(phrase.group(1).strip().strip("[]"), target)


def parse_removal_verdict(text: str) -> RemovalVerdict:
    removed = _REMOVED.search(text)
    viol = _VIOL.search(text)
    if removed is None or viol is None:
        raise ParseError("critic output lacks Removed:/Violations: lines")
    fb = _FEEDBACK.search(text)
    feedback = fb.group(1).strip() if fb else ""
    tokens = [t.strip().strip("[]").lower().replace(" ", "_") for t in viol.group(1).split(",")]
    violations = [t for t in tokens if t and t != "none"]
    unknown = [t for t in violations if t not in VIOLATIONS]
    if unknown:
        raise ParseError(f"unknown violation labels {unknown}")
    if removed.group(1).lower() in ("no", "false") and "not_removed" not in violations:
        violations.insert(0, "not_removed")
    return RemovalVerdict.from_violations(violations, feedback)


class ChatRemovalCritic:
    def __init__(self, chat, templates: PromptTemplates = DEFAULT_TEMPLATES):
        self.chat = chat
        self.templates = templates

    def verify_removal(self, prev, next, phrase):
        user = self.templates.render("jenga_critic.txt", phrase=phrase)
        system = "You verify object removals in scene decomposition."
        for attempt in range(2):
            text = self.chat.chat(system, user, [prev, next])
            try:
                return parse_removal_verdict(text)
            except ParseError as exc:
                logger.warning("removal critic output unparseable (%s)%s", exc, "; retrying" if attempt == 0 else "")
        return RemovalVerdict.from_violations([UNVERIFIABLE], "The critic response could not be parsed.")


# --------------------------------------------------------------------------
# synthetic scenes

SCENE_MEDIA_TYPE = "application/x-sim-scene"
FLAW_CLASSES = ("shadow_residual", "wrong_object", "background_drift")
# phrase fragments that stop the simulated editor from making each flaw
_GUARDS = {
    "shadow_residual": "and the shadow it casts",
    "wrong_object": "leaving every other object untouched",
    "background_drift": "keeping the background unchanged",
}


@dataclass(frozen=True)
class SimScene:
    """Objects on a support DAG; ``supports[a]`` lists objects resting on ``a``."""

    objects: tuple[str, ...]
    supports: dict = field(default_factory=dict)
    artifacts: tuple[str, ...] = ()
    drift: int = 0

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        clean = {a: tuple(b for b in bs if b in self.objects) for a, bs in self.supports.items() if a in self.objects}
        object.__setattr__(self, "supports", {a: bs for a, bs in clean.items() if bs})
        if len(set(self.objects)) != len(self.objects):
            raise ValueError("duplicate object names")
        self._check_acyclic()

    def _check_acyclic(self) -> None:
        state: dict[str, int] = {}

        def visit(node):
            state[node] = 1
            for child in self.supports.get(node, ()):
                if state.get(child) == 1:
                    raise ValueError(f"support cycle through {child!r}")
                if child not in state:
                    visit(child)
            state[node] = 2

        for obj in self.objects:
            if obj not in state:
                visit(obj)

    def removable(self) -> list[str]:
        """Objects that hold nothing up; removing them is physically plausible."""
        return [o for o in self.objects if not self.supports.get(o)]

    def without(self, obj: str) -> SimScene:
        return SimScene(tuple(o for o in self.objects if o != obj),
                        {a: bs for a, bs in self.supports.items() if a != obj}, self.artifacts, self.drift)

    def to_json(self) -> dict:
        return {"objects": list(self.objects), "supports": {a: list(bs) for a, bs in sorted(self.supports.items())},
                "artifacts": list(self.artifacts), "drift": self.drift}

    @classmethod
    def from_json(cls, d: dict) -> SimScene:
        return cls(tuple(d["objects"]), {a: tuple(bs) for a, bs in d.get("supports", {}).items()},
                   tuple(d.get("artifacts", ())), int(d.get("drift", 0)))

    def to_ref(self) -> ImageRef:
        return ImageRef(data=json.dumps(self.to_json(), sort_keys=True).encode(), media_type=SCENE_MEDIA_TYPE)

    @classmethod
    def from_ref(cls, ref: ImageRef) -> SimScene:
        return cls.from_json(json.loads(ref.read_bytes()))


_COLORS = ("red", "blue", "green", "yellow", "white", "black", "wooden", "glass", "striped", "small")
_THINGS = ("mug", "book", "box", "vase", "lamp", "plate", "ladder", "bowl", "bottle", "candle", "basket", "tray")


def random_scene(rng: np.random.Generator, min_objects: int = 3, max_objects: int = 8) -> SimScene:
    """Random support DAG: each object rests on at most one earlier object."""
    n = int(rng.integers(min_objects, max_objects + 1))
    pool = [f"{c} {t}" for c in _COLORS for t in _THINGS]
    names = [pool[i] for i in rng.choice(len(pool), size=n, replace=False)]
    supports: dict[str, list[str]] = {}
    for i in range(1, n):
        if rng.random() < 0.6:
            base = names[int(rng.integers(0, i))]
            supports.setdefault(base, []).append(names[i])
    return SimScene(tuple(names), {a: tuple(bs) for a, bs in supports.items()})


def _target_in(phrase: str, objects: Iterable[str]) -> str | None:
    low = phrase.lower()
    hits = [(low.find(o.lower()), -len(o), o) for o in objects if o.lower() in low]
    return min(hits)[2] if hits else None


class SimProposer:
    """Proposes the first removable object; folds critic feedback into the phrase."""

    def propose(self, scene, history, prior_feedback=None):
        s = SimScene.from_ref(scene)
        if not s.objects:
            raise ProposerDone("scene is empty")
        target = s.removable()[0]
        phrase = f"remove the {target}"
        fb = (prior_feedback or "").lower()
        if "shadow" in fb:
            phrase += f" {_GUARDS['shadow_residual']}"
        if "other object" in fb:
            phrase += f", {_GUARDS['wrong_object']}"
        if "background" in fb:
            phrase += f", {_GUARDS['background_drift']}"
        return Proposal(phrase, target)


class SimSceneEditor:
    def __init__(self, flaw_probs: dict | None = None, seed: int = 0):
        self.flaw_probs = {c: 0.3 for c in FLAW_CLASSES} if flaw_probs is None else dict(flaw_probs)
        unknown = set(self.flaw_probs) - set(FLAW_CLASSES)
        if unknown:
            raise ConfigError(f"unknown flaw classes {sorted(unknown)}")
        self.seed = seed
        self.calls = 0

    def edit(self, base, instruction, seed=None):
        self.calls += 1
        scene = SimScene.from_ref(base)
        rng = np.random.default_rng([self.seed & 0xFFFFFFFF, (seed or 0) & 0xFFFFFFFFFFFFFFFF])
        draws = {c: rng.random() for c in FLAW_CLASSES}
        target = _target_in(instruction, scene.objects)
        if target is None:
            return scene.to_ref()
        fires = {c for c in FLAW_CLASSES
                 if draws[c] < self.flaw_probs.get(c, 0.0) and _GUARDS[c] not in instruction.lower()}
        removed = target
        others = [o for o in scene.objects if o != target]
        if "wrong_object" in fires and others:
            removed = others[int(rng.integers(0, len(others)))]
        out = scene.without(removed)
        artifacts, drift = out.artifacts, out.drift
        if "shadow_residual" in fires:
            artifacts = artifacts + (f"shadow of the {removed}",)
        if "background_drift" in fires:
            drift += 1
        return SimScene(out.objects, out.supports, artifacts, drift).to_ref()


class SimRemovalCritic:
    """Noiseless rule-table critic over synthetic scenes."""

    def verify_removal(self, prev, next, phrase):
        before, after = SimScene.from_ref(prev), SimScene.from_ref(next)
        target = _target_in(phrase, before.objects)
        gone = [o for o in before.objects if o not in after.objects]
        violations, notes = [], []
        if target is None or target in after.objects:
            violations.append("not_removed")
            notes.append(f"The {target or 'requested object'} is still in the scene.")
        extra = [o for o in gone if o != target]
        if extra:
            violations.append("wrong_object_removed")
            notes.append(f"The {', '.join(extra)} was removed instead; remove only the {target} and leave every other object untouched.")
        new_artifacts = [a for a in after.artifacts if a not in before.artifacts]
        if new_artifacts:
            violations.append("artifact")
            notes.append(f"A {new_artifacts[0]} remains; remove the shadow residual as well.")
        if after.drift > before.drift:
            violations.append("identity_drift")
            notes.append("The background changed; keep the background unchanged.")
        if any(before.supports.get(o) for o in gone):
            violations.append("implausible_change")
            notes.append("A supporting object was removed while objects still rest on it.")
        return RemovalVerdict.from_violations(violations, " ".join(notes))


def sim_scene_task(scene: SimScene, per_step_budget: int = 4, scene_id: str = "scene") -> DecompositionTask:
    return DecompositionTask(scene.to_ref(), max_steps=len(scene.objects), per_step_budget=per_step_budget,
                             scene_id=scene_id)
