"""Record/replay wrappers for any role backend.

Every call is keyed by a hash of (role, method, normalized arguments). Images
are hashed by content, so a replayed run that feeds replayed images back in
reproduces the recorded keys exactly. Repeated identical requests are served
in recording order.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from collections import defaultdict
from pathlib import Path
from typing import Any

from ..core import Action, CriticDecision, ImageRef, TaskPrompt, VerifierReport, dumps
from ..errors import BackendError, ReplayMiss

_METHODS = ("generate", "edit", "verify", "critique", "chat")


def _normalize(value: Any) -> Any:
    if isinstance(value, ImageRef):
        return {"image": value.digest()}
    if isinstance(value, TaskPrompt):
        return value.to_json()
    if isinstance(value, VerifierReport):
        return value.to_json()
    if isinstance(value, (list, tuple)):
        return [_normalize(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _normalize(v) for k, v in value.items()}
    return value


def request_key(role: str, method: str, args: tuple, kwargs: dict) -> str:
    blob = dumps({"role": role, "method": method, "args": _normalize(list(args)), "kwargs": _normalize(kwargs)})
    return hashlib.sha256(blob.encode()).hexdigest()


def _encode_response(value: Any) -> dict:
    if isinstance(value, ImageRef):
        return {"type": "image", "value": value.to_json()}
    if isinstance(value, VerifierReport):
        return {"type": "report", "value": value.to_json()}
    if isinstance(value, CriticDecision):
        return {
            "type": "decision",
            "value": {"action": value.action.value, "sub_prompt": value.sub_prompt, "raw": value.raw_response},
        }
    if isinstance(value, str):
        return {"type": "text", "value": value}
    raise TypeError(f"cannot record response of type {type(value).__name__}")


def _decode_response(entry: dict) -> Any:
    kind, value = entry["type"], entry["value"]
    if kind == "image":
        return ImageRef.from_json(value)
    if kind == "report":
        return VerifierReport.from_json(value)
    if kind == "decision":
        return CriticDecision(Action(value["action"]), value["sub_prompt"], value["raw"])
    if kind == "text":
        return value
    raise ValueError(f"unknown transcript entry type {kind!r}")


class Transcript:
    """Ordered request/response log; thread-safe, persisted as JSONL."""

    def __init__(self, entries: list[dict] | None = None):
        self.entries: list[dict] = list(entries or [])
        self._lock = threading.Lock()
        self._queues: dict[str, list[dict]] | None = None
        self._served: dict[str, int] = defaultdict(int)

    def add(self, entry: dict) -> None:
        with self._lock:
            self.entries.append(entry)

    def count(self, *methods: str) -> int:
        return sum(1 for e in self.entries if e["method"] in methods)

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with self._lock, open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps(e, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> Transcript:
        with open(path, encoding="utf-8") as fh:
            return cls([json.loads(line) for line in fh if line.strip()])

    def take(self, key: str) -> dict:
        with self._lock:
            if self._queues is None:
                self._queues = defaultdict(list)
                for e in self.entries:
                    self._queues[e["key"]].append(e)
            queue = self._queues.get(key, [])
            i = self._served[key]
            if i >= len(queue):
                raise ReplayMiss(f"no recorded response for request {key[:12]} (occurrence {i + 1})")
            self._served[key] = i + 1
            return queue[i]


class RecordingBackend:
    """Proxy that forwards to ``inner`` and logs each call into a transcript."""

    def __init__(self, inner: Any, transcript: Transcript, role: str):
        self._inner = inner
        self._transcript = transcript
        self._role = role

    def __getattr__(self, name):
        if name not in _METHODS:
            return getattr(self._inner, name)
        target = getattr(self._inner, name)

        def call(*args, **kwargs):
            key = request_key(self._role, name, args, kwargs)
            entry = {"role": self._role, "method": name, "key": key}
            try:
                result = target(*args, **kwargs)
            except BackendError as exc:
                entry["error"] = {"type": type(exc).__name__, "message": str(exc)}
                self._transcript.add(entry)
                raise
            entry["response"] = _encode_response(result)
            self._transcript.add(entry)
            return result

        return call


def recording_wrapper(inner: Any, transcript: Transcript, role: str) -> RecordingBackend:
    return RecordingBackend(inner, transcript, role)


class ReplayBackend:
    """Serves recorded responses by request hash; never touches the network."""

    def __init__(self, transcript: Transcript, role: str):
        self._transcript = transcript
        self._role = role

    def _serve(self, method: str, args: tuple, kwargs: dict):
        entry = self._transcript.take(request_key(self._role, method, args, kwargs))
        if "error" in entry:
            from .. import errors

            cls = getattr(errors, entry["error"]["type"], BackendError)
            raise cls(entry["error"]["message"])
        return _decode_response(entry["response"])

    def generate(self, *args, **kwargs):
        return self._serve("generate", args, kwargs)

    def edit(self, *args, **kwargs):
        return self._serve("edit", args, kwargs)

    def verify(self, *args, **kwargs):
        return self._serve("verify", args, kwargs)

    def critique(self, *args, **kwargs):
        return self._serve("critique", args, kwargs)

    def chat(self, *args, **kwargs):
        return self._serve("chat", args, kwargs)
