"""Record a run against model endpoints once, then replay it offline.

The endpoints here are a stand-in served through httpx's mock transport:
images are derived from the request body and the verifier's yes/no answers
from the image, so the run is deterministic. Every backend call is written
to a transcript; the replay serves the same responses by request hash and
must reproduce result.json byte for byte.

    python3 demos/record_and_replay.py
"""

from __future__ import annotations

import base64
import hashlib
import json
import tempfile
from pathlib import Path

import httpx

from iterrefine import cli
from iterrefine.backends.recording import Transcript
from iterrefine.core import Budget, TaskPrompt

ROLES = ("generator", "editor", "loop_verifier", "critic", "final_evaluator")


def fake_models(request: httpx.Request) -> httpx.Response:
    body = json.loads(request.content)
    if request.url.path.endswith(("/images/generations", "/images/edits")):
        png = b"\x89PNG\r\n\x1a\n" + hashlib.sha256(json.dumps(body, sort_keys=True).encode()).digest()
        return httpx.Response(200, json={"data": [{"b64_json": base64.b64encode(png).decode()}]})
    if "CONTINUE" in body["messages"][0]["content"][0]["text"]:
        text = "Action: CONTINUE\nPrompt: Make the sphere clearly blue."
    else:
        image = next(p["image_url"] for p in body["messages"][1]["content"] if p["type"] == "image")
        h = hashlib.sha256(image.encode()).digest()
        text = "\n".join(f"{i}: {'yes' if h[i] % 2 else 'no'}" for i in (1, 2, 3))
    return httpx.Response(200, json={"choices": [{"message": {"content": text}}]})


def main():
    tasks = [TaskPrompt("cube", "a red cube on a blue sphere", ("cube?", "red?", "blue sphere?"))]
    cfg = {"backends": {r: {"base_url": "https://models.example/v1", "model": r} for r in ROLES}}
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp)
        transcript = Transcript()
        factory = cli.BackendFactory(cfg, "http", 0, transport=httpx.MockTransport(fake_models), transcript=transcript)
        cli.run_tasks(tasks, factory, cfg, Budget.of(3, 2), out / "recorded")
        transcript.save(out / "transcript.jsonl")
        print(f"recorded {len(transcript.entries)} backend calls")

        replay = cli.BackendFactory(cfg, "replay", 0, transcript=Transcript.load(out / "transcript.jsonl"))
        cli.run_tasks(tasks, replay, cfg, Budget.of(3, 2), out / "replayed")
        a = (out / "recorded" / "cube" / "result.json").read_bytes()
        b = (out / "replayed" / "cube" / "result.json").read_bytes()
        print("replay identical:", a == b)
        print(json.dumps(json.loads(a)["row"], indent=2))


if __name__ == "__main__":
    main()
