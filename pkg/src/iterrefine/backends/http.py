"""HTTP adapters for remote chat (verifier/critic) and image endpoints.

Wire shapes:

* chat:   POST {model, messages: [{role, content: [{type: "text"|"image", ...}]}]}
* images: POST {model, prompt[, image]} -> {data: [{b64_json | b64 | url}]}

Auth is a bearer token read from the environment variable named in the
endpoint config.
"""

from __future__ import annotations

import base64
import collections
import hashlib
import io
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import httpx

from ..core import ImageRef
from ..errors import BackendRejected, BackendUnavailable, ConfigError, ProtocolError
from .base import compose_generation_prompt

logger = logging.getLogger(__name__)

MAX_IMAGE_BYTES = 8 * 1024 * 1024
RETRYABLE_STATUS = frozenset({408, 429, 500, 502, 503, 504})


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model: str
    auth_env: str | None = None
    timeout: float = 60.0
    max_retries: int = 3
    backoff_initial: float = 1.0
    backoff_multiplier: float = 2.0
    requests_per_minute: int | None = None
    chat_path: str = "/chat/completions"
    generate_path: str = "/images/generations"
    edit_path: str = "/images/edits"

    def __post_init__(self):
        if self.timeout <= 0:
            raise ConfigError(f"timeout must be > 0, got {self.timeout}")
        if self.max_retries < 0:
            raise ConfigError(f"max_retries must be >= 0, got {self.max_retries}")
        if self.backoff_initial < 0 or self.backoff_multiplier < 1:
            raise ConfigError("backoff needs initial >= 0 and multiplier >= 1")
        if self.requests_per_minute is not None and self.requests_per_minute <= 0:
            raise ConfigError("requests_per_minute must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> EndpointConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown endpoint keys: {sorted(unknown)}")
        return cls(**d)


class RateLimiter:
    """Sliding one-minute window; callers over the cap wait rather than fail."""

    def __init__(
        self,
        per_minute: int | None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.per_minute = per_minute
        self._clock = clock
        self._sleep = sleep
        self._stamps: collections.deque[float] = collections.deque()
        self._lock = threading.Lock()
        self.total_wait = 0.0

    def acquire(self) -> float:
        """Block until a slot is free; returns seconds waited."""
        if not self.per_minute:
            return 0.0
        waited = 0.0
        with self._lock:
            while True:
                now = self._clock()
                while self._stamps and now - self._stamps[0] >= 60.0:
                    self._stamps.popleft()
                if len(self._stamps) < self.per_minute:
                    self._stamps.append(now)
                    self.total_wait += waited
                    return waited
                delay = 60.0 - (now - self._stamps[0])
                self._sleep(delay)
                waited += delay


_limiters: dict[EndpointConfig, RateLimiter] = {}
_limiters_lock = threading.Lock()


def shared_limiter(cfg: EndpointConfig) -> RateLimiter:
    """One limiter per endpoint config, shared by every adapter using it."""
    with _limiters_lock:
        if cfg not in _limiters:
            _limiters[cfg] = RateLimiter(cfg.requests_per_minute)
        return _limiters[cfg]


def fit_payload(image: ImageRef, limit: int = MAX_IMAGE_BYTES) -> ImageRef:
    """Downscale raster images whose encoded size exceeds ``limit``."""
    raw = image.read_bytes()
    if len(raw) <= limit or not image.media_type.startswith("image/"):
        return image
    from PIL import Image

    img = Image.open(io.BytesIO(raw))
    fmt = "PNG" if image.media_type == "image/png" else "JPEG"
    while True:
        img = img.resize((max(1, img.width // 2), max(1, img.height // 2)))
        buf = io.BytesIO()
        img.convert("RGB" if fmt == "JPEG" else img.mode).save(buf, format=fmt)
        if buf.tell() <= limit or (img.width == 1 and img.height == 1):
            return ImageRef(data=buf.getvalue(), media_type=f"image/{fmt.lower()}")


def _data_url(image: ImageRef) -> str:
    image = fit_payload(image)
    return f"data:{image.media_type};base64," + base64.b64encode(image.read_bytes()).decode("ascii")


class HttpClient:
    """POST-JSON client with retries, backoff, rate limiting and auth."""

    def __init__(
        self,
        cfg: EndpointConfig,
        transport: httpx.BaseTransport | None = None,
        limiter: RateLimiter | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.cfg = cfg
        self.limiter = limiter if limiter is not None else shared_limiter(cfg)
        self._sleep = sleep
        self._client = httpx.Client(base_url=cfg.base_url, timeout=cfg.timeout, transport=transport)
        self.attempts = 0

    def _headers(self, idempotency_key: str | None) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.cfg.auth_env:
            token = os.environ.get(self.cfg.auth_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        if idempotency_key:
            headers["Idempotency-Key"] = idempotency_key
        return headers

    def post_json(self, path: str, body: dict, idempotency_key: str | None = None) -> Any:
        headers = self._headers(idempotency_key)
        delay = self.cfg.backoff_initial
        last_error = "no attempt made"
        for attempt in range(self.cfg.max_retries + 1):
            if attempt:
                self._sleep(delay)
                delay *= self.cfg.backoff_multiplier
            self.limiter.acquire()
            self.attempts += 1
            try:
                resp = self._client.post(path, json=body, headers=headers)
            except httpx.TransportError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                logger.warning("POST %s failed (attempt %d): %s", path, attempt + 1, last_error)
                continue
            if resp.status_code in RETRYABLE_STATUS:
                last_error = f"HTTP {resp.status_code}"
                logger.warning("POST %s -> %d (attempt %d)", path, resp.status_code, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise BackendRejected(f"HTTP {resp.status_code} from {path}: {resp.text[:200]}")
            try:
                return resp.json()
            except json.JSONDecodeError as exc:
                raise ProtocolError(f"non-JSON response from {path}") from exc
        raise BackendUnavailable(f"{path}: gave up after {self.cfg.max_retries + 1} attempts ({last_error})")

    def get_bytes(self, url: str) -> bytes:
        self.limiter.acquire()
        try:
            resp = self._client.get(url)
        except httpx.TransportError as exc:
            raise BackendUnavailable(f"image fetch failed: {exc}") from exc
        if resp.status_code >= 400:
            raise BackendRejected(f"HTTP {resp.status_code} fetching {url}")
        return resp.content

    def close(self) -> None:
        self._client.close()


def _extract_text(payload: Any) -> str:
    if isinstance(payload, dict):
        choices = payload.get("choices")
        if isinstance(choices, list) and choices:
            msg = choices[0].get("message", {}) if isinstance(choices[0], dict) else {}
            content = msg.get("content")
            if isinstance(content, str):
                return content
            if isinstance(content, list):
                return "".join(p.get("text", "") for p in content if isinstance(p, dict))
        for key in ("text", "output_text", "content"):
            if isinstance(payload.get(key), str):
                return payload[key]
    raise ProtocolError("chat response carries no text")


def http_chat_call(
    cfg: EndpointConfig,
    system_text: str,
    user_text: str,
    images: Sequence[ImageRef] = (),
    client: HttpClient | None = None,
) -> str:
    client = client or HttpClient(cfg)
    content: list[dict] = [{"type": "text", "text": user_text}]
    for image in images:
        content.append({"type": "image", "image_url": _data_url(image)})
    body = {
        "model": cfg.model,
        "messages": [
            {"role": "system", "content": [{"type": "text", "text": system_text}]},
            {"role": "user", "content": content},
        ],
    }
    return _extract_text(client.post_json(cfg.chat_path, body))


def _idempotency_key(body: dict, seed: int | None) -> str:
    blob = json.dumps(body, sort_keys=True) + f"|{seed}"
    return hashlib.sha256(blob.encode()).hexdigest()[:32]


def _decode_image(payload: Any, client: HttpClient, out_path: str | os.PathLike | None) -> ImageRef:
    try:
        item = payload["data"][0]
    except (KeyError, IndexError, TypeError):
        raise ProtocolError("image response has no data[0]") from None
    b64 = item.get("b64_json") or item.get("b64") if isinstance(item, dict) else None
    if b64:
        raw = base64.b64decode(b64)
    elif isinstance(item, dict) and item.get("url"):
        raw = client.get_bytes(item["url"])
    else:
        raise ProtocolError("image response has neither b64 nor url")
    if not raw:
        raise ProtocolError("image response decoded to zero bytes")
    media_type = item.get("media_type") or ("image/jpeg" if raw[:3] == b"\xff\xd8\xff" else "image/png")
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_bytes(raw)
        return ImageRef(path=str(out_path), media_type=media_type)
    return ImageRef(data=raw, media_type=media_type)


def http_generate(
    cfg: EndpointConfig,
    prompt_text: str,
    client: HttpClient | None = None,
    seed: int | None = None,
    out_path: str | os.PathLike | None = None,
) -> ImageRef:
    if not prompt_text or not prompt_text.strip():
        raise BackendRejected("empty prompt")
    client = client or HttpClient(cfg)
    body = {"model": cfg.model, "prompt": prompt_text}
    payload = client.post_json(cfg.generate_path, body, idempotency_key=_idempotency_key(body, seed))
    return _decode_image(payload, client, out_path)


def http_edit(
    cfg: EndpointConfig,
    base: ImageRef,
    instruction: str,
    client: HttpClient | None = None,
    seed: int | None = None,
    out_path: str | os.PathLike | None = None,
) -> ImageRef:
    if not instruction or not instruction.strip():
        raise BackendRejected("empty edit instruction")
    client = client or HttpClient(cfg)
    body = {"model": cfg.model, "prompt": instruction, "image": _data_url(base)}
    payload = client.post_json(cfg.edit_path, body, idempotency_key=_idempotency_key(body, seed))
    return _decode_image(payload, client, out_path)


class HttpGenerator:
    def __init__(self, cfg: EndpointConfig, client: HttpClient | None = None):
        self.cfg = cfg
        self.client = client or HttpClient(cfg)

    def generate(self, prompt_text, sub_prompt=None, seed=None):
        return http_generate(self.cfg, compose_generation_prompt(prompt_text, sub_prompt), self.client, seed)


class HttpEditor:
    def __init__(self, cfg: EndpointConfig, client: HttpClient | None = None):
        self.cfg = cfg
        self.client = client or HttpClient(cfg)

    def edit(self, base, instruction, seed=None):
        return http_edit(self.cfg, base, instruction, self.client, seed)


class HttpChat:
    """Chat model over HTTP; serves both the verifier and critic roles."""

    def __init__(self, cfg: EndpointConfig, client: HttpClient | None = None):
        self.cfg = cfg
        self.client = client or HttpClient(cfg)

    def chat(self, system_text, user_text, images=()):
        return http_chat_call(self.cfg, system_text, user_text, images, self.client)
