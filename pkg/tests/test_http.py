from __future__ import annotations

import base64
import io
import json

import httpx
import pytest

from iterrefine.backends.http import (
    EndpointConfig,
    HttpChat,
    HttpClient,
    HttpEditor,
    HttpGenerator,
    RateLimiter,
    fit_payload,
    http_chat_call,
    http_edit,
    http_generate,
    shared_limiter,
)
from iterrefine.core import ImageRef
from iterrefine.errors import BackendRejected, BackendUnavailable, ConfigError, ProtocolError

PNG = b"\x89PNG\r\n\x1a\nfake"


def cfg(**kw):
    base = dict(base_url="https://models.test/v1", model="m", max_retries=3, backoff_initial=0.5, auth_env="TEST_TOKEN")
    base.update(kw)
    return EndpointConfig(**base)


def chat_reply(text):
    return httpx.Response(200, json={"choices": [{"message": {"content": text}}]})


def client_for(handler, c=None, sleeps=None):
    c = c or cfg()
    return HttpClient(c, transport=httpx.MockTransport(handler), limiter=RateLimiter(None),
                      sleep=(sleeps.append if sleeps is not None else lambda s: None))


def test_endpoint_config_validation():
    with pytest.raises(ConfigError):
        cfg(timeout=0)
    with pytest.raises(ConfigError):
        cfg(max_retries=-1)
    with pytest.raises(ConfigError):
        EndpointConfig.from_dict({"base_url": "x", "model": "m", "bogus": 1})


def test_retries_transient_errors_with_backoff():
    statuses = iter([503, 503, 200])
    sleeps = []

    def handler(request):
        code = next(statuses)
        return chat_reply("ok") if code == 200 else httpx.Response(code)

    client = client_for(handler, sleeps=sleeps)
    assert http_chat_call(cfg(), "sys", "user", client=client) == "ok"
    assert client.attempts == 3
    assert sleeps == [0.5, 1.0]


def test_transport_errors_are_retried_then_give_up():
    def handler(request):
        raise httpx.ConnectError("refused")

    client = client_for(handler, c=cfg(max_retries=2))
    with pytest.raises(BackendUnavailable):
        http_chat_call(cfg(), "s", "u", client=client)
    assert client.attempts == 3


def test_401_is_rejected_without_retry():
    def handler(request):
        return httpx.Response(401, text="bad token for this model")

    client = client_for(handler)
    with pytest.raises(BackendRejected, match="bad token"):
        http_chat_call(cfg(), "s", "u", client=client)
    assert client.attempts == 1


def test_chat_wire_shape_and_auth(monkeypatch):
    monkeypatch.setenv("TEST_TOKEN", "sekret")
    seen = {}

    def handler(request):
        seen["auth"] = request.headers.get("authorization")
        seen["path"] = request.url.path
        seen["body"] = json.loads(request.content)
        return chat_reply("hello")

    image = ImageRef(data=PNG, media_type="image/png")
    assert HttpChat(cfg(), client_for(handler)).chat("sys", "usr", [image]) == "hello"
    assert seen["auth"] == "Bearer sekret"
    assert seen["path"] == "/v1/chat/completions"
    body = seen["body"]
    assert body["model"] == "m"
    assert [m["role"] for m in body["messages"]] == ["system", "user"]
    parts = body["messages"][1]["content"]
    assert parts[0] == {"type": "text", "text": "usr"}
    assert parts[1]["type"] == "image"
    assert parts[1]["image_url"] == "data:image/png;base64," + base64.b64encode(PNG).decode()


def test_chat_response_without_text_is_protocol_error():
    with pytest.raises(ProtocolError):
        http_chat_call(cfg(), "s", "u", client=client_for(lambda r: httpx.Response(200, json={"nope": 1})))


def test_generate_writes_file_and_sends_idempotency_key(tmp_path):
    keys = []

    def handler(request):
        keys.append(request.headers.get("idempotency-key"))
        if len(keys) == 1:
            return httpx.Response(502)
        return httpx.Response(200, json={"data": [{"b64_json": base64.b64encode(PNG).decode()}]})

    out = tmp_path / "run" / "images" / "0_1.png"
    ref = http_generate(cfg(), "a cat", client=client_for(handler), seed=7, out_path=out)
    assert out.read_bytes() == PNG and out.stat().st_size > 0
    assert ref.path == str(out)
    # the retried request carries the same key, so the server can dedupe it
    assert keys[0] and keys[0] == keys[1]


def test_generate_key_depends_on_seed():
    keys = []

    def handler(request):
        keys.append(request.headers["idempotency-key"])
        return httpx.Response(200, json={"data": [{"b64": base64.b64encode(PNG).decode()}]})

    client = client_for(handler)
    http_generate(cfg(), "a cat", client=client, seed=1)
    http_generate(cfg(), "a cat", client=client, seed=2)
    assert keys[0] != keys[1]


def test_empty_prompt_rejected_before_network():
    calls = []
    client = client_for(lambda r: calls.append(r) or httpx.Response(200))
    with pytest.raises(BackendRejected):
        http_generate(cfg(), "   ", client=client)
    with pytest.raises(BackendRejected):
        http_edit(cfg(), ImageRef(data=PNG), "", client=client)
    assert calls == []


def test_missing_image_fields_is_protocol_error():
    client = client_for(lambda r: httpx.Response(200, json={"data": [{"revised_prompt": "x"}]}))
    with pytest.raises(ProtocolError):
        http_generate(cfg(), "a cat", client=client)
    client = client_for(lambda r: httpx.Response(200, json={"images": []}))
    with pytest.raises(ProtocolError):
        http_generate(cfg(), "a cat", client=client)


def test_url_response_is_fetched():
    def handler(request):
        if request.method == "GET":
            return httpx.Response(200, content=PNG)
        return httpx.Response(200, json={"data": [{"url": "https://cdn.test/img.png"}]})

    assert http_generate(cfg(), "a cat", client=client_for(handler)).read_bytes() == PNG


def test_edit_sends_base_image_and_adapters_compose_prompt():
    bodies = []

    def handler(request):
        bodies.append((request.url.path, json.loads(request.content)))
        return httpx.Response(200, json={"data": [{"b64_json": base64.b64encode(PNG).decode()}]})

    client = client_for(handler)
    HttpGenerator(cfg(), client).generate("a cat", "make it orange", seed=3)
    HttpEditor(cfg(), client).edit(ImageRef(data=PNG), "add a hat", seed=3)
    assert bodies[0][0].endswith("/images/generations") and bodies[0][1]["prompt"] == "a cat\nmake it orange"
    assert bodies[1][0].endswith("/images/edits") and bodies[1][1]["image"].startswith("data:image/png;base64,")


def test_rate_limiter_delays_rather_than_drops():
    now = [0.0]
    sleeps = []

    def sleep(s):
        sleeps.append(s)
        now[0] += s

    limiter = RateLimiter(10, clock=lambda: now[0], sleep=sleep)
    waits = []
    for _ in range(11):
        waits.append(limiter.acquire())
        now[0] += 1.0
    assert waits[:10] == [0.0] * 10
    # the 11th call starts at t=10 and waits until the first slot expires at t=60
    assert waits[10] == pytest.approx(50.0)
    assert limiter.total_wait == pytest.approx(50.0)


def test_limiter_is_shared_per_endpoint():
    a, b = cfg(requests_per_minute=5), cfg(requests_per_minute=5)
    assert shared_limiter(a) is shared_limiter(b)
    assert shared_limiter(a) is not shared_limiter(cfg(requests_per_minute=6))


def test_large_images_are_downscaled():
    from PIL import Image

    buf = io.BytesIO()
    Image.frombytes("RGB", (256, 256), bytes(range(256)) * 768).save(buf, format="PNG")
    big = ImageRef(data=buf.getvalue(), media_type="image/png")
    small = fit_payload(big, limit=len(big.data) // 3)
    assert len(small.read_bytes()) <= len(big.data) // 3
    assert Image.open(io.BytesIO(small.read_bytes())).size[0] < 256
    assert fit_payload(big) is big
