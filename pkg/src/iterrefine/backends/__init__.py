from .base import ChatModel, Critic, Editor, Generator, Verifier, compose_generation_prompt
from .http import (
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
)
from .recording import RecordingBackend, ReplayBackend, Transcript, recording_wrapper, request_key

__all__ = [
    "ChatModel",
    "Critic",
    "Editor",
    "EndpointConfig",
    "Generator",
    "HttpChat",
    "HttpClient",
    "HttpEditor",
    "HttpGenerator",
    "RateLimiter",
    "RecordingBackend",
    "ReplayBackend",
    "Transcript",
    "Verifier",
    "compose_generation_prompt",
    "fit_payload",
    "http_chat_call",
    "http_edit",
    "http_generate",
    "recording_wrapper",
    "request_key",
]
