"""Role interfaces for generator, editor, verifier, critic and chat models."""

from __future__ import annotations

from typing import Protocol, Sequence, runtime_checkable

from ..core import CriticDecision, ImageRef, TaskPrompt, VerifierReport


@runtime_checkable
class Generator(Protocol):
    def generate(self, prompt_text: str, sub_prompt: str | None = None, seed: int | None = None) -> ImageRef: ...


@runtime_checkable
class Editor(Protocol):
    def edit(self, base: ImageRef, instruction: str, seed: int | None = None) -> ImageRef: ...


@runtime_checkable
class Verifier(Protocol):
    def verify(self, image: ImageRef, task: TaskPrompt) -> VerifierReport: ...


@runtime_checkable
class Critic(Protocol):
    def critique(
        self,
        image: ImageRef,
        task: TaskPrompt,
        history: Sequence[str],
        report: VerifierReport,
        round: int,
        max_rounds: int,
        previous_report: VerifierReport | None = None,
    ) -> CriticDecision: ...


@runtime_checkable
class ChatModel(Protocol):
    """Text completion over a system prompt, a user prompt and attached images."""

    def chat(self, system_text: str, user_text: str, images: Sequence[ImageRef] = ()) -> str: ...


def compose_generation_prompt(prompt_text: str, sub_prompt: str | None) -> str:
    """Prompt sent to a text-to-image model for fresh or restarted generations."""
    if sub_prompt and sub_prompt.strip() and sub_prompt.strip() != prompt_text.strip():
        return f"{prompt_text}\n{sub_prompt.strip()}"
    return prompt_text
