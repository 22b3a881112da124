"""Inference-time refinement for text-to-image generation under a fixed call budget.

A run splits a budget of B generator/editor calls into T rounds over M
parallel streams. In every round a critic looks at each stream's latest
image and its verifier report and decides to continue, backtrack, restart
or stop. A synthetic environment with an exact oracle supports offline
study of the depth/breadth trade-off.
"""

from __future__ import annotations

from .core import (
    ALL_ACTIONS,
    Action,
    Budget,
    Candidate,
    CriticDecision,
    EventKind,
    ImageRef,
    RunJournal,
    StreamState,
    TaskPrompt,
    VerifierReport,
    factorizations,
    validate_budget,
)
from .engine import EngineConfig, RefinementResult, apply_action, run_refinement, select_best
from .errors import (
    BackendError,
    ConfigError,
    IterRefineError,
    OracleUnsupported,
    ParseError,
    ReplayMiss,
    RunFailed,
)

__version__ = "0.1.0"

__all__ = [
    "ALL_ACTIONS", "Action", "Budget", "Candidate", "CriticDecision", "EventKind", "ImageRef", "RunJournal",
    "StreamState", "TaskPrompt", "VerifierReport", "factorizations", "validate_budget",
    "EngineConfig", "RefinementResult", "apply_action", "run_refinement", "select_best",
    "BackendError", "ConfigError", "IterRefineError", "OracleUnsupported", "ParseError", "ReplayMiss", "RunFailed",
]
