"""Exception hierarchy shared across the package."""


class IterRefineError(Exception):
    """Base class for all package errors."""


class ConfigError(IterRefineError, ValueError):
    """Invalid configuration (budget factorization, config file, params)."""


class JournalFinalized(IterRefineError):
    """An event was appended after the run's Selected event."""


class JournalStorageError(IterRefineError):
    """The journal could not be persisted."""


class BackendError(IterRefineError):
    """Any failure raised by a model backend."""


class BackendUnavailable(BackendError):
    """Retries exhausted on transport errors, 5xx or 429."""


class BackendRejected(BackendError):
    """Non-retryable rejection (4xx or local validation)."""


class ProtocolError(BackendError):
    """Response did not match the expected wire schema."""


class ReplayMiss(BackendError):
    """Replay backend has no recorded response for a request."""


class ParseError(IterRefineError, ValueError):
    """Model text output did not match the expected grammar."""


class SelectionImpossible(IterRefineError):
    """No verified candidate exists to select from."""


class RunFailed(IterRefineError):
    """Every stream failed; carries the journal for inspection."""

    def __init__(self, message, journal=None):
        super().__init__(message)
        self.journal = journal


class OracleUnsupported(IterRefineError):
    """The exact oracle cannot handle the requested configuration."""


class ProposerDone(IterRefineError):
    """The scene has no objects left to remove."""
