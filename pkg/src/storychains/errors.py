"""Exception hierarchy shared across the package."""

from __future__ import annotations


class StoryChainsError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(StoryChainsError):
    """A domain invariant was violated.

    `rule` is a short machine-readable name; `entity_id` identifies the
    offending object when known.
    """

    def __init__(self, rule: str, message: str, entity_id: str | None = None):
        super().__init__(message)
        self.rule = rule
        self.entity_id = entity_id


class ParseError(StoryChainsError):
    """Annotated story text could not be parsed.

    `byte_offset` points at the offending byte in the annotated input.
    """

    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (byte {byte_offset})")
        self.byte_offset = byte_offset


class DocumentError(StoryChainsError):
    """A corpus document is unreadable or structurally malformed."""

    def __init__(self, path: str, message: str, byte_offset: int | None = None):
        where = f"{path}" if byte_offset is None else f"{path} (byte {byte_offset})"
        super().__init__(f"{where}: {message}")
        self.path = path
        self.byte_offset = byte_offset


class SimilarityError(StoryChainsError):
    """A similarity lookup could not be resolved (missing pair or embedding)."""


class DriftError(StoryChainsError):
    """Annotated output does not reproduce the original text."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (first divergence at offset {offset})")
        self.offset = offset


class ResponseFormatError(StoryChainsError):
    """A model response did not follow the required output contract."""

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class UnscorableTextError(StoryChainsError):
    """Text has no scorable content (no words or sentences)."""


class TransportError(StoryChainsError):
    """A request to the chat endpoint failed."""

    def __init__(self, message: str, transient: bool = True):
        super().__init__(message)
        self.transient = transient


class AuthenticationFailed(TransportError):
    def __init__(self, message: str):
        super().__init__(message, transient=False)


class TransportTimeout(TransportError):
    def __init__(self, message: str):
        super().__init__(message, transient=True)


class RetriesExhausted(TransportError):
    def __init__(self, message: str):
        super().__init__(message, transient=False)
