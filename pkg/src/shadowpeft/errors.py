"""Error categories surfaced by the toolkit.

Every CLI failure maps to one of these so callers can match on the
category string printed to stderr.
"""


class ShadowPeftError(Exception):
    category = "error"


class ConfigError(ShadowPeftError, ValueError):
    """Invalid configuration: bad value, unknown key, mismatched shapes."""

    category = "config"


class RequestError(ShadowPeftError, ValueError):
    """A well-formed but unsatisfiable request (e.g. more points than pixels)."""

    category = "request"


class IngestionError(ShadowPeftError, RuntimeError):
    """Dataset layout problems: missing masks, empty directories."""

    category = "ingestion"


class NumericError(ShadowPeftError, RuntimeError):
    """Non-finite values encountered during a forward/backward pass."""

    category = "numeric"


class CheckpointError(ShadowPeftError, RuntimeError):
    """Checkpoint version or config mismatch."""

    category = "checkpoint"
