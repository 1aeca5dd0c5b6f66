"""Exception hierarchy for the engine.

Format errors (file parsing) are kept distinct from validation errors
(invariant violations on in-memory data) so callers can map them to
different exit codes.
"""


class EngineError(Exception):
    """Base class for all engine errors."""


class ConfigError(EngineError):
    """Invalid or unusable configuration (unknown keys, missing files)."""


class ValidationError(EngineError):
    """An input or invariant check failed (NaN data, bad shapes, ...)."""


class CapabilityError(EngineError):
    """A component lacks a required capability (e.g. no activation VJP)."""


class FormatError(EngineError):
    """A file does not conform to its container format."""


class HeaderError(FormatError):
    """Malformed or unsupported file header."""


class TruncatedError(FormatError):
    """File ended before the payload announced by its header."""


class DuplicateKeyError(FormatError):
    """A container holds the same (layer, step) key twice."""


class ConvergenceError(EngineError):
    """Iterative solve did not reach tolerance within its budget."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class EditOutOfFrameError(EngineError):
    """The requested 3D edit moved the object outside the view frustum."""
