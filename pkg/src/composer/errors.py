"""Exception hierarchy shared by the library and the command line."""


class ComposerError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(ComposerError, ValueError):
    exit_code = 2


class DataError(ComposerError, ValueError):
    exit_code = 3


class DivergenceError(ComposerError, FloatingPointError):
    """Raised when training produces a non-finite reward or gradient."""

    exit_code = 4


class UsageError(ComposerError, RuntimeError):
    exit_code = 2


class CheckpointError(ComposerError, IOError):
    exit_code = 3


class InternalError(ComposerError, AssertionError):
    """An invariant that callers cannot violate through the public API broke."""
