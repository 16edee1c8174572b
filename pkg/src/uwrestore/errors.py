"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage/configuration problems
exit 1, file and format problems exit 2, numerical aborts exit 3.
"""


class UsageError(RuntimeError):
    """An API was called in a way its contract forbids."""


class ConfigError(ValueError):
    """A configuration value violates a documented constraint."""


class ShapeError(ValueError):
    """Array dimensions are incompatible with the requested operation."""


class ImageIOError(OSError):
    """A file could not be read or written, or its format is unsupported."""


class NumericsError(ArithmeticError):
    """A non-finite value appeared where the pipeline requires finite data."""
