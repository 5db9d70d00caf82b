"""Exception types shared across the toolkit.

The CLI maps :class:`ValidationError` to exit code 2 and
:class:`IncompatibilityError` to exit code 3.
"""


class DreamkitError(Exception):
    """Base class for toolkit errors."""


class ValidationError(DreamkitError, ValueError):
    """Malformed input: bad shapes, corrupted files, out-of-range settings."""


class IncompatibilityError(DreamkitError, ValueError):
    """Two artifacts that must agree (C, N, m, grid hash) do not."""


class NonFiniteError(DreamkitError, FloatingPointError):
    """A NaN or Inf showed up in an output, loss or gradient."""
