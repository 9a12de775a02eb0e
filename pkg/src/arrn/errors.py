"""Exception hierarchy shared across the package.

The CLI maps these onto stable exit codes, so library code should raise
the most specific class that applies.
"""


class ArrnError(Exception):
    """Base class for all package errors."""


class GridError(ArrnError):
    """Grids are incomparable or otherwise unusable for the requested op."""


class ShapeError(ArrnError):
    """Array shape or feature-count mismatch."""


class FormatError(ArrnError):
    """Malformed container file (bad magic, dtype code, or payload size)."""


class NumericError(ArrnError):
    """Non-finite values where finite arithmetic is required."""


class VerificationError(ArrnError):
    """A numerical verification exceeded its tolerance."""
