"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: validation failures -> 2, file/I-O
failures -> 3, numeric failures -> 4.
"""


class ValidationError(ValueError):
    """A domain object or configuration violates its contract."""


class FileFormatError(IOError):
    """A persisted file is malformed, truncated, or the wrong version."""


class NumericError(ArithmeticError):
    """A numeric computation produced non-finite or undefined results."""


class InternalError(RuntimeError):
    """An internal invariant that should be unreachable was violated."""
