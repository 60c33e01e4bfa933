"""Exception hierarchy.

Every raised error belongs to one of four categories so the command-line
layer can map failures to a stable exit code: config, data, numeric, io.
"""


class EyePriorError(Exception):
    """Base class for all package errors."""

    category = "config"


class ConfigError(EyePriorError):
    category = "config"


class ShapeMismatchError(EyePriorError):
    """Array shapes do not satisfy an operation's contract."""

    category = "config"


class DataError(EyePriorError):
    """Invalid or inconsistent dataset content."""

    category = "data"


class UnknownIdError(DataError):
    """Lookup of an id that is not present in a codebook or table."""

    def __init__(self, kind, key):
        super().__init__(f"unknown {kind} id: {key!r}")
        self.kind = kind
        self.key = key


class EmptyMaskError(DataError):
    """No usable pixels remain after masking; there is nothing to supervise."""


class NumericError(EyePriorError):
    """Non-finite values or non-convergent numerical procedures."""

    category = "numeric"


class NonFiniteError(NumericError):
    pass


class IoError(EyePriorError):
    category = "io"
