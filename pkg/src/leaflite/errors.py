"""Exception hierarchy shared by the library and the CLI.

Each family carries the process exit code the CLI maps it to:
0 ok, 2 usage, 3 I/O, 4 format/shape, 5 numeric.
"""


class LeafliteError(Exception):
    exit_code = 1


class UsageError(LeafliteError):
    exit_code = 2


class InputError(LeafliteError):
    """Missing/unreadable files and directories."""

    exit_code = 3


class FormatError(LeafliteError):
    """Malformed containers, manifests, or weight files."""

    exit_code = 4


class WeightFormatError(FormatError):
    """Weight-file parse failure; ``kind`` is one of
    magic, version, truncated, checksum, missing."""

    def __init__(self, kind, message):
        super().__init__(message)
        self.kind = kind


class ShapeError(FormatError):
    """Tensor dimension mismatch; message names both shapes."""


class NumericError(LeafliteError):
    """Non-finite values where finite ones are required."""

    exit_code = 5
