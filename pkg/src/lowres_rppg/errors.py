"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: configuration/format/contract/IO
problems exit 2, numeric failures exit 3.
"""


class RppgError(Exception):
    """Base class for all package errors."""


class ContractViolation(RppgError, ValueError):
    """An operation was called with arguments that break its preconditions."""


class ConfigurationError(RppgError, ValueError):
    """A configuration value is invalid or inconsistent."""


class FormatError(RppgError, ValueError):
    """A file does not follow its binary or text format."""


class ChecksumError(FormatError):
    pass


class TruncatedFileError(RppgError, OSError):
    """A payload ended before the size declared in its header."""

    def __init__(self, path, offset: int, expected: int):
        self.path = str(path)
        self.offset = offset
        self.expected = expected
        super().__init__(
            f"{self.path}: truncated payload at byte offset {offset} "
            f"(header declares {expected} payload bytes)"
        )


class NumericError(RppgError, ArithmeticError):
    """A non-finite value or an impossible solve was encountered."""
