"""Exception hierarchy shared by every module."""


class SigmaError(Exception):
    """Base class for all errors raised by sigmaseg."""


class DimensionError(SigmaError, ValueError):
    """Array extents disagree with what an operation requires."""


class ConfigError(SigmaError, ValueError):
    """An invalid hyper-parameter or configuration value."""


class NumericError(SigmaError, ArithmeticError):
    """A non-finite value appeared in an input or intermediate result.

    ``index`` holds the position of the first failure when known.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class StabilityError(SigmaError, ValueError):
    """A state matrix entry would make the recurrence unstable."""


class DomainError(SigmaError, ValueError):
    """A value lies outside the domain of an operation (e.g. a step <= 0)."""


class ParseError(SigmaError, ValueError):
    """Malformed file contents; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset
