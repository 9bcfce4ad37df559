"""Exception hierarchy shared by every module."""


class EenasError(Exception):
    """Base class for errors raised by this package."""


class ContractViolation(EenasError, ValueError):
    """A documented precondition of an operation was not met."""


class ShapeError(EenasError, ValueError):
    """An input was rejected because its dimensions do not fit the operation."""


class NumericDomainError(EenasError, ValueError):
    """An input contained NaN or infinite values."""


class MalformedFileError(EenasError, ValueError):
    """A binary or text artifact could not be parsed."""

    def __init__(self, message, offset=None, line=None):
        super().__init__(message)
        self.offset = offset
        self.line = line


class ConfigError(EenasError, ValueError):
    """A run configuration failed schema validation.

    ``problems`` lists one human-readable entry per offending key.
    """

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))
