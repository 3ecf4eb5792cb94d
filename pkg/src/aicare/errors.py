"""Exception types shared across the toolkit.

Each class carries the process exit code the CLI maps it to, so command
handlers can report distinct failure classes without a big lookup table.
"""


class AiCareError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class UsageError(AiCareError):
    """An API or command was called in a way its contract forbids."""

    exit_code = 2


class DimensionError(UsageError):
    """Array shapes are inconsistent with the operation's requirements."""


class DomainError(UsageError):
    """Input values are outside the operation's domain (empty, out of range)."""


class EmptyMaskError(DomainError):
    """A masked reduction was asked for but every element is masked out."""


class DegenerateInputError(DomainError):
    """A ranking metric needs both classes present and got only one."""


class EmptyCurveError(DomainError):
    """A value curve was requested over zero importance records."""


class InsufficientDataError(DomainError):
    """Too few populated bins to classify a curve shape."""


class ParseError(AiCareError):
    """A file could not be parsed. Carries location context in the message."""

    exit_code = 3

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}: "
        if line is not None:
            loc = f"{loc}line {line}: "
        super().__init__(f"{loc}{message}")
        self.path = path
        self.line = line


class ConfigError(AiCareError):
    """A configuration value is invalid or inconsistent."""

    exit_code = 4


class IntegrityError(AiCareError):
    """Parsed data violates a cross-record consistency rule."""

    exit_code = 5


class NumericError(AiCareError):
    """A numeric computation produced or met a non-finite value."""

    exit_code = 7
