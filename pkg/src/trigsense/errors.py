"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
CapabilityMissingError -> 4; everything else is an ordinary failure.
"""


class ToolkitError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(ToolkitError, ValueError):
    """An argument violates an operation's precondition."""


class CapabilityMissingError(ToolkitError):
    """The model backend does not support the requested operation."""


class ConfigError(ToolkitError):
    """A configuration value is missing, malformed, or out of domain."""


class DataError(ToolkitError):
    """A corpus or artifact file is unreadable or malformed."""


class InternalError(ToolkitError):
    """Pipeline bookkeeping broke an internal contract (a bug)."""


class UndefinedResultError(ToolkitError):
    """The requested statistic is undefined for the given input."""
