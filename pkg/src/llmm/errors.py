"""Exception types shared across the package.

Each class maps to one failure family so callers (and the CLI exit codes)
can tell bad input data apart from numeric blowups or misconfiguration.
"""


class LLMMError(Exception):
    """Base class for all package errors."""


class ShapeError(LLMMError, ValueError):
    pass


class NumericError(LLMMError, ArithmeticError):
    pass


class DataError(LLMMError, ValueError):
    pass


class ConfigError(LLMMError, ValueError):
    pass


class ContractError(LLMMError, RuntimeError):
    """A caller broke an operation's precondition (e.g. non-scalar loss)."""


class MetricUndefinedError(LLMMError, ValueError):
    """The metric has no defined value for the given labels."""
