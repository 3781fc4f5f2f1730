"""Exception hierarchy shared by every module.

Each class carries an ``exit_code`` so the command line can map failures to
stable process exit statuses.
"""


class SpiderError(Exception):
    exit_code = 1


class UsageError(SpiderError, ValueError):
    """An API was called with arguments that violate its contract."""

    exit_code = 2


class DimensionError(UsageError):
    exit_code = 2


class NumericError(SpiderError, ArithmeticError):
    """A forward pass produced NaN or Inf."""

    exit_code = 5


class AggregationError(SpiderError):
    exit_code = 6


class PartitionError(SpiderError):
    exit_code = 4


class SplitError(SpiderError):
    exit_code = 4


class FormatError(SpiderError):
    """Malformed dataset file."""

    exit_code = 3


class ManifestError(SpiderError):
    """Invalid experiment manifest; message names the key and line."""

    exit_code = 2

    def __init__(self, message, key=None, line=None):
        where = []
        if key is not None:
            where.append(f"key {key!r}")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.key = key
        self.line = line


class InvariantError(SpiderError, AssertionError):
    """Internal state that the algorithms guarantee cannot occur."""

    exit_code = 7
