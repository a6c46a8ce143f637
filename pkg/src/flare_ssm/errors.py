"""Exception types mapped to CLI exit codes."""


class FlareSsmError(Exception):
    exit_code = 1


class ConfigError(FlareSsmError, ValueError):
    exit_code = 2


class DataError(FlareSsmError):
    exit_code = 3


class NumericalError(FlareSsmError):
    exit_code = 4


class MetricUndefined(FlareSsmError, ValueError):
    """A verification score is undefined for the given table or labels."""

    exit_code = 3
