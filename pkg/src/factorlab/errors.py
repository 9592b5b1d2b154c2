"""Exception hierarchy shared by every stage of the pipeline.

The CLI maps these onto exit codes: input problems exit 1, numerical
failures exit 2, infeasible portfolio programs exit 3.
"""


class FactorLabError(Exception):
    """Base class for all errors raised by factorlab."""

    exit_code = 1


class DataError(FactorLabError):
    """Missing files, schema mismatches, duplicate keys, bad queries."""


class ConfigError(FactorLabError):
    """Invalid or unknown configuration values."""


class InsufficientHistoryError(DataError):
    """Not enough data before a date to build the requested object."""


class UniverseTooSmallError(DataError):
    """Fewer eligible securities than the long/short lists need."""


class NumericalError(FactorLabError):
    """Singular systems, degenerate series, solver non-convergence."""

    exit_code = 2


class NoFeaturesSelectedError(NumericalError):
    """Feature selection ended with an empty feature set."""


class InfeasiblePortfolioError(FactorLabError):
    """The portfolio program has no feasible point for the selection."""

    exit_code = 3
