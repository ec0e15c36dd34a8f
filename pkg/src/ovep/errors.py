"""Exception hierarchy.

Errors split in two families: configuration problems (bad partition, bad
lengths, too few trials) and numerical failures (loss of positive
definiteness, non-finite precisions).  The CLI maps them to exit codes 2
and 3 respectively.
"""


class OvepError(Exception):
    """Base class for all package errors."""


class ConfigError(OvepError, ValueError):
    """Invalid user-facing configuration."""


class NumericalError(OvepError, ArithmeticError):
    """A numerical precondition failed during computation."""


class NotPositiveDefinite(NumericalError):
    pass


class NotPsd(NumericalError):
    pass


class DegeneratePrecision(NumericalError):
    pass


class InvalidPartition(ConfigError):
    pass


class LengthMismatch(ConfigError):
    pass


class InsufficientTrials(ConfigError):
    pass


class NotConverged(OvepError):
    """Fixed-point verification was requested on a state that has not converged."""


class StaleState(OvepError):
    """Diagnostics requested on a state whose combined message was not refreshed."""
