"""Shared exception types."""


class FtkError(Exception):
    """Base class for all package errors."""


class DimensionMismatchError(FtkError):
    pass


class MatrixMarketError(FtkError):
    pass


class InvalidPartitionError(FtkError):
    pass


class SingularDiagonalError(FtkError):
    pass


class FactorBreakdownError(FtkError):
    """Zero pivot in ILU(0) or nonpositive pivot in SAINV, rank deficiency in SPAI."""


class BreakdownError(FtkError):
    """Indefinite curvature or singular Gram block inside a Krylov solve."""


class DivergenceError(FtkError):
    """Non-finite value encountered in a solver recurrence."""


class ConfigError(FtkError):
    pass


class RecoveryFailedError(FtkError):
    pass
