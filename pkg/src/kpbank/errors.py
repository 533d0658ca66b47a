"""Exception hierarchy. Each class maps to one CLI exit code."""


class KpBankError(Exception):
    exit_code = 1


class ConfigError(KpBankError):
    exit_code = 2


class DataIOError(KpBankError):
    exit_code = 3


class NumericError(KpBankError, ArithmeticError):
    exit_code = 4


class ContractError(KpBankError, ValueError):
    exit_code = 5


class DomainError(ContractError):
    """Coordinate or cell outside the grid/image."""


class DegenerateVectorError(ContractError):
    """A vector too close to zero to normalize."""


class InitError(ContractError):
    pass


class SamplingError(ContractError):
    pass


class GenerationError(KpBankError):
    exit_code = 6


class UndefinedMetricError(ContractError):
    pass


class CheckpointError(DataIOError):
    """Checkpoint missing, corrupt, or incompatible with the requested setup."""


class ToleranceError(KpBankError):
    """An oracle comparison fell outside its configured tolerance."""

    exit_code = 7
