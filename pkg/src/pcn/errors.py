"""Exception hierarchy.  ``exit_code`` is what the command line maps each family to."""


class PcnError(Exception):
    exit_code = 1


class ConfigError(PcnError):
    exit_code = 2


class DataError(PcnError):
    exit_code = 3


class FormatError(DataError):
    pass


class SamplingError(DataError):
    pass


class GenerationError(DataError):
    pass


class LabelError(DataError):
    pass


class NumericError(PcnError, ArithmeticError):
    exit_code = 4


class DimensionError(PcnError, ValueError):
    exit_code = 4


class ContractError(PcnError, RuntimeError):
    exit_code = 4


class DomainError(PcnError, ValueError):
    exit_code = 4
