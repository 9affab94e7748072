"""Exception hierarchy shared across the package."""


class StepTCNError(Exception):
    """Base class for all package errors."""


class DimensionError(StepTCNError, ValueError):
    pass


class LabelError(StepTCNError, ValueError):
    pass


class ContractError(StepTCNError, ValueError):
    pass


class NumericError(StepTCNError, ArithmeticError):
    """Non-finite values appeared in a computation."""


class ConfigError(StepTCNError, ValueError):
    pass


class DataError(StepTCNError, ValueError):
    pass


class FormatError(DataError):
    """A binary file had a bad magic, version or truncated payload."""


class SequencingError(StepTCNError, RuntimeError):
    """Feature buffer fed frames from the wrong video."""
