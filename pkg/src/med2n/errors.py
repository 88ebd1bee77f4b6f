"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so each family carries one.
"""


class Med2nError(Exception):
    exit_code = 1


class DimensionError(Med2nError, ValueError):
    """Operand shapes are incompatible."""


class LabelError(Med2nError, ValueError):
    """A class label falls outside the valid range."""


class DistributionError(Med2nError, ValueError):
    """An array that must be a probability distribution is not one."""


class ParameterError(Med2nError, ValueError):
    """A scalar hyperparameter is outside its domain (e.g. tau <= 0)."""


class ConfigError(Med2nError, ValueError):
    exit_code = 2


class EpisodeError(Med2nError, ValueError):
    """The support set does not contain every class the expected number of times."""


class SamplingError(Med2nError, ValueError):
    """A split cannot supply the requested episode."""


class ContractError(Med2nError, RuntimeError):
    """A runtime precondition between components was violated."""


class MissingPrerequisiteError(Med2nError, FileNotFoundError):
    exit_code = 3


class NumericError(Med2nError, FloatingPointError):
    exit_code = 4


class CheckpointError(Med2nError, ValueError):
    exit_code = 2
