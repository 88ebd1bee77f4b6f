"""Cross-domain few-shot learning with multi-expert distillation and domain decomposition."""

from .errors import (CheckpointError, ConfigError, ContractError, DimensionError, DistributionError, EpisodeError,
                     LabelError, Med2nError, MissingPrerequisiteError, NumericError, ParameterError, SamplingError)

__version__ = "0.1.0"

__all__ = ["CheckpointError", "ConfigError", "ContractError", "DimensionError", "DistributionError", "EpisodeError",
           "LabelError", "Med2nError", "MissingPrerequisiteError", "NumericError", "ParameterError",
           "SamplingError", "__version__"]
