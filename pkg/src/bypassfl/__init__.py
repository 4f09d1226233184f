"""Heterogeneous-model personalized federated learning through a shared global bypass."""

from .config import ExperimentConfig, parse_config
from .errors import (BypassFLError, ConfigError, DomainError, IntegrityError, NumericError,
                     StructuralError, UsageError)

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "parse_config", "BypassFLError", "ConfigError", "DomainError",
    "IntegrityError", "NumericError", "StructuralError", "UsageError",
]
