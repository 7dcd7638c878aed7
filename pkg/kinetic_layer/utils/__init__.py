"""
Utility modules for the kinetic layer solver
"""

from .exceptions import ConfigurationError, KineticLayerError, ValidationError
from .logger import get_logger, run_context, setup_logging, stage_context
from .validators import validate_finite, validate_per_node

__all__ = [
    "setup_logging",
    "get_logger",
    "run_context",
    "stage_context",
    "KineticLayerError",
    "ConfigurationError",
    "ValidationError",
    "validate_finite",
    "validate_per_node",
]
