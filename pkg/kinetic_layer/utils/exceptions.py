"""
Custom exceptions for the kinetic layer solver
"""

from typing import Dict, List, Optional, Sequence


class KineticLayerError(Exception):
    """Base exception for kinetic layer errors."""
    pass


class ValidationError(KineticLayerError):
    """Validation errors."""
    pass


class ConfigurationError(KineticLayerError):
    """Configuration errors."""
    pass


class GridError(KineticLayerError):
    """Velocity or slab grid construction errors."""
    pass


class OperatorAssemblyError(KineticLayerError):
    """Collision operator assembly produced an invalid discretization."""
    pass


class ProjectionError(KineticLayerError):
    """Input expected in the orthogonal complement of the null space was not."""

    def __init__(self, message: str, component_norm: float):
        super().__init__(f"{message} (|Ph| = {component_norm:.3e})")
        self.component_norm = component_norm


class TransportError(KineticLayerError):
    """Characteristic sweep errors."""
    pass


class CompatibilityError(KineticLayerError):
    """Boundary data violates the flux compatibility conditions."""

    def __init__(self, message: str, moments: Sequence[float]):
        formatted = ", ".join(f"{m:.3e}" for m in moments)
        super().__init__(f"{message}: moments = [{formatted}]")
        self.moments = list(moments)


class ContractionError(KineticLayerError):
    """A fixed-point iteration failed to contract."""

    def __init__(self, message: str, ratios: Optional[List[float]] = None):
        super().__init__(message)
        self.ratios = list(ratios or [])


class CauchyError(KineticLayerError):
    """A limiting sequence did not behave like a Cauchy sequence."""

    def __init__(self, message: str, history: Optional[Dict[str, List[float]]] = None):
        super().__init__(message)
        self.history = dict(history or {})


class ArtifactError(KineticLayerError):
    """Reading or writing run artifacts failed."""
    pass
