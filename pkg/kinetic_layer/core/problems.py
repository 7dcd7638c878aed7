"""
Built-in boundary data and source families
"""

from abc import ABC, abstractmethod
from pathlib import Path

import numpy as np
from scipy.interpolate import interp1d

from ..config import BoundarySpec, RunConfig, SourceSpec
from ..utils.exceptions import ValidationError
from ..utils.logger import get_logger
from ..utils.validators import validate_finite, validate_per_node
from .linear_solver import LinearProblem
from .operator import OperatorSet

logger = get_logger(__name__)


class SourceField(ABC):
    """Source term S(x, v) evaluated on arrays of x nodes."""

    @abstractmethod
    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Return values of shape (len(x), N)."""
        pass


class ZeroSource(SourceField):
    def __init__(self, node_count: int):
        self.node_count = node_count

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.zeros((np.size(x), self.node_count))


class DecayingMomentSource(SourceField):
    """S(x, v) = exp(-rate x) q(v) for a fixed profile q."""

    def __init__(self, profile: np.ndarray, rate: float):
        self.profile = np.asarray(profile, dtype=float)
        self.rate = rate

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.exp(-self.rate * np.asarray(x, dtype=float))[:, None] * self.profile[None, :]


class TabulatedSource(SourceField):
    """Source given on x samples, linear in between and zero beyond the last sample."""

    def __init__(self, x: np.ndarray, values: np.ndarray):
        x = np.asarray(x, dtype=float)
        values = np.asarray(values, dtype=float)
        if values.ndim != 2 or values.shape[0] != x.size:
            raise ValidationError(f"Tabulated source values {values.shape} do not match {x.size} x samples")
        if x.size < 2 or np.any(np.diff(x) <= 0):
            raise ValidationError("Tabulated source needs at least two strictly increasing x samples")
        validate_finite(values, "tabulated source")
        self.x = x
        self.values = values
        self._interp = interp1d(x, values, axis=0, bounds_error=False, fill_value=0.0)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self._interp(np.asarray(x, dtype=float))


def _scaled(shape: np.ndarray, w: np.ndarray, amplitude: float) -> np.ndarray:
    peak = float(np.max(np.abs(w * shape)))
    if amplitude == 0.0 or peak == 0.0:
        return np.zeros_like(shape)
    return shape * (amplitude / peak)


def build_boundary(operator: OperatorSet, spec: BoundarySpec) -> np.ndarray:
    """Boundary data f_b per node, scaled so that sup |w f_b| equals the amplitude.

    Raises:
        ValidationError: if tabulated data has the wrong length or lives on v3 >= 0.
    """

    grid = operator.grid
    rel = grid.relative
    incoming = (grid.v3 < 0.0).astype(float)
    gaussian = np.exp(-grid.speed2) * incoming

    if spec.family == "zero":
        return np.zeros(grid.size)
    if spec.family == "v1v2_gaussian":
        return _scaled(rel[:, 0] * rel[:, 1] * gaussian, operator.w, spec.amplitude)
    if spec.family == "v1_gaussian":
        return _scaled(rel[:, 0] * gaussian, operator.w, spec.amplitude)

    values = np.load(Path(spec.path), allow_pickle=False).astype(float)
    validate_per_node(values, grid.size, "tabulated boundary data")
    validate_finite(values, "tabulated boundary data")
    if values.ndim != 1:
        raise ValidationError(f"Tabulated boundary data must be one value per node, got shape {values.shape}")
    if np.any(values[grid.v3 >= 0.0] != 0.0):
        raise ValidationError("Tabulated boundary data must vanish on nodes with v3 >= 0")
    return values


def build_source(operator: OperatorSet, spec: SourceSpec, sigma0: float) -> SourceField:
    """Source field with sup |nu^-1 w exp(sigma0 x) S| equal to the amplitude.

    Raises:
        ValidationError: if a decaying source decays slower than sigma0.
    """

    grid = operator.grid
    if spec.family == "zero" or (spec.family == "decaying_moment" and spec.amplitude == 0.0):
        return ZeroSource(grid.size)

    if spec.family == "decaying_moment":
        if spec.rate < sigma0:
            raise ValidationError(f"Source rate {spec.rate} must be at least sigma0 = {sigma0}")
        q = operator.moments[spec.moment]
        q = q - operator.project_P(q)
        return DecayingMomentSource(_scaled(q, operator.w / operator.nu, spec.amplitude), spec.rate)

    try:
        with np.load(Path(spec.path), allow_pickle=False) as data:
            x, values = data["x"], data["values"]
    except (OSError, KeyError, ValueError) as e:
        raise ValidationError(f"Cannot read tabulated source {spec.path}: {e}") from e
    validate_per_node(values, grid.size, "tabulated source")
    return TabulatedSource(x, values)


def build_problem(operator: OperatorSet, config: RunConfig) -> LinearProblem:
    """Linear problem described by the ``problem`` section of a run config."""

    boundary = build_boundary(operator, config.problem.boundary)
    source = build_source(operator, config.problem.source, config.solver.sigma0)
    logger.info(
        f"Problem: boundary '{config.problem.boundary.family}', source '{config.problem.source.family}'"
    )
    return LinearProblem(boundary=boundary, source=source, sigma0=config.solver.sigma0, weight=config.weight)
