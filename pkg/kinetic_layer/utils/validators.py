"""
Validation utilities for the kinetic layer solver
"""

import numpy as np

from .exceptions import ValidationError


def validate_per_node(values: np.ndarray, node_count: int, name: str = "values") -> bool:
    """Validate that the trailing axis of an array matches the velocity node count."""

    if values.ndim == 0:
        raise ValidationError(f"{name} must be per-node values, got a scalar")

    if values.shape[-1] != node_count:
        raise ValidationError(
            f"{name} has {values.shape[-1]} entries per row but the grid has {node_count} nodes"
        )

    return True


def validate_finite(values: np.ndarray, name: str = "values") -> bool:
    """Validate that an array contains no NaN or infinite entries."""

    if not np.all(np.isfinite(values)):
        bad = int(np.size(values) - np.count_nonzero(np.isfinite(values)))
        raise ValidationError(f"{name} contains {bad} non-finite entries")

    return True


def validate_slab_nodes(x_nodes: np.ndarray, d: float) -> bool:
    """Validate interior slab nodes: strictly increasing and inside (0, d)."""

    if d < 1.0:
        raise ValidationError(f"Slab length must be at least 1, got {d}")

    if x_nodes.size == 0:
        raise ValidationError("Slab needs at least one interior node")

    if np.any(np.diff(x_nodes) <= 0):
        raise ValidationError("Slab nodes must be strictly increasing")

    if x_nodes[0] <= 0.0 or x_nodes[-1] >= d:
        raise ValidationError(f"Slab nodes must lie strictly inside (0, {d})")

    return True
