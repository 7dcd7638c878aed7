"""
Weighted norms of kinetic fields
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.integrate import trapezoid

from ..config import WeightSpec
from ..core.linear_solver import KineticField
from ..core.operator import OperatorSet, weight
from ..core.velocity_grid import quad
from ..utils.exceptions import ValidationError
from ..utils.validators import validate_finite

MAX_EXPONENT = float(np.log(np.finfo(float).max))


@dataclass
class WeightedNorms:
    sup_norm: float
    l2_norm: float
    sup_profile: np.ndarray
    nu_profile: np.ndarray
    micro_nu_profile: np.ndarray


def weighted_norms(
    operator: OperatorSet,
    field: KineticField,
    sigma: float = 0.0,
    weight_spec: Optional[WeightSpec] = None,
) -> WeightedNorms:
    """
    Norms of e^(sigma x) f.

    Returns the sup of |e^(sigma x) w f| over x and v, the L^2 norm over the
    slab, and per x node the sup of |w f|, |f|_nu and |(I - P) f|_nu.

    Raises:
        ValidationError: if e^(sigma x) overflows at the far end of the slab.
    """

    validate_finite(field.values, "field")
    if sigma * field.d >= MAX_EXPONENT:
        raise ValidationError(f"exp({sigma} x) overflows on a slab of length {field.d}")

    w = operator.w if weight_spec is None else weight(operator.grid, weight_spec)
    growth = np.exp(sigma * field.x)
    values = field.values

    sup_profile = np.max(np.abs(values * w[None, :]), axis=1)
    micro = values - operator.project_P(values)
    l2 = np.sqrt(trapezoid(growth ** 2 * quad(operator.grid, values * values), field.x))

    return WeightedNorms(
        sup_norm=float(np.max(growth * sup_profile)),
        l2_norm=float(l2),
        sup_profile=sup_profile,
        nu_profile=np.atleast_1d(operator.nu_norm(values)),
        micro_nu_profile=np.atleast_1d(operator.nu_norm(micro)),
    )
