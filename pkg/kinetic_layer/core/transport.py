"""
Characteristic transport on the slab [0, d] with specular reflection.

Each velocity node is an independent ODE ``v3 h' + (eps + nu) h = rhs`` in x;
the two mirror nodes of a pair are coupled only through the walls. The
right side is interpolated linearly between x nodes and integrated exactly
against the exponential, and the wall coupling is summed bounce by bounce
along the back-time cycle.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from ..utils.exceptions import TransportError, ValidationError
from ..utils.logger import get_logger
from ..utils.validators import validate_finite, validate_per_node, validate_slab_nodes
from .velocity_grid import VelocityGrid

logger = get_logger(__name__)

MAX_BOUNCES = 100000


@dataclass(frozen=True)
class SlabGrid:
    """Interior x nodes of (0, d); the walls are appended by ``all_nodes``."""

    d: float
    x_nodes: np.ndarray

    def __post_init__(self):
        validate_slab_nodes(np.asarray(self.x_nodes, dtype=float), self.d)

    @property
    def all_nodes(self) -> np.ndarray:
        return np.concatenate([[0.0], self.x_nodes, [self.d]])

    @property
    def spacing(self) -> np.ndarray:
        return np.diff(self.all_nodes)

    @property
    def size(self) -> int:
        """Number of stored x points, walls included."""
        return self.x_nodes.size + 2


def default_slab(
    d: float,
    spacing_fraction: float = 0.02,
    max_spacing: Optional[float] = None,
    refine_ratio: float = 0.7,
    refine_levels: int = 8,
) -> SlabGrid:
    """Uniform nodes with spacing <= spacing_fraction * d plus geometric wall refinement."""

    h = spacing_fraction * d
    if max_spacing is not None:
        h = min(h, max_spacing)
    cells = int(np.ceil(d / h - 1e-12))
    uniform = np.linspace(0.0, d, cells + 1)[1:-1]
    h = d / cells
    refined = h * refine_ratio ** np.arange(1, refine_levels + 1)
    nodes = np.unique(np.concatenate([refined, uniform]))
    return SlabGrid(d=float(d), x_nodes=nodes)


def backward_exit(x: float, v3: float, d: float) -> Tuple[float, float]:
    """Backward exit time and wall position of the straight line through (x, v3).

    Raises:
        TransportError: for grazing velocities or positions outside [0, d].
    """

    if v3 == 0.0:
        raise TransportError("Grazing velocity v3 = 0 has no backward exit")
    if not 0.0 <= x <= d:
        raise TransportError(f"Position {x} outside the slab [0, {d}]")

    if v3 > 0.0:
        return x / v3, 0.0
    return (d - x) / abs(v3), d


@dataclass
class BackCycle:
    """Back-time cycle: points ``(t_k, x_k, v_k)`` for k = 0..k_max.

    Leg k runs backwards from point k to point k+1 with velocity ``v_k``.
    """

    times: List[float] = field(default_factory=list)
    positions: List[float] = field(default_factory=list)
    velocities: List[np.ndarray] = field(default_factory=list)
    period: float = 0.0

    @property
    def wall_positions(self) -> List[float]:
        return self.positions[1:]

    @property
    def v3_sequence(self) -> List[float]:
        return [float(v[2]) for v in self.velocities[:-1]]

    @property
    def gaps(self) -> List[float]:
        return [a - b for a, b in zip(self.times, self.times[1:])]

    @property
    def lookback(self) -> float:
        return self.times[0] - self.times[-1]


def build_cycle(x: float, v: np.ndarray, d: float, k_max: int, t: float = 0.0) -> BackCycle:
    """Follow the specular back-time cycle from (t, x, v) through ``k_max`` bounces."""

    if k_max < 1:
        raise ValidationError(f"k_max must be at least 1, got {k_max}")

    v = np.asarray(v, dtype=float)
    cycle = BackCycle(times=[t], positions=[x], velocities=[v.copy()], period=d / abs(v[2]) if v[2] else np.inf)
    for _ in range(k_max):
        t_b, x_b = backward_exit(cycle.positions[-1], cycle.velocities[-1][2], d)
        reflected = cycle.velocities[-1].copy()
        reflected[2] = -reflected[2]
        cycle.times.append(cycle.times[-1] - t_b)
        cycle.positions.append(x_b)
        cycle.velocities.append(reflected)
    return cycle


def _phi(z: np.ndarray) -> np.ndarray:
    """(1 - e^-z (1 + z)) / z, with its series near zero."""
    small = z < 1e-3
    zs = np.where(small, 1.0, z)
    exact = (-np.expm1(-zs) - zs * np.exp(-zs)) / zs
    series = z / 2.0 - z * z / 3.0 + z ** 3 / 8.0
    return np.where(small, series, exact)


def cycle_sum_closed_form(p0: np.ndarray, p1: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Infinite alternating bounce sum p0 + rho p1 + rho^2 p0 + ... in closed form."""
    return (p0 + rho * p1) / (1.0 - rho * rho)


class CharacteristicSweep:
    """Solve (eps + v3 d/dx + nu) h = rhs on a slab for every velocity node.

    Incoming values obey ``h(wall, v) = damp * h(wall, Rv) + boundary_src(v)``
    where ``boundary_src`` at nodes with v3 > 0 acts at x = 0 and at nodes
    with v3 < 0 acts at x = d.
    """

    def __init__(self, grid: VelocityGrid, nu: np.ndarray, slab: SlabGrid, cycle_tol: float = 1e-14):
        validate_per_node(np.asarray(nu), grid.size, "nu")
        if np.any(grid.v3 == 0.0):
            raise TransportError("Velocity grid has grazing nodes")

        self.grid = grid
        self.nu = np.asarray(nu, dtype=float)
        self.slab = slab
        self.cycle_tol = cycle_tol
        self.logger = get_logger(__name__)

        self.forward = np.flatnonzero(grid.v3 > 0.0)
        self.backward = grid.reflect[self.forward]
        self.speed = grid.v3[self.forward]
        self.last_bounces = 0
        self._tables = {}

    def _table(self, eps: float):
        if eps not in self._tables:
            rate = (eps + self.nu[self.forward]) / self.speed
            z = self.slab.spacing[:, None] * rate[None, :]
            xs = self.slab.all_nodes
            self._tables[eps] = {
                "a": eps + self.nu[self.forward],
                "decay": np.exp(-z),
                "one_minus": -np.expm1(-z),
                "phi": _phi(z),
                "from_left": np.exp(-xs[:, None] * rate[None, :]),
                "from_right": np.exp(-(self.slab.d - xs)[:, None] * rate[None, :]),
                "crossing": np.exp(-self.slab.d * rate),
            }
        return self._tables[eps]

    def sweep(
        self,
        eps: float,
        damp: float,
        rhs: np.ndarray,
        boundary_src: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        """
        Integrate along characteristics.

        Args:
            eps: Penalty, eps >= 0
            damp: Wall reflection factor in (0, 1]
            rhs: Right side on ``slab.all_nodes``, shape (nx, N)
            boundary_src: Incoming wall data per node, or None

        Returns:
            Solution on ``slab.all_nodes``, shape (nx, N)
        """

        if eps < 0.0:
            raise ValidationError(f"Penalty must be non-negative, got {eps}")
        if not 0.0 < damp <= 1.0:
            raise ValidationError(f"Damping factor must lie in (0, 1], got {damp}")

        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape != (self.slab.size, self.grid.size):
            raise ValidationError(f"rhs must have shape {(self.slab.size, self.grid.size)}, got {rhs.shape}")
        try:
            validate_finite(rhs, "rhs")
        except ValidationError as e:
            raise TransportError(str(e)) from e

        src = np.zeros(self.grid.size) if boundary_src is None else np.asarray(boundary_src, dtype=float)
        validate_per_node(src, self.grid.size, "boundary_src")

        table = self._table(eps)
        a, decay, one_minus, phi = table["a"], table["decay"], table["one_minus"], table["phi"]
        m = self.slab.size - 1

        r_fwd = rhs[:, self.forward]
        r_bwd = rhs[:, self.backward]

        j_fwd = np.zeros_like(r_fwd)
        for j in range(m):
            increment = r_fwd[j + 1] * one_minus[j] - (r_fwd[j + 1] - r_fwd[j]) * phi[j]
            j_fwd[j + 1] = j_fwd[j] * decay[j] + increment / a

        j_bwd = np.zeros_like(r_bwd)
        for j in range(m - 1, -1, -1):
            increment = r_bwd[j] * one_minus[j] - (r_bwd[j] - r_bwd[j + 1]) * phi[j]
            j_bwd[j] = j_bwd[j + 1] * decay[j] + increment / a

        p0 = src[self.forward] + damp * j_bwd[0]
        p1 = src[self.backward] + damp * j_fwd[-1]
        rho = damp * table["crossing"]

        left, right, bounces = self._bounce_sum(p0, p1, rho)
        self.last_bounces = bounces

        h = np.empty_like(rhs)
        h[:, self.forward] = left[None, :] * table["from_left"] + j_fwd
        h[:, self.backward] = right[None, :] * table["from_right"] + j_bwd
        return h

    def _bounce_sum(self, p0: np.ndarray, p1: np.ndarray, rho: np.ndarray) -> Tuple[np.ndarray, np.ndarray, int]:
        """Sum incoming wall values bounce by bounce until the weight drops below tolerance."""

        left = np.zeros_like(p0)
        right = np.zeros_like(p1)
        factor = np.ones_like(rho)
        k = 0
        while True:
            even = k % 2 == 0
            left += factor * (p0 if even else p1)
            right += factor * (p1 if even else p0)
            factor = factor * rho
            k += 1
            if np.all(factor < self.cycle_tol):
                return left, right, k
            if k > MAX_BOUNCES:
                raise TransportError(f"Back-cycle sum did not reach weight {self.cycle_tol} in {MAX_BOUNCES} bounces")


def sweep_mild(
    grid: VelocityGrid,
    nu: np.ndarray,
    eps: float,
    damp: float,
    rhs: np.ndarray,
    boundary_src: Optional[np.ndarray],
    slab: SlabGrid,
    cycle_tol: float = 1e-14,
) -> np.ndarray:
    """One-shot characteristic sweep; see CharacteristicSweep."""
    return CharacteristicSweep(grid, nu, slab, cycle_tol=cycle_tol).sweep(eps, damp, rhs, boundary_src)
