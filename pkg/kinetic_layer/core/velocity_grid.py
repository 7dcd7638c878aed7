"""
Reflection-symmetric tensor velocity grids
"""

import hashlib
from dataclasses import dataclass, field
from typing import Tuple, Union

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from ..config import GridSpec
from ..utils.exceptions import GridError
from ..utils.logger import get_logger
from ..utils.validators import validate_per_node

logger = get_logger(__name__)


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array, dtype=float)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class VelocityGrid:
    """Tensor-product quadrature grid on velocity space.

    Node ``(i, j, k)`` along axes ``(v1, v2, v3)`` has flat index
    ``(i * n + j) * n + k``, so the specular mirror only flips ``k``.
    """

    spec: GridSpec
    axis_nodes: Tuple[np.ndarray, np.ndarray, np.ndarray]
    axis_weights: Tuple[np.ndarray, np.ndarray, np.ndarray]
    nodes: np.ndarray
    weights: np.ndarray
    reflect: np.ndarray
    digest: str = field(default="")

    @property
    def n(self) -> int:
        return self.spec.n_per_axis

    @property
    def size(self) -> int:
        return self.nodes.shape[0]

    @property
    def drift(self) -> np.ndarray:
        return np.asarray(self.spec.drift, dtype=float)

    @property
    def relative(self) -> np.ndarray:
        """Peculiar velocities v - u."""
        return self.nodes - self.drift

    @property
    def speed2(self) -> np.ndarray:
        """|v - u|^2 per node."""
        rel = self.relative
        return np.einsum("ij,ij->i", rel, rel)

    @property
    def v3(self) -> np.ndarray:
        return self.nodes[:, 2]

    @property
    def cell_widths(self) -> np.ndarray:
        """Per-node, per-axis quadrature cell widths (the 1D weights)."""
        n = self.n
        i, j, k = np.unravel_index(np.arange(self.size), (n, n, n))
        return np.stack(
            [self.axis_weights[0][i], self.axis_weights[1][j], self.axis_weights[2][k]],
            axis=1,
        )

    @property
    def max_radius(self) -> float:
        """Largest |v - u| over the nodes (effective velocity cutoff)."""
        return float(np.sqrt(self.speed2.max()))


def _axis_rule(spec: GridSpec, center: float) -> Tuple[np.ndarray, np.ndarray]:
    n = spec.n_per_axis
    if spec.rule == "gauss":
        xi, w = hermegauss(n)
        # exact mirror symmetry about the centre
        xi = 0.5 * (xi - xi[::-1])
        w = 0.5 * (w + w[::-1])
        return center + xi, w * np.exp(0.5 * xi * xi)

    h = 2.0 * spec.v_max / n
    offsets = -spec.v_max + (np.arange(n) + 0.5) * h
    offsets = 0.5 * (offsets - offsets[::-1])
    return center + offsets, np.full(n, h)


def _grid_digest(spec: GridSpec, nodes: np.ndarray, weights: np.ndarray) -> str:
    hasher = hashlib.sha256()
    hasher.update(spec.rule.encode())
    hasher.update(np.ascontiguousarray(nodes, dtype="<f8").tobytes())
    hasher.update(np.ascontiguousarray(weights, dtype="<f8").tobytes())
    return hasher.hexdigest()


def build_grid(spec: GridSpec) -> VelocityGrid:
    """Build the tensor grid described by ``spec``.

    Raises:
        GridError: if ``n_per_axis`` is odd or too small, or the drift has a
            normal component.
    """

    n = spec.n_per_axis
    if n < 4 or n % 2:
        raise GridError(f"n_per_axis must be even and at least 4, got {n}")
    if spec.drift[2] != 0.0:
        raise GridError(f"drift must have zero normal component, got {spec.drift[2]}")
    if spec.v_max <= 0:
        raise GridError(f"v_max must be positive, got {spec.v_max}")

    rules = [_axis_rule(spec, spec.drift[axis]) for axis in range(3)]
    axis_nodes = tuple(_readonly(r[0]) for r in rules)
    axis_weights = tuple(_readonly(r[1]) for r in rules)

    g1, g2, g3 = np.meshgrid(*axis_nodes, indexing="ij")
    nodes = np.stack([g1.ravel(), g2.ravel(), g3.ravel()], axis=1)
    w1, w2, w3 = np.meshgrid(*axis_weights, indexing="ij")
    weights = (w1 * w2 * w3).ravel()

    index = np.arange(n ** 3).reshape(n, n, n)
    reflect = index[:, :, ::-1].ravel()
    reflect.setflags(write=False)

    if not np.array_equal(nodes[reflect, 2], -nodes[:, 2]):
        raise GridError("Node set is not symmetric under v3 -> -v3")

    grid = VelocityGrid(
        spec=spec,
        axis_nodes=axis_nodes,
        axis_weights=axis_weights,
        nodes=_readonly(nodes),
        weights=_readonly(weights),
        reflect=reflect,
        digest=_grid_digest(spec, nodes, weights),
    )

    logger.info(f"Built {spec.rule} velocity grid with {grid.size} nodes (|v-u| <= {grid.max_radius:.2f})")
    return grid


def quad(grid: VelocityGrid, samples: np.ndarray) -> Union[float, np.ndarray]:
    """Quadrature sum over the trailing (velocity) axis.

    The sum is folded over mirror pairs first, so samples that are odd under
    v3 -> -v3 integrate to exactly zero. Leading axes are kept, so a field of
    shape ``(nx, N)`` gives one value per x node.
    """

    samples = np.asarray(samples, dtype=float)
    validate_per_node(samples, grid.size, "samples")

    n = grid.n
    lead = samples.shape[:-1]
    weighted = (samples * grid.weights).reshape(lead + (n, n, n))
    folded = weighted[..., : n // 2] + weighted[..., ::-1][..., : n // 2]
    result = folded.reshape(lead + (-1,)).sum(axis=-1)
    return result if lead else float(result)


def inner(grid: VelocityGrid, f: np.ndarray, g: np.ndarray) -> Union[float, np.ndarray]:
    """Quadrature inner product <f, g> over velocity."""
    return quad(grid, np.asarray(f) * np.asarray(g))


def reflect_values(grid: VelocityGrid, values: np.ndarray) -> np.ndarray:
    """Compose per-node values with the specular reflection: (f o R)(v) = f(Rv)."""
    values = np.asarray(values)
    validate_per_node(values, grid.size)
    return values[..., grid.reflect]
