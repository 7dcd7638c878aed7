"""
Linearized hard-sphere collision operator on a velocity grid.

The operator is assembled as ``L = nu - K`` with the compact part sampled from
the closed-form Grad kernel. All dense linear algebra happens in symmetric
coordinates ``sqrt(W) f`` where the quadrature inner product is the Euclidean
one, so ``L`` is a symmetric matrix there.
"""

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple, Union

import numpy as np
import scipy.linalg
from numpy.polynomial.hermite_e import hermevander
from scipy.spatial.distance import cdist
from scipy.special import erf, factorial

from ..config import WeightSpec
from ..utils.exceptions import OperatorAssemblyError, ProjectionError, ValidationError
from ..utils.logger import get_logger, stage_context
from ..utils.performance import BatchProcessor, PerformanceMonitor, time_operation
from ..utils.validators import validate_finite, validate_per_node
from .velocity_grid import VelocityGrid, quad

logger = get_logger(__name__)

KERNEL_VERSION = "grad-hs-3"

SQRT_2PI = np.sqrt(2.0 * np.pi)
MAXWELLIAN_NORM = (2.0 * np.pi) ** -1.5
MEAN_SPEED_AT_REST = 2.0 * np.sqrt(2.0 / np.pi)

# 8-point subsampling of a diagonal cell at +-1/4 of its widths
_SUBCELL_SIGNS = np.array(
    [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float
)

INVARIANT_NAMES = ("a", "b1", "b2", "b3", "c")

GAMMA_CONSERVATION_TOL = 1e-8
# raw defects of the sampled operator are admitted up to scale / n and scale / sqrt(n)
DEFECT_SCALE = 0.5


def maxwellian(v: np.ndarray, drift: np.ndarray = (0.0, 0.0, 0.0)) -> np.ndarray:
    """Global Maxwellian (2 pi)^(-3/2) exp(-|v - u|^2 / 2).

    ``v`` may be a single velocity or any array with a trailing axis of 3.
    """

    drift = np.asarray(drift, dtype=float)
    if drift.shape != (3,) or drift[2] != 0.0:
        raise ValidationError(f"drift must be a 3-vector with zero third component, got {drift}")

    rel = np.asarray(v, dtype=float) - drift
    return MAXWELLIAN_NORM * np.exp(-0.5 * np.sum(rel * rel, axis=-1))


def tail_mass(grid: VelocityGrid) -> float:
    """Maxwellian mass missed by the grid, 1 - sum(w mu)."""
    return 1.0 - quad(grid, maxwellian(grid.nodes, grid.drift))


def weight(grid: VelocityGrid, spec: WeightSpec) -> np.ndarray:
    """Velocity weight (1 + |v|^2)^(beta/2) exp(varsigma |v - u|^2) per node."""

    if not 0.0 <= spec.varsigma < 0.25 or spec.beta < 3.0:
        raise ValidationError(f"Inadmissible weight: beta={spec.beta}, varsigma={spec.varsigma}")

    v2 = np.einsum("ij,ij->i", grid.nodes, grid.nodes)
    return (1.0 + v2) ** (0.5 * spec.beta) * np.exp(spec.varsigma * grid.speed2)


def _mean_relative_speed(z: np.ndarray) -> np.ndarray:
    """E|z e + N| for a standard normal N in R^3."""
    small = z < 1e-4
    zs = np.where(small, 1.0, z)
    exact = np.sqrt(2.0 / np.pi) * np.exp(-0.5 * zs * zs) + (zs + 1.0 / zs) * erf(zs / np.sqrt(2.0))
    return np.where(small, MEAN_SPEED_AT_REST * (1.0 + z * z / 6.0), exact)


def collision_frequency(grid: VelocityGrid) -> np.ndarray:
    """Hard-sphere collision frequency nu(v) = 2 pi E|v - u'| under the Maxwellian.

    Raises:
        OperatorAssemblyError: if any value is non-positive or not finite.
    """

    nu = 2.0 * np.pi * _mean_relative_speed(np.sqrt(grid.speed2))
    if not np.all(np.isfinite(nu)) or np.any(nu <= 0.0):
        raise OperatorAssemblyError("Collision frequency is not positive on every node")
    return nu


def grad_kernel(v: np.ndarray, eta: np.ndarray, drift: np.ndarray) -> np.ndarray:
    """Hard-sphere kernel k(v, eta) = k2 - k1 of the compact part.

    ``v`` and ``eta`` broadcast against each other along leading axes. The
    value at ``v == eta`` is infinite.
    """

    rv = v - drift
    re = eta - drift
    diff = v - eta
    r2 = np.sum(diff * diff, axis=-1)
    a2 = np.sum(rv * rv, axis=-1)
    b2 = np.sum(re * re, axis=-1)
    r = np.sqrt(r2)

    k1 = r * np.exp(-0.25 * (a2 + b2)) / SQRT_2PI
    with np.errstate(divide="ignore", invalid="ignore"):
        k2 = 4.0 / (SQRT_2PI * r) * np.exp(-0.125 * r2 - 0.125 * (a2 - b2) ** 2 / r2)
    return k2 - k1


def kernel_envelope(v: np.ndarray, eta: np.ndarray, drift: np.ndarray) -> np.ndarray:
    """Gaussian-type envelope bounding |k(v, eta)| up to a constant."""

    rv = v - drift
    re = eta - drift
    diff = v - eta
    r2 = np.sum(diff * diff, axis=-1)
    a2 = np.sum(rv * rv, axis=-1)
    b2 = np.sum(re * re, axis=-1)
    r = np.sqrt(r2)
    with np.errstate(divide="ignore", invalid="ignore"):
        near = np.exp(-0.125 * r2 - 0.125 * (a2 - b2) ** 2 / r2) / r
    return near + r * np.exp(-0.25 * (a2 + b2))


def collision_invariants(grid: VelocityGrid) -> np.ndarray:
    """Columns sqrt(mu) * (1, v1-u1, v2-u2, v3, |v-u|^2 - 3), shape (N, 5)."""

    sqrt_mu = np.sqrt(maxwellian(grid.nodes, grid.drift))
    rel = grid.relative
    return np.stack(
        [sqrt_mu, rel[:, 0] * sqrt_mu, rel[:, 1] * sqrt_mu, rel[:, 2] * sqrt_mu, (grid.speed2 - 3.0) * sqrt_mu],
        axis=1,
    )


def moment_functions(grid: VelocityGrid) -> Dict[str, np.ndarray]:
    """The non-hydrodynamic moment functions A31, A32, A33 and B3 per node."""

    sqrt_mu = np.sqrt(maxwellian(grid.nodes, grid.drift))
    rel = grid.relative
    return {
        "A31": rel[:, 2] * rel[:, 0] * sqrt_mu,
        "A32": rel[:, 2] * rel[:, 1] * sqrt_mu,
        "A33": (rel[:, 2] ** 2 - grid.speed2 / 3.0) * sqrt_mu,
        "B3": rel[:, 2] * (grid.speed2 - 5.0) * sqrt_mu,
    }


def _kernel_rows(grid: VelocityGrid, rows: slice) -> Tuple[np.ndarray, float]:
    """Kernel rows for ``rows`` with cell-averaged diagonal, plus the local envelope ratio."""

    drift = grid.drift
    idx = np.arange(rows.start, rows.stop)
    v = grid.nodes[rows]
    block = grad_kernel(v[:, None, :], grid.nodes[None, :, :], drift)
    envelope = kernel_envelope(v[:, None, :], grid.nodes[None, :, :], drift)

    local = np.arange(idx.size)
    block[local, idx] = 0.0
    envelope[local, idx] = 1.0
    scaled = np.divide(np.abs(block), envelope, out=np.zeros_like(block), where=envelope > 0.0)
    ratio = float(scaled.max()) if block.size else 0.0

    offsets = 0.25 * grid.cell_widths[rows]
    points = v[:, None, :] + _SUBCELL_SIGNS[None, :, :] * offsets[:, None, :]
    block[local, idx] = grad_kernel(v[:, None, :], points, drift).mean(axis=1)
    return block, ratio


def assemble_K(
    grid: VelocityGrid,
    threads: int = 1,
    batch_size: int = 256,
    return_details: bool = False,
) -> Union[np.ndarray, Tuple[np.ndarray, Dict[str, float]]]:
    """Assemble the compact part as the matrix K_ij = k(v_i, v_j) w_j.

    Rows are assembled in parallel batches; the kernel matrix is symmetrized
    before the weights are applied.

    Args:
        grid: Velocity grid
        threads: Worker threads for row batches
        batch_size: Rows per batch
        return_details: Also return the kernel-bound constant and row-sum bound

    Raises:
        OperatorAssemblyError: if the assembled kernel is not finite.
    """

    processor = BatchProcessor(batch_size=batch_size, max_workers=threads)
    results = processor.process_batches(processor.batches(grid.size), lambda rows: _kernel_rows(grid, rows))

    kernel = np.concatenate([block for block, _ in results], axis=0)
    if not np.all(np.isfinite(kernel)):
        raise OperatorAssemblyError("Kernel assembly produced non-finite entries")

    kernel = 0.5 * (kernel + kernel.T)
    K = kernel * grid.weights[None, :]

    if not return_details:
        return K

    speed = np.sqrt(np.einsum("ij,ij->i", grid.nodes, grid.nodes))
    details = {
        "kernel_constant": max(ratio for _, ratio in results),
        "row_sum_bound": float(np.max((1.0 + speed) * np.abs(kernel) @ grid.weights)),
    }
    return K, details


def angular_rule(n_azimuth: int, n_polar: int) -> Tuple[np.ndarray, np.ndarray]:
    """Product rule on the upper unit hemisphere, weights doubled to cover the sphere."""

    if n_azimuth < 1 or n_polar < 1:
        raise ValidationError(f"Angular rule needs positive sizes, got {n_azimuth}x{n_polar}")

    t, wt = np.polynomial.legendre.leggauss(n_polar)
    cos_theta = 0.5 * (t + 1.0)
    w_theta = 0.5 * wt
    phi = 2.0 * np.pi * (np.arange(n_azimuth) + 0.5) / n_azimuth

    ct, ph = np.meshgrid(cos_theta, phi, indexing="ij")
    st = np.sqrt(1.0 - ct * ct)
    directions = np.stack([st * np.cos(ph), st * np.sin(ph), ct], axis=-1).reshape(-1, 3)
    weights = (2.0 * w_theta[:, None] * np.full(n_azimuth, 2.0 * np.pi / n_azimuth)[None, :]).ravel()
    return directions, weights


def hermite_basis(points: np.ndarray, degree: int) -> np.ndarray:
    """Normalized probabilists' Hermite polynomials He_a(x) / sqrt(a!) for a <= degree."""
    return hermevander(np.asarray(points, dtype=float), degree) / np.sqrt(factorial(np.arange(degree + 1)))


class CollisionIntegral:
    """Weak-form (u, omega) quadrature of Gamma(f, g) = mu^(-1/2) Q(sqrt(mu) f, sqrt(mu) g).

    The gain term is tested against the tensor Hermite polynomials of degree
    below n per axis. Post-collision velocities only enter through these test
    polynomials, so every discrete collision contributes
    phi(u') + phi(v') - phi(u) - phi(v) to the symmetrized moments and the
    collision invariants are conserved to round-off. Nodal values follow from
    the moments through the per-axis Vandermonde systems. Pair weights are
    rescaled so that the angular rule integrates |(v - u) . omega| to
    2 pi |v - u| exactly, which makes the loss term the exact hard-sphere one.

    The result is symmetrized in its two arguments and returned as computed;
    ``__call__`` raises when its invariant component exceeds
    ``conservation_tol``.
    """

    def __init__(
        self,
        operator: "OperatorSet",
        angular: Tuple[int, int] = (16, 8),
        threads: int = 1,
        conservation_tol: float = GAMMA_CONSERVATION_TOL,
    ):
        self.operator = operator
        self.grid = operator.grid
        self.directions, self.direction_weights = angular_rule(*angular)
        self.threads = threads
        self.conservation_tol = conservation_tol
        self.last_defect = 0.0
        self.logger = get_logger(__name__)

        grid = self.grid
        degree = grid.n - 1
        self._pair_weight = grid.weights * operator.sqrt_mu
        self._loss_matrix = 2.0 * np.pi * cdist(grid.nodes, grid.nodes) * self._pair_weight[None, :]
        self._axis_solve = [
            np.linalg.inv(hermite_basis(grid.axis_nodes[axis] - grid.drift[axis], degree).T) for axis in range(3)
        ]

        processor = BatchProcessor(batch_size=self._rows_per_batch(1), max_workers=threads)
        self._pair_scale = np.concatenate(
            processor.process_batches(processor.batches(grid.size), self._pair_scale_rows), axis=0
        )

    def _rows_per_batch(self, width: int) -> int:
        n = self.grid.n
        per_row = self.grid.size * self.directions.shape[0] * (width * n + n * n + 3 * n + 8)
        return max(1, int(4e6 // per_row))

    def _pair_scale_rows(self, rows: slice) -> np.ndarray:
        nodes = self.grid.nodes
        rel = nodes[rows][:, None, :] - nodes[None, :, :]
        angular = np.abs(np.einsum("bjc,mc->bjm", rel, self.directions)) @ self.direction_weights
        exact = 2.0 * np.pi * np.linalg.norm(rel, axis=-1)
        return np.divide(exact, angular, out=np.zeros_like(exact), where=angular > 0.0)

    def _gain_moments(self, rows: slice, Fw: np.ndarray, Gw: np.ndarray) -> np.ndarray:
        """Hermite moments of the gain from output nodes ``rows`` against every partner node."""

        grid = self.grid
        n = grid.n
        nx = Fw.shape[0]
        v = grid.nodes[rows]
        s = np.einsum("bjc,mc->bjm", v[:, None, :] - grid.nodes[None, :, :], self.directions)
        post = (v[:, None, None, :] - s[..., None] * self.directions[None, None, :, :] - grid.drift).reshape(-1, 3)
        collision_weight = np.abs(s) * self.direction_weights[None, None, :] * self._pair_scale[rows][:, :, None]

        pair = 0.5 * (Fw[:, None, :] * Gw[:, rows, None] + Gw[:, None, :] * Fw[:, rows, None])
        coefficients = (pair[..., None] * collision_weight[None]).reshape(nx, -1)

        hx, hy, hz = (hermite_basis(post[:, axis], n - 1) for axis in range(3))
        hyz = (hy[:, :, None] * hz[:, None, :]).reshape(-1, n * n)
        weighted = coefficients[:, :, None] * hx[None, :, :]
        moments = weighted.transpose(0, 2, 1).reshape(nx * n, -1) @ hyz
        return moments.reshape(nx, n, n, n)

    def evaluate(self, f: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Gamma(f, g) for per-node values or x-by-v fields; records ``last_defect``."""

        f = np.asarray(f, dtype=float)
        g = np.asarray(g, dtype=float)
        if f.shape != g.shape:
            raise ValidationError(f"Gamma arguments differ in shape: {f.shape} vs {g.shape}")
        validate_per_node(f, self.grid.size, "f")

        single = f.ndim == 1
        F = np.atleast_2d(f)
        G = np.atleast_2d(g)
        if not np.any(F) or not np.any(G):
            self.last_defect = 0.0
            return np.zeros_like(f)

        nx = F.shape[0]
        Fw = F * self._pair_weight
        Gw = G * self._pair_weight
        processor = BatchProcessor(batch_size=self._rows_per_batch(nx), max_workers=self.threads)
        parts = processor.process_batches(
            processor.batches(self.grid.size),
            lambda rows: self._gain_moments(rows, Fw, Gw),
        )
        Ax, Ay, Az = self._axis_solve
        nodal = np.einsum("ia,jb,kc,xabc->xijk", Ax, Ay, Az, np.sum(parts, axis=0)).reshape(nx, -1)
        gain = nodal / self._pair_weight
        loss = 0.5 * (G * (F @ self._loss_matrix.T) + F * (G @ self._loss_matrix.T))

        result = gain - loss
        raw_norm = float(np.sqrt(np.max(quad(self.grid, self.operator.nu * result * result))))
        self.last_defect = float(np.max(np.atleast_1d(self.operator.null_component(result)))) / max(raw_norm, 1e-300)
        return result[0] if single else result

    def __call__(self, f: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Evaluate Gamma(f, g).

        Raises:
            ProjectionError: if the result is not orthogonal to the collision
                invariants within ``conservation_tol``.
        """

        result = self.evaluate(f, g)
        if self.last_defect > self.conservation_tol:
            raise ProjectionError(
                f"Gamma is not orthogonal to the collision invariants (tolerance {self.conservation_tol:.0e})",
                self.last_defect,
            )
        return result


@dataclass
class OperatorSet:
    """Assembled linearized operator and everything derived from it."""

    grid: VelocityGrid
    weight_spec: WeightSpec
    nu: np.ndarray
    L_sym: np.ndarray
    P_basis: np.ndarray
    kappa1: float
    kappa2: float
    c0: float
    nu0: float
    nu1: float
    constants: Dict[str, float] = field(default_factory=dict)
    null_eigenvalues: np.ndarray = field(default_factory=lambda: np.zeros(5))
    threads: int = 1
    angular: Tuple[int, int] = (16, 8)

    def __post_init__(self):
        grid = self.grid
        self.sqrt_w = np.sqrt(grid.weights)
        self.sqrt_mu = np.sqrt(maxwellian(grid.nodes, grid.drift))
        self.w = weight(grid, self.weight_spec)
        self.invariants = collision_invariants(grid)
        self.gram = self.invariants.T @ (self.invariants * grid.weights[:, None])
        self.moments = moment_functions(grid)
        self._q = self.P_basis * self.sqrt_w[:, None]
        self._shift = float(np.median(self.nu))
        self._factor = None
        self._lift = {}
        self._collision: Optional[CollisionIntegral] = None

    # -- derived matrices -------------------------------------------------

    @property
    def K(self) -> np.ndarray:
        """Compact part in value representation, K f = nu f - L f."""
        K_sym = np.diag(self.nu) - self.L_sym
        return K_sym * (self.sqrt_w[None, :] / self.sqrt_w[:, None])

    @property
    def cbar0(self) -> float:
        """Bound of |L^-1 h|_nu^2 by |h|_(1/nu)^2 on the complement."""
        return 1.0 / self.c0 ** 2

    def _cholesky(self):
        if self._factor is None:
            shifted = self.L_sym + self._shift * (self._q @ self._q.T)
            try:
                self._factor = scipy.linalg.cho_factor(shifted, lower=True, check_finite=False)
            except np.linalg.LinAlgError as e:
                raise OperatorAssemblyError("L is not positive on the complement of its null space") from e
        return self._factor

    # -- actions ----------------------------------------------------------

    def apply_L(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        validate_per_node(f, self.grid.size, "f")
        return ((f * self.sqrt_w) @ self.L_sym) / self.sqrt_w

    def apply_K(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        validate_per_node(f, self.grid.size, "f")
        return self.nu * f - self.apply_L(f)

    def project_P(self, f: np.ndarray) -> np.ndarray:
        """Quadrature-orthogonal projection onto the collision invariants."""
        f = np.asarray(f, dtype=float)
        validate_per_node(f, self.grid.size, "f")
        coefficients = (f * self.grid.weights) @ self.P_basis
        return coefficients @ self.P_basis.T

    def null_component(self, f: np.ndarray) -> np.ndarray:
        """|P f| in the quadrature norm (per row for fields)."""
        return np.sqrt((((np.asarray(f) * self.grid.weights) @ self.P_basis) ** 2).sum(axis=-1))

    def norm(self, f: np.ndarray) -> np.ndarray:
        return np.sqrt(quad(self.grid, np.asarray(f) ** 2))

    def nu_norm(self, f: np.ndarray) -> np.ndarray:
        return np.sqrt(quad(self.grid, self.nu * np.asarray(f) ** 2))

    def solve_L_inv(self, h: np.ndarray, tol: float = 1e-8) -> np.ndarray:
        """Solve L u = h with P u = 0 for h in the complement of the null space.

        Raises:
            ProjectionError: if the null-space component of ``h`` exceeds
                ``tol`` relative to its norm.
        """

        h = np.asarray(h, dtype=float)
        validate_per_node(h, self.grid.size, "h")
        validate_finite(h, "h")

        component = np.atleast_1d(self.null_component(h))
        scale = np.maximum(np.atleast_1d(self.norm(h)), 1e-300)
        if np.any(component > tol * scale + 1e-14):
            raise ProjectionError("Right side has a significant null-space component", float(component.max()))

        h = h - self.project_P(h)
        rhs = (h * self.sqrt_w).T
        y = scipy.linalg.cho_solve(self._cholesky(), rhs, check_finite=False).T
        u = y / self.sqrt_w
        return u - self.project_P(u)

    def lifted_moment(self, name: str) -> np.ndarray:
        """L^-1 applied to one of the moment functions A31, A32, A33, B3 (cached)."""
        if name not in self._lift:
            source = self.moments[name]
            self._lift[name] = self.solve_L_inv(source - self.project_P(source))
        return self._lift[name]

    def macro_coefficients(self, f: np.ndarray) -> np.ndarray:
        """Coefficients (a, b1, b2, b3, c) of P f in the raw invariant basis."""
        f = np.asarray(f, dtype=float)
        moments = (f * self.grid.weights) @ self.invariants
        return np.linalg.solve(self.gram, moments.T).T

    @property
    def collision(self) -> CollisionIntegral:
        if self._collision is None:
            self._collision = CollisionIntegral(self, angular=self.angular, threads=self.threads)
        return self._collision

    def gamma_bilinear(self, f: np.ndarray, g: np.ndarray) -> np.ndarray:
        return self.collision(f, g)

    def estimate_coercivity(self) -> float:
        """Recompute c0 from the stored operator."""
        c0, _ = estimate_coercivity(self.L_sym, self.nu)
        return c0

    def header(self) -> Dict[str, float]:
        return {
            "nu0": self.nu0,
            "nu1": self.nu1,
            "c0": self.c0,
            "kappa1": self.kappa1,
            "kappa2": self.kappa2,
            **self.constants,
        }


def project_P(operator: OperatorSet, f: np.ndarray) -> np.ndarray:
    return operator.project_P(f)


def solve_L_inv(operator: OperatorSet, h: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    return operator.solve_L_inv(h, tol=tol)


def gamma_bilinear(operator: OperatorSet, f: np.ndarray, g: np.ndarray) -> np.ndarray:
    return operator.gamma_bilinear(f, g)


def estimate_coercivity(L_sym: np.ndarray, nu: np.ndarray) -> Tuple[float, np.ndarray]:
    """Smallest eigenvalue of L on the null-space complement, relative to nu.

    Returns:
        ``(c0, null_eigenvalues)`` where ``null_eigenvalues`` are the five
        smallest generalized eigenvalues.

    Raises:
        OperatorAssemblyError: if c0 is not positive.
    """

    scale = 1.0 / np.sqrt(nu)
    eigenvalues = scipy.linalg.eigvalsh(L_sym * scale[:, None] * scale[None, :], check_finite=False)
    c0 = float(eigenvalues[5])
    if c0 <= 0.0:
        raise OperatorAssemblyError(f"Coercivity estimate c0 = {c0:.3e} is not positive; refine the grid")
    return c0, eigenvalues[:5].copy()


def _conservative_correction(L_sym: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Two-sided projection of L onto the complement of span(q)."""

    Lq = L_sym @ q
    qLq = q.T @ Lq
    corrected = L_sym - q @ Lq.T - Lq @ q.T + q @ qLq @ q.T
    return 0.5 * (corrected + corrected.T)


def null_defect_tolerance(n: int, scale: float = DEFECT_SCALE) -> float:
    """Admissible max |L q| / max |L| of the uncorrected operator at n nodes per axis."""
    return scale / n


def sqrt_mu_defect_tolerance(n: int, scale: float = DEFECT_SCALE) -> float:
    """Admissible max |L sqrt(mu)| / max |nu sqrt(mu)| of the uncorrected operator."""
    return scale / np.sqrt(n)


def assemble_raw_L(
    grid: VelocityGrid,
    nu: np.ndarray,
    threads: int = 1,
    batch_size: int = 256,
) -> Tuple[np.ndarray, Dict[str, float]]:
    """Sampled L = nu - K in symmetric coordinates, before any conservative correction.

    Returns the matrix and the kernel details of ``assemble_K`` extended by
    the two raw conservation defects ``raw_null_defect`` and
    ``raw_sqrt_mu_defect``.
    """

    K, details = assemble_K(grid, threads=threads, batch_size=batch_size, return_details=True)

    sqrt_w = np.sqrt(grid.weights)
    L_sym = np.diag(nu) - K * (sqrt_w[:, None] / sqrt_w[None, :])
    L_sym = 0.5 * (L_sym + L_sym.T)

    q, _ = np.linalg.qr(collision_invariants(grid) * sqrt_w[:, None])
    sqrt_mu = np.sqrt(maxwellian(grid.nodes, grid.drift))
    L_sqrt_mu = (L_sym @ (sqrt_w * sqrt_mu)) / sqrt_w

    details["raw_null_defect"] = float(np.max(np.abs(L_sym @ q)) / np.max(np.abs(L_sym)))
    details["raw_sqrt_mu_defect"] = float(np.max(np.abs(L_sqrt_mu)) / np.max(nu * sqrt_mu))
    return L_sym, details


class OperatorAssembler:
    """Assemble an OperatorSet, timing each stage."""

    def __init__(
        self,
        threads: int = 1,
        batch_size: int = 256,
        angular: Tuple[int, int] = (16, 8),
        defect_scale: float = DEFECT_SCALE,
    ):
        self.threads = threads
        self.batch_size = batch_size
        self.angular = angular
        self.defect_scale = defect_scale
        self.performance_monitor = PerformanceMonitor()
        self.logger = get_logger(__name__)

    def _check_raw_defects(self, grid: VelocityGrid, details: Dict[str, float]) -> None:
        limits = {
            "raw_null_defect": null_defect_tolerance(grid.n, self.defect_scale),
            "raw_sqrt_mu_defect": sqrt_mu_defect_tolerance(grid.n, self.defect_scale),
        }
        for name, limit in limits.items():
            self.logger.info(f"{name} of the sampled operator: {details[name]:.3e} (limit {limit:.3e})")
            if details[name] > limit:
                raise OperatorAssemblyError(
                    f"Sampled operator violates conservation: {name}={details[name]:.3e} exceeds {limit:.3e} "
                    f"at n={grid.n}; refine the velocity grid"
                )

    @time_operation("assemble_operator")
    def assemble(self, grid: VelocityGrid, weight_spec: WeightSpec) -> OperatorSet:
        """
        Build nu, K, the invariant basis, L on the complement, c0 and the kappas.

        Raises:
            OperatorAssemblyError: if any stage produces an invalid operator,
                including raw conservation defects above the resolution
                dependent limits.
        """

        with stage_context("assemble"):
            nu = collision_frequency(grid)
            L_raw, details = assemble_raw_L(grid, nu, threads=self.threads, batch_size=self.batch_size)
            self._check_raw_defects(grid, details)

            sqrt_w = np.sqrt(grid.weights)
            q, _ = np.linalg.qr(collision_invariants(grid) * sqrt_w[:, None])
            L_sym = _conservative_correction(L_raw, q)

            c0, null_eigenvalues = estimate_coercivity(L_sym, nu)

            speed = np.sqrt(np.einsum("ij,ij->i", grid.nodes, grid.nodes))
            ratio = nu / (1.0 + speed)

            operator = OperatorSet(
                grid=grid,
                weight_spec=weight_spec,
                nu=nu,
                L_sym=L_sym,
                P_basis=q / sqrt_w[:, None],
                kappa1=0.0,
                kappa2=0.0,
                c0=c0,
                nu0=float(ratio.min()),
                nu1=float(ratio.max()),
                constants={**details, "tail_mass": tail_mass(grid)},
                null_eigenvalues=null_eigenvalues,
                threads=self.threads,
                angular=self.angular,
            )

            moments = operator.moments
            operator.kappa1 = float(quad(grid, moments["A31"] * operator.lifted_moment("A31")))
            operator.kappa2 = float(quad(grid, moments["B3"] * operator.lifted_moment("B3")))
            if operator.kappa1 <= 0.0 or operator.kappa2 <= 0.0:
                raise OperatorAssemblyError(
                    f"Transport constants must be positive: kappa1={operator.kappa1:.3e}, kappa2={operator.kappa2:.3e}"
                )

            self.logger.info(
                f"Operator ready: c0={c0:.4f} kappa1={operator.kappa1:.5f} kappa2={operator.kappa2:.5f} "
                f"nu0={operator.nu0:.3f} nu1={operator.nu1:.3f}"
            )
        return operator


def assemble_operator(
    grid: VelocityGrid,
    weight_spec: Optional[WeightSpec] = None,
    threads: int = 1,
    batch_size: int = 256,
    angular: Tuple[int, int] = (16, 8),
) -> OperatorSet:
    """Convenience wrapper around OperatorAssembler."""
    assembler = OperatorAssembler(threads=threads, batch_size=batch_size, angular=angular)
    return assembler.assemble(grid, weight_spec or WeightSpec())
