"""
Linear half-space solver.

The unknown is lifted to homogeneous specular data with a wall cutoff, the
truncated problem on [0, d] is solved with penalty eps and damped reflection
(1 - 1/n), both limits are taken along schedules, the far-end conditions are
fixed with a shift by collision invariants, and the slab is doubled until
the solutions agree on the common half-slab.
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from scipy.integrate import trapezoid
from scipy.interpolate import interp1d
from scipy.sparse.linalg import LinearOperator, gmres
from tqdm import tqdm

from ..config import SolveConfig, WeightSpec
from ..utils.exceptions import (
    CauchyError,
    CompatibilityError,
    ContractionError,
    OperatorAssemblyError,
    ProjectionError,
    ValidationError,
)
from ..utils.logger import get_logger, stage_context
from ..utils.performance import PerformanceMonitor, time_operation
from ..utils.validators import validate_finite, validate_per_node
from .operator import OperatorSet
from .transport import CharacteristicSweep, SlabGrid, default_slab
from .velocity_grid import quad

logger = get_logger(__name__)

# columns of the invariant basis that are even in v3: 1, v1-u1, v2-u2, |v-u|^2-3
EVEN_INVARIANTS = [0, 1, 2, 4]

# the wall cutoff chi vanishes from here on
CUTOFF_END = 2.0


@dataclass
class KineticField:
    """Values f(x_i, v_j) on slab nodes (walls included) times velocity nodes."""

    x: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[0] != self.x.size:
            raise ValidationError(f"Field of shape {self.values.shape} does not match {self.x.size} x nodes")

    @property
    def d(self) -> float:
        return float(self.x[-1])

    def at(self, points: np.ndarray) -> np.ndarray:
        """Linear interpolation in x; zero beyond the slab."""
        return interp1d(self.x, self.values, axis=0, bounds_error=False, fill_value=0.0)(points)


@dataclass
class MacroProfile:
    """Coefficients of P f = [a + b.(v-u) + c(|v-u|^2-3)] sqrt(mu) per x node."""

    x: np.ndarray
    a: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    b3: np.ndarray
    c: np.ndarray

    def as_columns(self) -> Dict[str, np.ndarray]:
        return {"x": self.x, "a": self.a, "b1": self.b1, "b2": self.b2, "b3": self.b3, "c": self.c}


@dataclass
class DecayFit:
    """Least-squares decay rate of sup_v |w f(x, .)| over a window of the slab."""

    sigma: Optional[float]
    amplitude: Optional[float]
    window: Tuple[float, float]
    trivial: bool = False
    flagged: bool = False
    samples: int = 0
    computed: bool = True

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sigma": self.sigma,
            "amplitude": self.amplitude,
            "window": list(self.window),
            "samples": self.samples,
            "computed": self.computed,
            "trivial": self.trivial,
            "flagged": self.flagged,
        }


@dataclass
class SolveReport:
    """Per-stage records of a solve, serialized into report.json."""

    sections: Dict[str, Any] = field(default_factory=dict)
    flags: List[str] = field(default_factory=list)

    def record(self, section: str, **values: Any) -> None:
        self.sections.setdefault(section, {}).update(values)

    def flag(self, message: str) -> None:
        logger.warning(message)
        self.flags.append(message)

    def merge(self, other: "SolveReport") -> None:
        for name, values in other.sections.items():
            self.sections.setdefault(name, values)
        self.flags.extend(f for f in other.flags if f not in self.flags)

    def to_dict(self) -> Dict[str, Any]:
        return {**self.sections, "flags": list(self.flags)}


@dataclass
class CompatibilityReport:
    """The four flux moments of the boundary data against v3 sqrt(mu) (1, v1-u1, v2-u2, |v-u|^2)."""

    moments: np.ndarray
    scale: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.all(np.abs(self.moments) <= self.tolerance * self.scale))

    def to_dict(self) -> Dict[str, Any]:
        return {"moments": self.moments.tolist(), "scale": self.scale, "tolerance": self.tolerance, "passed": self.passed}


@dataclass
class LinearProblem:
    """Boundary data f_b (zero for v3 >= 0) and a source x -> S(x, .) in the null-space complement."""

    boundary: np.ndarray
    source: Optional[Callable[[np.ndarray], np.ndarray]] = None
    sigma0: float = 0.3
    weight: WeightSpec = field(default_factory=WeightSpec)

    def source_on(self, x: np.ndarray, node_count: int) -> np.ndarray:
        if self.source is None:
            return np.zeros((np.size(x), node_count))
        values = np.asarray(self.source(np.asarray(x, dtype=float)), dtype=float)
        if values.shape != (np.size(x), node_count):
            raise ValidationError(f"Source returned shape {values.shape}, expected {(np.size(x), node_count)}")
        return values


@dataclass
class ContinuationStep:
    """One attempted lambda increment with its measured contraction."""

    lam_from: float
    lam_to: float
    differences: List[float]
    ratios: List[float]
    accepted: bool

    def to_dict(self) -> Dict[str, Any]:
        return {
            "lambda_from": self.lam_from,
            "lambda_to": self.lam_to,
            "differences": list(self.differences),
            "ratios": list(self.ratios),
            "accepted": self.accepted,
        }


@dataclass
class TruncatedSolve:
    """Solution of the penalized, damped problem on one slab."""

    values: np.ndarray
    eps: float
    eta: float
    lambda_steps: List[ContinuationStep] = field(default_factory=list)
    kernel_correction: float = 0.0
    raw_values: Optional[np.ndarray] = None


@dataclass
class SolveStage:
    """A lifted field f (specular data) together with the lifted source g it solves for.

    ``raw`` holds a penalized field before the x-constant kernel part was
    removed.
    """

    name: str
    field: KineticField
    source: np.ndarray
    eps: float
    eta: float = 1.0
    raw: Optional[KineticField] = None


@dataclass
class LinearSolution:
    """Decaying solution of the half-space problem on the final slab."""

    field: KineticField
    macro: MacroProfile
    phi: np.ndarray
    sigma_fit: DecayFit
    report: SolveReport
    boundary: np.ndarray
    cutoff: np.ndarray
    stages: Dict[str, SolveStage] = field(default_factory=dict)


def cutoff(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Smooth monotone cutoff chi, 1 on [0, 1] and 0 on [2, inf), with its derivative.

    The ramp is the quintic smoothstep 1 - t^3 (10 - 15 t + 6 t^2), t = x - 1, so
    chi is C^2 with chi' and chi'' vanishing at both ends.
    """

    t = np.clip(np.asarray(x, dtype=float) - 1.0, 0.0, CUTOFF_END - 1.0)
    chi = 1.0 - t ** 3 * (10.0 - 15.0 * t + 6.0 * t * t)
    dchi = -30.0 * t * t * (1.0 - t) ** 2
    return chi, dchi


def check_compatibility(operator: OperatorSet, boundary: np.ndarray, tol: float = 1e-10) -> CompatibilityReport:
    """Evaluate the flux moments the boundary data must annihilate.

    Raises:
        ValidationError: if ``boundary`` is nonzero on a node with v3 >= 0.
    """

    grid = operator.grid
    boundary = np.asarray(boundary, dtype=float)
    validate_per_node(boundary, grid.size, "f_b")
    validate_finite(boundary, "f_b")
    if np.any(boundary[grid.v3 >= 0.0] != 0.0):
        raise ValidationError("Boundary data must vanish on nodes with v3 >= 0")

    rel = grid.relative
    flux = grid.v3 * boundary * operator.sqrt_mu
    tests = np.stack([np.ones(grid.size), rel[:, 0], rel[:, 1], grid.speed2], axis=1)
    moments = (flux * grid.weights) @ tests
    scale = quad(grid, np.abs(flux) * (1.0 + grid.speed2))
    return CompatibilityReport(moments=moments, scale=max(float(scale), 1e-300), tolerance=tol)


def lift_boundary(
    operator: OperatorSet,
    problem: LinearProblem,
    slab: SlabGrid,
    tol: float = 1e-10,
) -> Tuple[np.ndarray, np.ndarray]:
    """Build g = S + v3 chi' f_b + chi L f_b on the slab nodes.

    Returns:
        ``(g, chi)`` with g of shape (nx, N) and chi of shape (nx,)

    Raises:
        CompatibilityError: if f_b fails the flux conditions or g has a
            nonzero invariant moment.
        ProjectionError: if the source has a null-space component.
    """

    grid = operator.grid
    compat = check_compatibility(operator, problem.boundary, tol)
    if not compat.passed:
        raise CompatibilityError("Boundary data is incompatible", compat.moments.tolist())

    x = slab.all_nodes
    source = problem.source_on(x, grid.size)
    validate_finite(source, "source")

    source_scale = np.maximum(np.atleast_1d(operator.norm(source)), 1e-300)
    component = np.atleast_1d(operator.null_component(source))
    if np.any(component > 1e-8 * source_scale + 1e-14):
        raise ProjectionError("Source is not orthogonal to the collision invariants", float(component.max()))

    chi, dchi = cutoff(x)
    f_b = problem.boundary
    g = source + dchi[:, None] * (grid.v3 * f_b)[None, :] + chi[:, None] * operator.apply_L(f_b)[None, :]

    even = operator.invariants[:, EVEN_INVARIANTS]
    moments = (g * grid.weights) @ even
    bound = tol * (compat.scale + float(np.max(operator.norm(g)))) + 1e-15
    worst = np.abs(moments).max(axis=0)
    if np.any(worst > bound):
        raise CompatibilityError("Lifted source has nonzero invariant moments", worst.tolist())

    return g, chi


def extract_macro(operator: OperatorSet, field_: KineticField) -> MacroProfile:
    coefficients = np.atleast_2d(operator.macro_coefficients(field_.values))
    return MacroProfile(field_.x.copy(), *[coefficients[:, i].copy() for i in range(5)])


def fit_decay(
    field_: KineticField,
    w: np.ndarray,
    window: Tuple[float, float] = (0.125, 0.5),
    floor: float = 1e-12,
    min_samples: int = 3,
) -> DecayFit:
    """
    Fit log sup_v |w f(x, .)| linearly in x over ``window`` (fractions of d).

    The window never starts before the end of the cutoff ramp at x = 2 and
    is at least one unit long; samples below ``floor`` times the largest
    profile value are dropped. A zero field returns a trivial marker, fewer
    than ``min_samples`` remaining samples leave the rate not computed, and
    a nonpositive rate is flagged, not raised.
    """

    profile = np.max(np.abs(field_.values * w[None, :]), axis=1)
    if not np.any(profile > 0.0):
        return DecayFit(sigma=None, amplitude=None, window=window, trivial=True, computed=False)

    lo = max(window[0] * field_.d, CUTOFF_END)
    hi = max(window[1] * field_.d, lo + 1.0)
    mask = (field_.x >= lo) & (field_.x <= hi) & (profile > floor * profile.max())
    samples = int(np.count_nonzero(mask))
    if samples < min_samples:
        return DecayFit(sigma=None, amplitude=None, window=window, samples=samples, computed=False)

    slope, intercept = np.polyfit(field_.x[mask], np.log(profile[mask]), 1)
    sigma = float(-slope)
    return DecayFit(
        sigma=sigma, amplitude=float(np.exp(intercept)), window=window, samples=samples, flagged=sigma <= 0.0
    )


def solve_shift_system(rhs: np.ndarray, kappa1: float, kappa2: float) -> np.ndarray:
    """Back-substitute M phi = -rhs with M = [[1,0,0,2],[0,k1,0,0],[0,0,k1,0],[0,0,0,k2]]."""

    matrix = np.array(
        [
            [1.0, 0.0, 0.0, 2.0],
            [0.0, kappa1, 0.0, 0.0],
            [0.0, 0.0, kappa1, 0.0],
            [0.0, 0.0, 0.0, kappa2],
        ]
    )
    return scipy.linalg.solve_triangular(matrix, -np.asarray(rhs, dtype=float), lower=False)


def compute_shift_phi(operator: OperatorSet, trace: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Shift coefficients (phi0, phi1, phi2, phi3) from the field values at x = d.

    Raises:
        OperatorAssemblyError: if kappa1 or kappa2 is not above ``tol``.
    """

    if operator.kappa1 <= tol or operator.kappa2 <= tol:
        raise OperatorAssemblyError(
            f"Shift system is singular: kappa1={operator.kappa1:.3e}, kappa2={operator.kappa2:.3e}"
        )

    grid = operator.grid
    trace = np.asarray(trace, dtype=float)
    validate_per_node(trace, grid.size, "trace")

    a, b1, b2, _, c = operator.macro_coefficients(trace)
    micro = trace - operator.project_P(trace)
    flux = grid.v3 * micro
    rhs = np.array(
        [
            a + 2.0 * c + quad(grid, operator.moments["A33"] * micro),
            operator.kappa1 * b1 + quad(grid, flux * operator.lifted_moment("A31")),
            operator.kappa1 * b2 + quad(grid, flux * operator.lifted_moment("A32")),
            operator.kappa2 * c + quad(grid, flux * operator.lifted_moment("B3")),
        ]
    )
    return solve_shift_system(rhs, operator.kappa1, operator.kappa2)


def shift_field(operator: OperatorSet, values: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Add [phi0 + phi1(v1-u1) + phi2(v2-u2) + phi3(|v-u|^2-3)] sqrt(mu) at every x."""
    return values + operator.invariants[:, EVEN_INVARIANTS] @ np.asarray(phi, dtype=float)


def shift_residuals(operator: OperatorSet, trace: np.ndarray) -> np.ndarray:
    """The four far-end orthogonality integrals a shifted trace must annihilate."""

    grid = operator.grid
    flux = grid.v3 * np.asarray(trace, dtype=float)
    return np.array(
        [
            quad(grid, flux * grid.v3 * operator.sqrt_mu),
            quad(grid, flux * operator.lifted_moment("A31")),
            quad(grid, flux * operator.lifted_moment("A32")),
            quad(grid, flux * operator.lifted_moment("B3")),
        ]
    )


def _richardson(f1: np.ndarray, f2: np.ndarray, p1: float, p2: float) -> np.ndarray:
    """Extrapolate f(p) = f0 + p c to p = 0 from two samples."""
    return (p1 * f2 - p2 * f1) / (p1 - p2)


class TruncatedSolver:
    """Solve the lifted problem on slabs along the lambda, n, eps and d schedules.

    The mild form ``f = S(g + K f)`` is used throughout, where ``S`` is the
    characteristic sweep with penalty eps and reflection factor eta. At each
    fixed (eps, eta) the equation ``(I - lambda S K) f = S g`` is continued
    from lambda = 0 to 1; every increment is accepted only when its
    fixed-point map contracts by ``max_contraction`` over
    ``contraction_iterations`` steps, after which the step is finished by GMRES.
    """

    def __init__(self, operator: OperatorSet, config: Optional[SolveConfig] = None, show_progress: bool = False):
        """
        Initialize truncated solver.

        Args:
            operator: Assembled operator
            config: Solver schedules and tolerances
            show_progress: Show tqdm bars over the outer schedules
        """
        self.operator = operator
        self.config = config or SolveConfig()
        self.show_progress = show_progress
        self.grid = operator.grid
        self.w = operator.w
        self._K_T = np.ascontiguousarray(operator.K.T)
        self._even = operator.invariants[:, EVEN_INVARIANTS]
        self._even_gram = self._even.T @ (self._even * self.grid.weights[:, None])
        self._sweeps: Dict[Tuple[float, bytes], CharacteristicSweep] = {}
        self.gmres_iterations = 0
        self.performance_monitor = PerformanceMonitor()
        self.logger = get_logger(__name__)

    # -- building blocks ----------------------------------------------------

    def slab(self, d: float) -> SlabGrid:
        cfg = self.config
        return default_slab(d, cfg.x_spacing_fraction, cfg.x_max_spacing, cfg.refine_ratio, cfg.refine_levels)

    def sweep_for(self, slab: SlabGrid) -> CharacteristicSweep:
        key = (slab.d, slab.x_nodes.tobytes())
        if key not in self._sweeps:
            self._sweeps[key] = CharacteristicSweep(self.grid, self.operator.nu, slab, self.config.cycle_tol)
        return self._sweeps[key]

    def apply_K(self, values: np.ndarray) -> np.ndarray:
        return values @ self._K_T

    def weighted_sup(self, values: np.ndarray) -> float:
        return float(np.max(np.abs(values * self.w))) if values.size else 0.0

    def _gmres(
        self,
        sweep: CharacteristicSweep,
        eps: float,
        eta: float,
        lam: float,
        rhs: np.ndarray,
        initial: np.ndarray,
    ) -> np.ndarray:
        """Solve (I - lam S K) f = rhs."""

        if not np.any(rhs):
            return np.zeros_like(rhs)

        shape = rhs.shape

        def matvec(x: np.ndarray) -> np.ndarray:
            values = x.reshape(shape)
            return (values - lam * sweep.sweep(eps, eta, self.apply_K(values))).ravel()

        count = [0]

        def on_iteration(_):
            count[0] += 1

        cfg = self.config
        system = LinearOperator((rhs.size, rhs.size), matvec=matvec, dtype=float)
        solution, info = gmres(
            system,
            rhs.ravel(),
            x0=initial.ravel(),
            rtol=cfg.inner_tol,
            atol=0.0,
            restart=cfg.gmres_restart,
            maxiter=cfg.gmres_maxiter,
            callback=on_iteration,
            callback_type="pr_norm",
        )
        self.gmres_iterations += count[0]
        if info > 0:
            raise ContractionError(f"GMRES did not reach tolerance {cfg.inner_tol:.1e} at lambda={lam:.4f}, eps={eps:.1e}")
        self.logger.debug(f"GMRES at lambda={lam:.4f} eps={eps:.1e} eta={eta:.4f}: {count[0]} iterations")
        return solution.reshape(shape)

    def _remove_kernel_mean(self, values: np.ndarray, slab: SlabGrid) -> Tuple[np.ndarray, float]:
        """Remove the x-constant invariants so that the slab means of a, b1, b2, c vanish."""

        means = trapezoid((values * self.grid.weights) @ self._even, slab.all_nodes, axis=0) / slab.d
        coefficients = np.linalg.solve(self._even_gram, means)
        return values - self._even @ coefficients, float(np.max(np.abs(coefficients)))

    # -- lambda continuation ------------------------------------------------

    def _lambda_step(
        self,
        sweep: CharacteristicSweep,
        eps: float,
        eta: float,
        swept_source: np.ndarray,
        current: np.ndarray,
        lam: float,
        increment: float,
    ) -> Tuple[ContinuationStep, np.ndarray]:
        cfg = self.config
        differences: List[float] = []
        ratios: List[float] = []
        converged = False

        for _ in range(cfg.contraction_iterations):
            rhs = swept_source + increment * sweep.sweep(eps, eta, self.apply_K(current))
            following = rhs if lam == 0.0 else self._gmres(sweep, eps, eta, lam, rhs, current)
            differences.append(self.weighted_sup(following - current))
            if len(differences) > 1 and differences[-2] > 0.0:
                ratios.append(differences[-1] / differences[-2])
            current = following
            if differences[-1] <= cfg.inner_tol * max(1.0, self.weighted_sup(current)):
                converged = True
                break

        accepted = not ratios or max(ratios) <= cfg.max_contraction
        step = ContinuationStep(lam, lam + increment, differences, ratios, accepted)
        if accepted and not converged:
            current = self._gmres(sweep, eps, eta, lam + increment, swept_source, current)
        return step, current

    def _continuation(
        self,
        g: np.ndarray,
        eps: float,
        eta: float,
        sweep: CharacteristicSweep,
        schedule: Sequence[float],
    ) -> Tuple[np.ndarray, List[ContinuationStep]]:
        cfg = self.config
        swept_source = sweep.sweep(eps, eta, g)
        current = swept_source.copy()
        lam = 0.0
        steps: List[ContinuationStep] = []
        increment = float(schedule[0])

        while lam < 1.0:
            target = next(t for t in schedule if t > lam + 1e-12)
            increment = min(2.0 * increment, target - lam) if steps else target - lam
            while True:
                step, candidate = self._lambda_step(sweep, eps, eta, swept_source, current, lam, increment)
                steps.append(step)
                if step.accepted:
                    break
                self.logger.info(
                    f"lambda step {lam:.4f} -> {lam + increment:.4f} rejected "
                    f"(ratio {max(step.ratios):.3f}); halving"
                )
                increment *= 0.5
                if increment < cfg.min_lambda_increment:
                    raise ContractionError(
                        f"Continuation stalled at lambda={lam:.6f}: increment below {cfg.min_lambda_increment}",
                        [r for s in steps for r in s.ratios],
                    )
            lam = 1.0 if abs(step.lam_to - 1.0) < 1e-12 else step.lam_to
            current = candidate
            self.logger.debug(f"lambda = {lam:.4f} reached, ratios {step.ratios}")

        return current, steps

    # -- single truncated solve ---------------------------------------------

    def solve_truncated(
        self,
        g: np.ndarray,
        eps: float,
        n: Optional[int],
        slab: SlabGrid,
        lambda_schedule: Optional[Sequence[float]] = None,
        continuation: bool = True,
        initial: Optional[np.ndarray] = None,
    ) -> TruncatedSolve:
        """
        Solve eps f + v3 f_x + L f = g on the slab with reflection factor 1 - 1/n.

        Args:
            g: Lifted source on ``slab.all_nodes``
            eps: Penalty, > 0
            n: Damping level (>= 2), or None for exact specular reflection
            slab: Slab grid
            lambda_schedule: Continuation targets ending at 1
            continuation: Use lambda-continuation; otherwise GMRES at lambda = 1
            initial: Starting guess for GMRES when continuation is off

        Raises:
            ContractionError: if the continuation increment falls below the
                configured minimum or GMRES stalls.
        """

        if eps <= 0.0:
            raise ValidationError(f"Penalty must be positive, got {eps}")
        if n is not None and n < 2:
            raise ValidationError(f"Damping level must be at least 2, got {n}")

        with stage_context(f"eps={eps:g} n=" + ("inf" if n is None else str(n))):
            return self._solve_truncated(g, eps, n, slab, lambda_schedule, continuation, initial)

    def _solve_truncated(
        self,
        g: np.ndarray,
        eps: float,
        n: Optional[int],
        slab: SlabGrid,
        lambda_schedule: Optional[Sequence[float]],
        continuation: bool,
        initial: Optional[np.ndarray],
    ) -> TruncatedSolve:
        g = np.asarray(g, dtype=float)
        if g.shape != (slab.size, self.grid.size):
            raise ValidationError(f"g must have shape {(slab.size, self.grid.size)}, got {g.shape}")
        validate_finite(g, "g")

        eta = 1.0 if n is None else 1.0 - 1.0 / n
        if not np.any(g):
            return TruncatedSolve(values=np.zeros_like(g), eps=eps, eta=eta)

        sweep = self.sweep_for(slab)
        steps: List[ContinuationStep] = []
        if continuation:
            values, steps = self._continuation(g, eps, eta, sweep, lambda_schedule or self.config.lambda_steps)
        else:
            swept_source = sweep.sweep(eps, eta, g)
            start = swept_source if initial is None else initial
            values = self._gmres(sweep, eps, eta, 1.0, swept_source, start)

        correction = 0.0
        raw = None
        if eta == 1.0:
            raw = values
            values, correction = self._remove_kernel_mean(values, slab)

        self.logger.debug(f"Truncated solve eps={eps:.1e} eta={eta:.4f} d={slab.d}: {len(steps)} lambda steps")
        return TruncatedSolve(
            values=values, eps=eps, eta=eta, lambda_steps=steps, kernel_correction=correction, raw_values=raw
        )

    # -- diagnostics of a solve ----------------------------------------------

    def mild_residual(self, values: np.ndarray, g: np.ndarray, slab: SlabGrid, eps: float = 0.0, eta: float = 1.0) -> float:
        """Weighted sup of f - S_(eps, eta)(g + K f)."""
        swept = self.sweep_for(slab).sweep(eps, eta, g + self.apply_K(values))
        return self.weighted_sup(values - swept)

    def energy_identity(self, values: np.ndarray, g: np.ndarray, slab: SlabGrid, eps: float) -> Dict[str, float]:
        """Both sides of eps|f|^2 + boundary flux + <Lf, f> = <g, f>, integrated over the slab."""

        grid = self.grid
        x = slab.all_nodes
        Lf = self.operator.nu * values - self.apply_K(values)
        penalty = eps * trapezoid(quad(grid, values * values), x)
        dissipation = trapezoid(quad(grid, values * Lf), x)
        boundary = 0.5 * (quad(grid, grid.v3 * values[-1] ** 2) - quad(grid, grid.v3 * values[0] ** 2))
        right = trapezoid(quad(grid, g * values), x)
        left = penalty + boundary + dissipation
        return {
            "penalty": float(penalty),
            "boundary": float(boundary),
            "dissipation": float(dissipation),
            "source": float(right),
            "relative_defect": float(abs(left - right) / max(abs(right), 1e-300)),
        }

    def dissipation_ratio(self, shifted: np.ndarray, g: np.ndarray, slab: SlabGrid, sigma: float) -> float:
        """int e^(2 sigma x) |(I-P) f|_nu^2 dx over int e^(2 sigma x) |g|^2 dx."""

        x = slab.all_nodes
        growth = np.exp(2.0 * sigma * x)
        micro = shifted - self.operator.project_P(shifted)
        numerator = trapezoid(growth * self.operator.nu_norm(micro) ** 2, x)
        denominator = trapezoid(growth * self.operator.norm(g) ** 2, x)
        return float(numerator / denominator) if denominator > 0.0 else 0.0

    # -- limits ---------------------------------------------------------------

    def _require_decreasing(self, values: List[float], name: str, history: Dict[str, List[float]]) -> None:
        floor = self.config.inner_tol * max(1.0, max(values, default=0.0))
        for earlier, later in zip(values, values[1:]):
            if later > earlier + floor:
                raise CauchyError(f"{name} differences are not decreasing: {values}", history)

    def select_n0(self, g: np.ndarray, slab: SlabGrid) -> Tuple[int, TruncatedSolve]:
        """Smallest candidate n whose damped continuation contracts at the first penalty."""

        eps = self.config.eps_schedule[0]
        ratios: List[float] = []
        for n in self.config.n0_candidates:
            try:
                solve = self.solve_truncated(g, eps, n, slab, continuation=True)
            except ContractionError as e:
                self.logger.info(f"Damping level n={n} does not contract: {e}")
                ratios.extend(e.ratios)
                continue
            self.logger.info(f"Selected n0 = {n}")
            return n, solve
        raise ContractionError(f"No damping level in {self.config.n0_candidates} contracts", ratios)

    def limit_eps_n(
        self,
        g: np.ndarray,
        slab: SlabGrid,
        report: Optional[SolveReport] = None,
        first_stage: bool = True,
        initial: Optional[np.ndarray] = None,
    ) -> Tuple[np.ndarray, TruncatedSolve]:
        """
        Take n -> infinity at the first penalty, then eps -> 0 with exact reflection.

        Returns:
            ``(limit, last)``: the eps-extrapolated field and the smallest-eps
            penalized solve

        Raises:
            CauchyError: if the n or eps differences stop decreasing.
        """

        cfg = self.config
        report = report if report is not None else SolveReport()
        eps_schedule = cfg.eps_schedule
        every = cfg.continuation == "every"
        lambda_records: List[Dict[str, Any]] = []

        if first_stage and cfg.n_study:
            if cfg.n_schedule:
                levels = list(cfg.n_schedule)
                first = self.solve_truncated(g, eps_schedule[0], levels[0], slab, continuation=True)
            else:
                n0, first = self.select_n0(g, slab)
                levels = [n0 * 2 ** i for i in range(cfg.n_levels)]
            lambda_records.extend(s.to_dict() for s in first.lambda_steps)

            n_fields = [first.values]
            for n in levels[1:]:
                solve = self.solve_truncated(
                    g, eps_schedule[0], n, slab, continuation=every, initial=n_fields[-1]
                )
                lambda_records.extend(s.to_dict() for s in solve.lambda_steps)
                n_fields.append(solve.values)

            n_differences = [self.weighted_sup(b - a) for a, b in zip(n_fields, n_fields[1:])]
            self.logger.info(f"n-study at eps={eps_schedule[0]}: levels {levels}, differences {n_differences}")
            self._require_decreasing(n_differences, "Damping", {"levels": levels, "differences": n_differences})
            n_limit = _richardson(n_fields[-2], n_fields[-1], 1.0 / levels[-2], 1.0 / levels[-1])
            report.record("n", levels=levels, differences=n_differences)
            initial = n_limit

        continuation_first = first_stage and not cfg.n_study
        fields: List[np.ndarray] = []
        solves: List[TruncatedSolve] = []
        for k, eps in enumerate(tqdm(eps_schedule, desc=f"penalty (d={slab.d:g})", disable=not self.show_progress)):
            solve = self.solve_truncated(
                g,
                eps,
                None,
                slab,
                continuation=every or (continuation_first and k == 0),
                initial=initial,
            )
            lambda_records.extend(s.to_dict() for s in solve.lambda_steps)
            fields.append(solve.values)
            solves.append(solve)
            initial = solve.values

        if first_stage and cfg.n_study:
            report.record("n", limit_gap=self.weighted_sup(n_limit - fields[0]))
        if lambda_records:
            report.record("lambda", steps=lambda_records)

        eps_differences = [self.weighted_sup(b - a) for a, b in zip(fields, fields[1:])]
        history = {"eps": list(eps_schedule), "differences": eps_differences}
        self.logger.info(f"eps-study on d={slab.d}: differences {eps_differences}")
        self._require_decreasing(eps_differences, "Penalty", history)

        slope = None
        if len(eps_differences) >= 2 and all(v > 0.0 for v in eps_differences):
            slope = float(np.polyfit(np.log(eps_schedule[:-1]), np.log(eps_differences), 1)[0])

        limit = _richardson(fields[-2], fields[-1], eps_schedule[-2], eps_schedule[-1])
        residual = self.mild_residual(limit, g, slab)
        report.record(
            "eps",
            schedule=list(eps_schedule),
            differences=eps_differences,
            slope=slope,
            kernel_corrections=[s.kernel_correction for s in solves],
            residual=residual,
            relative_residual=residual / max(self.weighted_sup(g), 1e-300),
            gmres_iterations=self.gmres_iterations,
        )
        return limit, solves[-1]

    # -- full slab and domain extension --------------------------------------

    @time_operation("solve_slab")
    def solve_slab(
        self,
        problem: LinearProblem,
        d: float,
        first_stage: bool = True,
        initial: Optional[KineticField] = None,
    ) -> LinearSolution:
        """Lift, take both limits, shift, and unlift on one slab of length d."""

        with stage_context(f"d={d:g}"):
            return self._solve_slab(problem, d, first_stage, initial)

    def _solve_slab(
        self,
        problem: LinearProblem,
        d: float,
        first_stage: bool,
        initial: Optional[KineticField],
    ) -> LinearSolution:
        cfg = self.config
        operator = self.operator
        slab = self.slab(d)
        report = SolveReport()

        compat = check_compatibility(operator, problem.boundary, cfg.compatibility_tol)
        report.record("compatibility", **compat.to_dict())
        g, chi = lift_boundary(operator, problem, slab, cfg.compatibility_tol)

        start = initial.at(slab.all_nodes) if initial is not None else None
        limit, penalized = self.limit_eps_n(g, slab, report, first_stage=first_stage, initial=start)

        phi = compute_shift_phi(operator, limit[-1])
        shifted = shift_field(operator, limit, phi)
        values = shifted - chi[:, None] * problem.boundary[None, :]
        solution_field = KineticField(slab.all_nodes, values)

        fit = fit_decay(solution_field, self.w, cfg.fit_window, floor=max(cfg.fit_floor, cfg.inner_tol))
        if fit.flagged:
            report.flag(f"Decay fit on d={d:g} is not positive: {fit.sigma}")
        elif not fit.computed and not fit.trivial:
            report.flag(f"Decay fit on d={d:g} not computed: {fit.samples} samples above the noise floor")

        report.record(
            "phi",
            values=phi.tolist(),
            residuals=shift_residuals(operator, shifted[-1]).tolist(),
        )
        report.record("decay", **fit.to_dict())
        report.record("energy", **self.energy_identity(penalized.values, g, slab, penalized.eps))
        report.record("energy", dissipation_ratio=self.dissipation_ratio(shifted, g, slab, cfg.decay_sigma))

        stages = {
            "penalized": SolveStage(
                "penalized",
                KineticField(slab.all_nodes, penalized.values),
                g,
                penalized.eps,
                raw=None if penalized.raw_values is None else KineticField(slab.all_nodes, penalized.raw_values),
            ),
            "unpenalized": SolveStage("unpenalized", KineticField(slab.all_nodes, limit), g, 0.0),
            "shifted": SolveStage("shifted", KineticField(slab.all_nodes, shifted), g, 0.0),
        }
        return LinearSolution(
            field=solution_field,
            macro=extract_macro(operator, solution_field),
            phi=phi,
            sigma_fit=fit,
            report=report,
            boundary=np.asarray(problem.boundary, dtype=float),
            cutoff=chi,
            stages=stages,
        )

    @time_operation("extend_domain")
    def extend_domain(self, problem: LinearProblem, schedule: Optional[Sequence[float]] = None) -> LinearSolution:
        """
        Solve on every slab length of the schedule and compare consecutive slabs.

        Raises:
            CauchyError: if the discrepancy on the common half-slab grows.
        """

        cfg = self.config
        schedule = list(schedule or cfg.d_schedule)
        solutions: List[LinearSolution] = []
        discrepancies: List[float] = []

        for i, d in enumerate(tqdm(schedule, desc="slab length", disable=not self.show_progress)):
            self.logger.info(f"Solving on slab d = {d:g}")
            previous = solutions[-1] if solutions else None
            initial = previous.stages["unpenalized"].field if previous else None
            solution = self.solve_slab(problem, d, first_stage=i == 0, initial=initial)

            if previous is not None:
                half = previous.field.x <= 0.5 * previous.field.d
                common = previous.field.x[half]
                gap = solution.field.at(common) - previous.field.values[half]
                discrepancies.append(self.weighted_sup(gap))
            solutions.append(solution)

        history = {"d": schedule, "discrepancies": discrepancies}
        self._require_decreasing(discrepancies, "Slab-doubling", history)

        final = solutions[-1]
        for earlier in solutions[:-1]:
            final.report.merge(earlier.report)

        sigmas = [s.sigma_fit.sigma for s in solutions]
        final.report.record("d", schedule=schedule, discrepancies=discrepancies, sigma_fits=sigmas)
        if discrepancies and discrepancies[-1] > cfg.cauchy_tol:
            final.report.flag(f"Slab-doubling discrepancy {discrepancies[-1]:.3e} is above {cfg.cauchy_tol:.1e}")
        valid = [s for s in sigmas if s is not None]
        if len(valid) >= 2 and abs(valid[-1] - valid[-2]) > 0.1 * abs(valid[-2]):
            final.report.flag(f"Decay rate changed by more than 10% on the last doubling: {valid[-2]:.4f} -> {valid[-1]:.4f}")

        return final


def solve_truncated(
    operator: OperatorSet,
    g: np.ndarray,
    eps: float,
    n: Optional[int],
    slab: SlabGrid,
    config: Optional[SolveConfig] = None,
    lambda_schedule: Optional[Sequence[float]] = None,
) -> TruncatedSolve:
    return TruncatedSolver(operator, config).solve_truncated(g, eps, n, slab, lambda_schedule=lambda_schedule)


def limit_eps_n(
    operator: OperatorSet,
    g: np.ndarray,
    slab: SlabGrid,
    config: Optional[SolveConfig] = None,
) -> np.ndarray:
    limit, _ = TruncatedSolver(operator, config).limit_eps_n(g, slab)
    return limit


def extend_domain(
    operator: OperatorSet,
    problem: LinearProblem,
    config: Optional[SolveConfig] = None,
    show_progress: bool = False,
) -> LinearSolution:
    return TruncatedSolver(operator, config, show_progress=show_progress).extend_domain(problem)
