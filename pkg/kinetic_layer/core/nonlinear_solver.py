"""
Picard iteration for the nonlinear half-space problem
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from ..config import SolveConfig, WeightSpec
from ..utils.exceptions import CompatibilityError, ContractionError
from ..utils.logger import get_logger, stage_context
from ..utils.performance import PerformanceMonitor, time_operation
from .linear_solver import (
    KineticField,
    LinearProblem,
    LinearSolution,
    TruncatedSolver,
    check_compatibility,
    lift_boundary,
)
from .operator import OperatorSet
from .problems import TabulatedSource
from .transport import SlabGrid

logger = get_logger(__name__)


@dataclass
class NonlinearProblem:
    """Boundary data f_b and a source S in the null-space complement."""

    boundary: np.ndarray
    source: Optional[Callable[[np.ndarray], np.ndarray]] = None
    sigma0: float = 0.3
    weight: WeightSpec = field(default_factory=WeightSpec)

    @classmethod
    def from_linear(cls, problem: LinearProblem) -> "NonlinearProblem":
        return cls(problem.boundary, problem.source, problem.sigma0, problem.weight)

    def with_source_values(self, x: np.ndarray, values: np.ndarray) -> LinearProblem:
        return LinearProblem(self.boundary, TabulatedSource(x, values), self.sigma0, self.weight)

    def source_on(self, x: np.ndarray, node_count: int) -> np.ndarray:
        return LinearProblem(self.boundary, self.source).source_on(x, node_count)


@dataclass
class SmallnessReport:
    """delta = |w f_b|_inf + |nu^-1 w exp(sigma0 x) S|_inf against an advisory threshold."""

    delta: float
    boundary_norm: float
    source_norm: float
    threshold: float

    @property
    def small(self) -> bool:
        return self.delta <= self.threshold

    def to_dict(self) -> Dict[str, Any]:
        return {
            "delta": self.delta,
            "boundary_norm": self.boundary_norm,
            "source_norm": self.source_norm,
            "threshold": self.threshold,
            "small": self.small,
        }


@dataclass
class NonlinearResult:
    solution: LinearSolution
    smallness: SmallnessReport
    differences: List[float] = field(default_factory=list)
    ratios: List[float] = field(default_factory=list)
    norms: List[float] = field(default_factory=list)
    c1: float = 0.0
    bound: float = 0.0
    residual: float = 0.0
    boundary_defect: float = 0.0
    residual_within_tol: bool = False
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.differences)


def check_smallness(
    operator: OperatorSet,
    problem: NonlinearProblem,
    slab: SlabGrid,
    threshold: float = 0.1,
) -> SmallnessReport:
    """Measure the size of the data on the slab nodes; the verdict is advisory."""

    x = slab.all_nodes
    w = operator.w
    boundary_norm = float(np.max(np.abs(w * problem.boundary)))
    source = problem.source_on(x, operator.grid.size)
    scaled = np.exp(problem.sigma0 * x)[:, None] * (w / operator.nu)[None, :] * source
    source_norm = float(np.max(np.abs(scaled)))
    return SmallnessReport(boundary_norm + source_norm, boundary_norm, source_norm, threshold)


class PicardSolver:
    """Iterate f^(j+1) = linear solution with source Gamma(f^j, f^j) + S on one slab."""

    def __init__(self, operator: OperatorSet, config: Optional[SolveConfig] = None, show_progress: bool = False):
        self.operator = operator
        self.config = config or SolveConfig()
        self.linear = TruncatedSolver(operator, self.config, show_progress=show_progress)
        self.performance_monitor = PerformanceMonitor()
        self.logger = get_logger(__name__)

    def _weighted(self, values: np.ndarray, growth: np.ndarray) -> float:
        return float(np.max(np.abs(growth[:, None] * values * self.operator.w[None, :])))

    def boundary_defect(self, values: np.ndarray, boundary: np.ndarray) -> float:
        """max over incoming v of |f(0, v) - f(0, Rv) - f_b(Rv)|."""
        grid = self.operator.grid
        trace = values[0]
        incoming = grid.v3 > 0.0
        mirror = grid.reflect[incoming]
        return float(np.max(np.abs(trace[incoming] - trace[mirror] - boundary[mirror])))

    @time_operation("picard_solve")
    def solve(self, problem: NonlinearProblem) -> NonlinearResult:
        """
        Run the Picard iteration on the largest slab of the schedule.

        Raises:
            CompatibilityError: if the boundary data is incompatible.
            ContractionError: if successive differences stop contracting.
        """

        cfg = self.config
        operator = self.operator
        grid = operator.grid

        compat = check_compatibility(operator, problem.boundary, cfg.compatibility_tol)
        if not compat.passed:
            raise CompatibilityError("Boundary data is incompatible", compat.moments.tolist())

        d = max(cfg.d_schedule)
        slab = self.linear.slab(d)
        x = slab.all_nodes
        growth = np.exp(cfg.decay_sigma * x)

        smallness = check_smallness(operator, problem, slab, cfg.delta_threshold)
        if not smallness.small:
            self.logger.warning(
                f"delta = {smallness.delta:.3e} exceeds the advisory threshold {cfg.delta_threshold:.3e}"
            )

        source = problem.source_on(x, grid.size)
        previous = np.zeros((x.size, grid.size))
        result: Optional[NonlinearResult] = None
        initial: Optional[KineticField] = None
        gamma_defects: List[float] = []

        for j in range(cfg.picard_max_iter):
            if j == 0:
                values = source
            else:
                values = source + operator.gamma_bilinear(previous, previous)
                gamma_defects.append(operator.collision.last_defect)

            with stage_context(f"picard {j}"):
                solution = self.linear.solve_slab(
                    problem.with_source_values(x, values), d, first_stage=j == 0, initial=initial
                )
            current = solution.field.values
            initial = solution.stages["unpenalized"].field

            if result is None:
                result = NonlinearResult(solution=solution, smallness=smallness)
                norm0 = self._weighted(current, growth)
                gap = problem.sigma0 - cfg.decay_sigma
                result.c1 = norm0 * gap / smallness.delta if smallness.delta > 0.0 else 0.0
                result.bound = 2.0 * result.c1 * smallness.delta / gap
            else:
                result.solution = solution

            difference = self._weighted(current - previous, growth)
            result.differences.append(difference)
            result.norms.append(self._weighted(current, growth))
            if len(result.differences) > 1 and result.differences[-2] > 0.0:
                ratio = difference / result.differences[-2]
                result.ratios.append(ratio)
                if ratio >= 1.0:
                    raise ContractionError(
                        f"Picard iteration does not contract (ratio {ratio:.3f}); delta = {smallness.delta:.3e} is too large",
                        result.ratios,
                    )
            if result.norms[-1] > result.bound * (1.0 + 1e-9) + 1e-300:
                solution.report.flag(
                    f"Iterate {j} norm {result.norms[-1]:.3e} exceeds the bound 2 C1 delta / (sigma0 - sigma) = {result.bound:.3e}"
                )

            self.logger.info(f"Picard iterate {j}: difference {difference:.3e}")
            previous = current
            if difference < cfg.picard_tol:
                result.converged = True
                break

        if not result.converged:
            result.solution.report.flag(f"Picard iteration stopped after {cfg.picard_max_iter} iterates")

        final = result.solution
        lifted = final.stages["shifted"].field.values
        nonlinear_source = source + operator.gamma_bilinear(final.field.values, final.field.values)
        g, _ = lift_boundary(operator, problem.with_source_values(x, nonlinear_source), slab, cfg.compatibility_tol)
        result.residual = self.linear.mild_residual(lifted, g, slab)
        result.boundary_defect = self.boundary_defect(final.field.values, problem.boundary)

        # residual of the last linear solve, whose source used Gamma of the previous iterate
        g_last, _ = lift_boundary(operator, problem.with_source_values(x, values), slab, cfg.compatibility_tol)
        linear_residual = self.linear.mild_residual(lifted, g_last, slab)
        residual_tol = cfg.picard_tol + 2.0 * linear_residual
        result.residual_within_tol = bool(result.residual <= residual_tol)
        if not result.residual_within_tol:
            final.report.flag(
                f"Nonlinear residual {result.residual:.3e} exceeds picard_tol + 2 x linear residual = {residual_tol:.3e}"
            )

        final.report.record(
            "nonlinear",
            **smallness.to_dict(),
            differences=result.differences,
            ratios=result.ratios,
            norms=result.norms,
            c1=result.c1,
            bound=result.bound,
            residual=result.residual,
            picard_tol=cfg.picard_tol,
            linear_residual=linear_residual,
            residual_tol=residual_tol,
            residual_within_tol=result.residual_within_tol,
            boundary_defect=result.boundary_defect,
            gamma_defects=gamma_defects,
            iterations=result.iterations,
            converged=result.converged,
        )
        return result


def picard_solve(
    operator: OperatorSet,
    problem: NonlinearProblem,
    config: Optional[SolveConfig] = None,
    show_progress: bool = False,
) -> NonlinearResult:
    return PicardSolver(operator, config, show_progress=show_progress).solve(problem)
