"""
Tests for the Picard iteration
"""

import numpy as np
import pytest

from kinetic_layer.config import BoundarySpec, SolveConfig
from kinetic_layer.core.nonlinear_solver import (
    NonlinearProblem,
    PicardSolver,
    SmallnessReport,
    check_smallness,
)
from kinetic_layer.core.problems import DecayingMomentSource, build_boundary
from kinetic_layer.core.transport import default_slab
from kinetic_layer.utils.exceptions import CompatibilityError


@pytest.fixture
def picard_config():
    """One short slab and short schedules."""
    return SolveConfig(
        lambda_steps=[0.5, 1.0],
        n_schedule=[4, 8],
        eps_schedule=[1e-1, 5e-2],
        d_schedule=[1.0],
        x_spacing_fraction=0.25,
        refine_levels=2,
        inner_tol=1e-10,
        angular_rule=(4, 2),
        picard_tol=1e-9,
        picard_max_iter=12,
    )


class TestSmallness:
    """Tests for the data size check."""

    def test_delta_sums_boundary_and_source(self, small_operator):
        """Test delta = |w f_b| + |nu^-1 w exp(sigma0 x) S| on the slab."""
        slab = default_slab(2.0, spacing_fraction=0.25, refine_levels=0)
        f_b = build_boundary(small_operator, BoundarySpec(family="v1v2_gaussian", amplitude=0.02))
        profile = small_operator.nu / small_operator.w * 1e-3
        problem = NonlinearProblem(f_b, DecayingMomentSource(profile, 0.3), sigma0=0.3)

        report = check_smallness(small_operator, problem, slab, threshold=0.1)
        assert report.boundary_norm == pytest.approx(0.02, rel=1e-12)
        # exp(0.3 x) exp(-0.3 x) = 1 everywhere
        assert report.source_norm == pytest.approx(1e-3, rel=1e-12)
        assert report.delta == pytest.approx(0.021, rel=1e-12)
        assert report.small

    def test_large_data_is_advisory(self):
        """Test that exceeding the threshold is only reported."""
        report = SmallnessReport(delta=0.5, boundary_norm=0.5, source_norm=0.0, threshold=0.1)
        assert not report.small
        assert report.to_dict()["small"] is False


class TestPicardSolver:
    """Tests for the nonlinear solve."""

    def test_incompatible_data_rejected(self, small_operator, picard_config):
        """Test that the flux conditions are checked before iterating."""
        f_b = build_boundary(small_operator, BoundarySpec(family="v1_gaussian", amplitude=0.01))
        with pytest.raises(CompatibilityError):
            PicardSolver(small_operator, picard_config).solve(NonlinearProblem(f_b))

    def test_from_linear_keeps_data(self, small_operator):
        """Test conversion of a linear problem."""
        from kinetic_layer.core.linear_solver import LinearProblem

        f_b = np.zeros(small_operator.grid.size)
        problem = NonlinearProblem.from_linear(LinearProblem(f_b, sigma0=0.4))
        assert problem.boundary is f_b
        assert problem.sigma0 == 0.4
        assert not np.any(problem.source_on(np.array([0.0, 1.0]), small_operator.grid.size))

    def test_boundary_defect(self, small_operator, picard_config):
        """Test the specular boundary relation measure on a hand-built trace."""
        grid = small_operator.grid
        f_b = build_boundary(small_operator, BoundarySpec(family="v1v2_gaussian", amplitude=0.02))
        values = np.zeros((2, grid.size))
        values[0, grid.v3 < 0.0] = -f_b[grid.v3 < 0.0]
        solver = PicardSolver(small_operator, picard_config)
        assert solver.boundary_defect(values, f_b) == 0.0
        values[0, grid.v3 > 0.0] += 1e-3
        assert solver.boundary_defect(values, f_b) == pytest.approx(1e-3)

    def test_zero_data_converges_immediately(self, small_operator, picard_config):
        """Test that zero data gives the zero solution after one iterate."""
        result = PicardSolver(small_operator, picard_config).solve(
            NonlinearProblem(np.zeros(small_operator.grid.size))
        )
        assert result.converged
        assert result.iterations == 1
        assert result.differences == [0.0]
        assert not np.any(result.solution.field.values)
        assert result.solution.report.sections["nonlinear"]["delta"] == 0.0

    def test_picard_contracts_for_small_data(self, small_operator, picard_config):
        """Test contraction, the boundary relation and the nonlinear report."""
        f_b = build_boundary(small_operator, BoundarySpec(family="v1v2_gaussian", amplitude=0.01))
        result = PicardSolver(small_operator, picard_config).solve(NonlinearProblem(f_b))

        assert result.smallness.small
        assert result.iterations >= 2
        assert all(r < 1.0 for r in result.ratios)
        assert result.boundary_defect <= 1e-10
        assert np.all(np.isfinite(result.solution.field.values))
        assert result.bound > 0.0

        section = result.solution.report.sections["nonlinear"]
        assert section["iterations"] == result.iterations
        assert section["differences"] == result.differences
        assert len(section["gamma_defects"]) == result.iterations - 1
        assert section["picard_tol"] == picard_config.picard_tol
        assert section["residual_tol"] == pytest.approx(picard_config.picard_tol + 2.0 * section["linear_residual"])
        assert section["residual_within_tol"] is result.residual_within_tol
        assert result.residual_within_tol
        assert result.residual <= section["residual_tol"]

    def test_picard_delta_halving_trend(self, small_operator, picard_config):
        """Test that halving the data halves the solution and quarters the quadratic correction."""
        results = []
        for amplitude in (0.01, 0.005):
            f_b = build_boundary(small_operator, BoundarySpec(family="v1v2_gaussian", amplitude=amplitude))
            results.append(PicardSolver(small_operator, picard_config).solve(NonlinearProblem(f_b)))
        full, half = results

        assert full.converged and half.converged
        assert full.residual_within_tol and half.residual_within_tol
        assert 0.4 < half.norms[-1] / full.norms[-1] < 0.6
        # the first Picard correction is Gamma of the linear solution
        assert 0.15 < half.differences[1] / full.differences[1] < 0.35
        assert half.smallness.delta == pytest.approx(0.5 * full.smallness.delta, rel=1e-12)
