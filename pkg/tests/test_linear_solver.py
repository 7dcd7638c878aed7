"""
Tests for the linear half-space solver
"""

import copy

import numpy as np
import pytest
from scipy.integrate import trapezoid

from kinetic_layer.config import BoundarySpec, SolveConfig, SourceSpec
from kinetic_layer.core.linear_solver import (
    EVEN_INVARIANTS,
    KineticField,
    LinearProblem,
    SolveReport,
    TruncatedSolver,
    check_compatibility,
    compute_shift_phi,
    cutoff,
    extract_macro,
    fit_decay,
    lift_boundary,
    shift_field,
    shift_residuals,
    solve_shift_system,
)
from kinetic_layer.core.problems import (
    DecayingMomentSource,
    TabulatedSource,
    build_boundary,
    build_source,
)
from kinetic_layer.core.transport import default_slab
from kinetic_layer.utils.exceptions import (
    CompatibilityError,
    OperatorAssemblyError,
    ProjectionError,
    ValidationError,
)


class TestCutoff:
    """Tests for the wall cutoff."""

    def test_cutoff_values(self):
        """Test chi = 1 on [0, 1], 0 beyond 2, monotone in between."""
        x = np.linspace(0.0, 3.0, 301)
        chi, dchi = cutoff(x)
        assert np.all(chi[x <= 1.0] == 1.0)
        assert np.all(chi[x >= 2.0] == 0.0)
        assert np.all(np.diff(chi) <= 0.0)
        assert np.all(dchi <= 0.0)

    def test_cutoff_derivative(self):
        """Test dchi against central differences."""
        x = np.linspace(1.05, 1.95, 19)
        h = 1e-6
        numeric = (cutoff(x + h)[0] - cutoff(x - h)[0]) / (2 * h)
        assert np.allclose(cutoff(x)[1], numeric, atol=1e-6)

    def test_cutoff_is_quintic(self):
        """Test the quintic ramp values and that chi'' vanishes at both ends."""
        chi, dchi = cutoff(np.array([1.5]))
        assert chi[0] == pytest.approx(0.5)
        assert dchi[0] == pytest.approx(-1.875)
        h = 1e-6
        for end in (1.0, 2.0):
            second = (cutoff(np.array([end + h]))[1] - cutoff(np.array([end - h]))[1]) / (2 * h)
            assert abs(second[0]) < 1e-4


class TestCompatibility:
    """Tests for the boundary flux conditions."""

    def test_zero_data_compatible(self, small_operator):
        """Test that f_b = 0 is compatible."""
        report = check_compatibility(small_operator, np.zeros(small_operator.grid.size))
        assert report.passed
        assert np.all(report.moments == 0.0)

    def test_v1v2_gaussian_compatible(self, small_operator):
        """Test that v1 v2 exp(-|v|^2) on v3 < 0 passes."""
        f_b = build_boundary(small_operator, BoundarySpec(family="v1v2_gaussian", amplitude=0.05))
        assert check_compatibility(small_operator, f_b).passed

    def test_v1_gaussian_incompatible(self, small_operator):
        """Test that v1 exp(-|v|^2) on v3 < 0 fails on the tangential momentum flux."""
        f_b = build_boundary(small_operator, BoundarySpec(family="v1_gaussian", amplitude=0.05))
        report = check_compatibility(small_operator, f_b)
        assert not report.passed
        assert abs(report.moments[1]) > 1e-6 * report.scale
        assert report.to_dict()["passed"] is False

    def test_outgoing_data_rejected(self, small_operator):
        """Test that f_b must vanish on v3 >= 0."""
        f_b = np.zeros(small_operator.grid.size)
        f_b[small_operator.grid.v3 > 0.0] = 1.0
        with pytest.raises(ValidationError):
            check_compatibility(small_operator, f_b)


class TestProblemFamilies:
    """Tests for built-in boundary data and sources."""

    def test_boundary_amplitude(self, small_operator):
        """Test sup |w f_b| equals the requested amplitude."""
        f_b = build_boundary(small_operator, BoundarySpec(family="v1v2_gaussian", amplitude=0.05))
        assert np.max(np.abs(small_operator.w * f_b)) == pytest.approx(0.05, rel=1e-12)
        assert np.all(f_b[small_operator.grid.v3 > 0.0] == 0.0)

    def test_tabulated_boundary(self, small_operator, tmp_path):
        """Test loading per-node boundary data from .npy."""
        values = np.zeros(small_operator.grid.size)
        values[small_operator.grid.v3 < 0.0] = 0.01
        path = tmp_path / "fb.npy"
        np.save(path, values)
        loaded = build_boundary(small_operator, BoundarySpec(family="tabulated", path=str(path)))
        assert np.array_equal(loaded, values)

    def test_tabulated_boundary_on_outgoing_nodes(self, small_operator, tmp_path):
        """Test that tabulated data on v3 >= 0 is rejected."""
        path = tmp_path / "fb.npy"
        np.save(path, np.ones(small_operator.grid.size))
        with pytest.raises(ValidationError):
            build_boundary(small_operator, BoundarySpec(family="tabulated", path=str(path)))

    def test_decaying_source(self, small_operator):
        """Test the decaying moment source: orthogonal, scaled and decaying."""
        source = build_source(small_operator, SourceSpec(family="decaying_moment", amplitude=0.01, rate=1.0), sigma0=0.3)
        assert isinstance(source, DecayingMomentSource)
        x = np.array([0.0, 1.0, 2.0])
        values = source(x)
        assert values.shape == (3, small_operator.grid.size)
        assert np.max(np.abs(small_operator.w / small_operator.nu * values[0])) == pytest.approx(0.01, rel=1e-12)
        assert np.allclose(values[1], np.exp(-1.0) * values[0])
        assert np.max(small_operator.null_component(values)) < 1e-12

    def test_slow_source_rejected(self, small_operator):
        """Test that a source decaying slower than sigma0 is rejected."""
        with pytest.raises(ValidationError):
            build_source(small_operator, SourceSpec(family="decaying_moment", amplitude=0.01, rate=0.1), sigma0=0.3)

    def test_tabulated_source_interpolates(self):
        """Test linear interpolation and zero extension of tabulated sources."""
        source = TabulatedSource(np.array([0.0, 1.0]), np.array([[0.0, 2.0], [1.0, 4.0]]))
        assert np.allclose(source(np.array([0.5, 3.0])), [[0.5, 3.0], [0.0, 0.0]])


class TestLift:
    """Tests for lifting to homogeneous specular data."""

    def setup_method(self):
        """Set up a slab."""
        self.slab = default_slab(4.0, spacing_fraction=0.1, refine_levels=2)

    def test_lift_moments_vanish(self, small_operator):
        """Test that g has no even invariant moments and vanishes beyond x = 2."""
        f_b = build_boundary(small_operator, BoundarySpec(family="v1v2_gaussian", amplitude=0.05))
        g, chi = lift_boundary(small_operator, LinearProblem(f_b), self.slab)
        grid = small_operator.grid
        assert g.shape == (self.slab.size, grid.size)
        moments = (g * grid.weights) @ small_operator.invariants[:, EVEN_INVARIANTS]
        assert np.max(np.abs(moments)) < 1e-10
        far = self.slab.all_nodes >= 2.0
        assert np.all(g[far] == 0.0)
        assert np.all(chi[self.slab.all_nodes <= 1.0] == 1.0)

    def test_lift_rejects_incompatible_data(self, small_operator):
        """Test that incompatible data raises with its moments."""
        f_b = build_boundary(small_operator, BoundarySpec(family="v1_gaussian", amplitude=0.05))
        with pytest.raises(CompatibilityError) as excinfo:
            lift_boundary(small_operator, LinearProblem(f_b), self.slab)
        assert len(excinfo.value.moments) == 4

    def test_lift_rejects_source_with_invariants(self, small_operator):
        """Test that a source with a null-space component is rejected."""
        sqrt_mu = small_operator.sqrt_mu
        problem = LinearProblem(np.zeros(small_operator.grid.size), DecayingMomentSource(sqrt_mu, 1.0))
        with pytest.raises(ProjectionError):
            lift_boundary(small_operator, problem, self.slab)


class TestShift:
    """Tests for the far-end shift by collision invariants."""

    def test_shift_system_example(self):
        """Test right side (1, 0, 0, 1) with unit kappas gives (1, 0, 0, -1)."""
        phi = solve_shift_system(np.array([1.0, 0.0, 0.0, 1.0]), 1.0, 1.0)
        assert np.allclose(phi, [1.0, 0.0, 0.0, -1.0])

    def test_shift_removes_macroscopic_trace(self, small_operator):
        """Test that a purely macroscopic trace is shifted to its b3 part."""
        coefficients = np.array([0.3, -0.2, 0.1, 0.05, 0.4])
        trace = small_operator.invariants @ coefficients
        phi = compute_shift_phi(small_operator, trace)
        assert np.allclose(phi, -coefficients[EVEN_INVARIANTS], atol=1e-10)
        shifted = shift_field(small_operator, trace[None, :], phi)[0]
        assert np.allclose(small_operator.macro_coefficients(shifted), [0.0, 0.0, 0.0, 0.05, 0.0], atol=1e-10)

    def test_singular_shift_system(self, small_operator):
        """Test that a vanishing kappa is reported as an assembly failure."""
        broken = copy.copy(small_operator)
        broken.kappa1 = 0.0
        with pytest.raises(OperatorAssemblyError):
            compute_shift_phi(broken, small_operator.sqrt_mu)


class TestFieldsAndFits:
    """Tests for kinetic fields, macroscopic profiles and decay fits."""

    def test_field_interpolation(self):
        """Test linear interpolation in x and zero beyond the slab."""
        field = KineticField(np.array([0.0, 1.0, 2.0]), np.array([[0.0, 1.0], [1.0, 1.0], [2.0, 1.0]]))
        assert field.d == 2.0
        assert np.allclose(field.at(np.array([0.5, 3.0])), [[0.5, 1.0], [0.0, 0.0]])

    def test_field_shape_checked(self):
        """Test that values must have one row per x node."""
        with pytest.raises(ValidationError):
            KineticField(np.array([0.0, 1.0]), np.zeros((3, 4)))

    def test_extract_macro(self, small_operator):
        """Test that macroscopic coefficients are read per x node."""
        x = np.array([0.0, 1.0])
        values = np.stack([small_operator.invariants[:, 0], 2.0 * small_operator.invariants[:, 4]])
        macro = extract_macro(small_operator, KineticField(x, values))
        assert np.allclose(macro.a, [1.0, 0.0], atol=1e-12)
        assert np.allclose(macro.c, [0.0, 2.0], atol=1e-12)
        assert list(macro.as_columns()) == ["x", "a", "b1", "b2", "b3", "c"]

    def test_fit_decay_exponential(self):
        """Test the fitted rate of an exact exponential."""
        x = np.linspace(0.0, 8.0, 81)
        field = KineticField(x, np.exp(-x)[:, None] * np.array([[1.0, -0.5]]))
        fit = fit_decay(field, np.ones(2))
        assert fit.sigma == pytest.approx(1.0, rel=1e-10)
        assert fit.amplitude == pytest.approx(1.0, rel=1e-10)
        assert not fit.flagged

    def test_fit_decay_trivial(self):
        """Test that a zero field yields the trivial marker."""
        fit = fit_decay(KineticField(np.linspace(0.0, 4.0, 5), np.zeros((5, 3))), np.ones(3))
        assert fit.trivial and fit.sigma is None

    def test_fit_decay_growth_flagged(self):
        """Test that a growing profile is flagged rather than raised."""
        x = np.linspace(0.0, 8.0, 81)
        fit = fit_decay(KineticField(x, np.exp(0.5 * x)[:, None]), np.ones(1))
        assert fit.flagged
        assert fit.computed
        assert fit.sigma == pytest.approx(-0.5, rel=1e-10)

    def test_fit_decay_drops_samples_below_floor(self):
        """Test that a round-off plateau below the floor does not bend the fitted rate."""
        x = np.linspace(0.0, 8.0, 81)
        field = KineticField(x, np.maximum(np.exp(-10.0 * x), 1e-15)[:, None])
        fit = fit_decay(field, np.ones(1), floor=1e-12)
        assert fit.samples == 8
        assert fit.sigma == pytest.approx(10.0, rel=1e-8)
        polluted = fit_decay(field, np.ones(1), floor=1e-20)
        assert polluted.samples == 21
        assert polluted.sigma < 9.0

    def test_fit_decay_window_starts_after_cutoff(self):
        """Test that the profile inside the cutoff ramp is left out even when the window starts at 0."""
        x = np.linspace(0.0, 8.0, 81)
        profile = np.exp(-x - 2.0 * np.maximum(2.0 - x, 0.0))
        fit = fit_decay(KineticField(x, profile[:, None]), np.ones(1), window=(0.0, 0.5))
        assert fit.sigma == pytest.approx(1.0, rel=1e-10)
        assert fit.samples == 21

    def test_fit_decay_not_computed(self):
        """Test the marker for too few samples, on a short slab and below the floor."""
        short = np.linspace(0.0, 2.0, 21)
        fit = fit_decay(KineticField(short, np.exp(-short)[:, None]), np.ones(1))
        assert not fit.computed and fit.sigma is None
        assert not fit.trivial and not fit.flagged
        assert fit.samples == 1

        x = np.linspace(0.0, 4.0, 41)
        fit = fit_decay(KineticField(x, np.exp(-20.0 * x)[:, None]), np.ones(1))
        assert not fit.computed
        assert fit.samples == 0
        assert fit.to_dict()["computed"] is False

    def test_solve_report(self):
        """Test recording, flagging and merging of report sections."""
        report = SolveReport()
        report.record("eps", differences=[1.0])
        report.flag("first")
        other = SolveReport()
        other.record("eps", differences=[2.0])
        other.record("n", levels=[4, 8])
        other.flag("first")
        other.flag("second")
        report.merge(other)
        document = report.to_dict()
        assert document["eps"] == {"differences": [1.0]}
        assert document["n"] == {"levels": [4, 8]}
        assert document["flags"] == ["first", "second"]


class TestTruncatedSolver:
    """Tests for solves on a fixed slab."""

    def setup_method(self):
        """Set up schedules."""
        self.config = SolveConfig(
            lambda_steps=[0.5, 1.0],
            n_schedule=[4, 8, 16],
            eps_schedule=[1e-1, 5e-2],
            d_schedule=[2.0],
            x_spacing_fraction=0.1,
            refine_levels=2,
            inner_tol=1e-10,
        )

    def _lifted(self, operator, slab):
        f_b = build_boundary(operator, BoundarySpec(family="v1v2_gaussian", amplitude=0.05))
        g, _ = lift_boundary(operator, LinearProblem(f_b), slab)
        return g

    def test_zero_source_gives_zero(self, small_operator):
        """Test that g = 0 is solved by f = 0 without iterating."""
        solver = TruncatedSolver(small_operator, self.config)
        slab = solver.slab(2.0)
        result = solver.solve_truncated(np.zeros((slab.size, small_operator.grid.size)), 0.1, 4, slab)
        assert not np.any(result.values)
        assert result.lambda_steps == []

    def test_invalid_penalty_and_level(self, small_operator):
        """Test rejection of eps <= 0 and n < 2."""
        solver = TruncatedSolver(small_operator, self.config)
        slab = solver.slab(2.0)
        g = np.zeros((slab.size, small_operator.grid.size))
        with pytest.raises(ValidationError):
            solver.solve_truncated(g, 0.0, 4, slab)
        with pytest.raises(ValidationError):
            solver.solve_truncated(g, 0.1, 1, slab)

    def test_continuation_solves_mild_equation(self, small_operator):
        """Test f = S(g + K f) after continuation at eps = 0.1, n = 4."""
        solver = TruncatedSolver(small_operator, self.config)
        slab = solver.slab(2.0)
        g = self._lifted(small_operator, slab)
        result = solver.solve_truncated(g, 0.1, 4, slab, continuation=True)

        assert result.eta == pytest.approx(0.75)
        assert result.lambda_steps and result.lambda_steps[-1].accepted
        assert result.lambda_steps[-1].lam_to == pytest.approx(1.0)
        for step in result.lambda_steps:
            if step.accepted and step.ratios:
                assert max(step.ratios) <= self.config.max_contraction
        residual = solver.mild_residual(result.values, g, slab, eps=0.1, eta=0.75)
        assert residual <= 1e-6 * solver.weighted_sup(g)

    def test_solution_is_linear_in_data(self, small_operator):
        """Test that doubling the data doubles the solution."""
        solver = TruncatedSolver(small_operator, self.config)
        slab = solver.slab(2.0)
        g = self._lifted(small_operator, slab)
        single = solver.solve_truncated(g, 0.1, 4, slab, continuation=False)
        double = solver.solve_truncated(2.0 * g, 0.1, 4, slab, continuation=False)
        assert np.allclose(double.values, 2.0 * single.values, atol=1e-7 * np.abs(single.values).max())

    def _moment_source(self, operator, slab):
        """Decaying heat-flux source, whose solution carries nonzero a and c profiles."""
        return np.exp(-slab.all_nodes)[:, None] * operator.moments["B3"][None, :]

    def test_penalized_identity_before_kernel_mean_removal(self, small_operator):
        """Test eps int <f, psi> dx = 0 for the even invariants on the uncorrected penalized solve."""
        config = self.config.model_copy(update={"x_max_spacing": 0.025})
        solver = TruncatedSolver(small_operator, config)
        slab = solver.slab(2.0)
        grid = small_operator.grid
        result = solver.solve_truncated(self._moment_source(small_operator, slab), 0.1, None, slab)

        assert result.raw_values is not None
        even = small_operator.invariants[:, EVEN_INVARIANTS]
        moments = (result.raw_values * grid.weights) @ even
        integrals = trapezoid(moments, slab.all_nodes, axis=0)
        scale = trapezoid(np.abs(moments), slab.all_nodes, axis=0)
        assert np.max(scale) > 0.0
        assert np.all(np.abs(integrals) <= 0.05 * scale + 1e-14)

        corrected, size = solver._remove_kernel_mean(result.raw_values, slab)
        assert size == pytest.approx(result.kernel_correction, rel=1e-12, abs=1e-300)
        assert np.allclose(corrected, result.values, rtol=0, atol=1e-14 * np.abs(result.values).max())
        means = trapezoid((result.values * grid.weights) @ even, slab.all_nodes, axis=0) / slab.d
        assert np.max(np.abs(means)) < 1e-12

    def test_damped_solve_keeps_kernel_part(self, small_operator):
        """Test that solves with damped reflection are returned without mean removal."""
        solver = TruncatedSolver(small_operator, self.config)
        slab = solver.slab(2.0)
        result = solver.solve_truncated(self._moment_source(small_operator, slab), 0.1, 4, slab)
        assert result.raw_values is None
        assert result.kernel_correction == 0.0

    def test_energy_identity(self, small_operator):
        """Test eps|f|^2 + boundary flux + <Lf, f> = <g, f> on a penalized specular solve."""
        config = self.config.model_copy(update={"x_max_spacing": 0.025})
        solver = TruncatedSolver(small_operator, config)
        slab = solver.slab(2.0)
        g = self._lifted(small_operator, slab)
        result = solver.solve_truncated(g, 0.1, None, slab)
        energy = solver.energy_identity(result.values, g, slab, result.eps)

        assert energy["penalty"] > 0.0
        assert energy["dissipation"] >= -1e-10 * energy["penalty"]
        assert abs(energy["boundary"]) <= 1e-10 * (energy["penalty"] + energy["dissipation"])
        assert energy["relative_defect"] <= 1e-2

    def test_trivial_problem(self, small_operator):
        """Test that zero data gives the zero solution on every slab."""
        config = self.config.model_copy(update={"d_schedule": [2.0, 4.0]})
        solver = TruncatedSolver(small_operator, config)
        problem = LinearProblem(np.zeros(small_operator.grid.size))
        solution = solver.extend_domain(problem)

        assert solution.field.d == 4.0
        assert not np.any(solution.field.values)
        assert solution.sigma_fit.trivial
        assert np.allclose(solution.phi, 0.0)
        assert solution.report.sections["d"]["discrepancies"] == [0.0]
        assert solution.report.sections["compatibility"]["passed"]

    def test_linear_pipeline(self, small_operator, fast_solve_config):
        """Test the full linear pipeline on compatible data over three slab lengths."""
        config = fast_solve_config.model_copy(update={"d_schedule": [2.0, 4.0, 8.0], "x_max_spacing": 0.1})
        f_b = build_boundary(small_operator, BoundarySpec(family="v1v2_gaussian", amplitude=0.05))
        solver = TruncatedSolver(small_operator, config)
        solution = solver.extend_domain(LinearProblem(f_b))
        grid = small_operator.grid

        values = solution.field.values
        assert np.all(np.isfinite(values))
        assert solution.field.d == 8.0

        incoming = grid.v3 > 0.0
        mirror = grid.reflect[incoming]
        relation = values[0, incoming] - values[0, mirror] - f_b[mirror]
        assert np.max(np.abs(relation)) <= 1e-10

        scale = np.abs(values).max()
        assert np.max(np.abs(solution.macro.b3)) <= 1e-8 * scale
        mass_flux = (values * grid.weights * grid.v3 * small_operator.sqrt_mu).sum(axis=1)
        assert np.max(np.abs(mass_flux)) <= 1e-8 * scale

        sections = solution.report.sections
        for name in ("compatibility", "n", "eps", "phi", "decay", "energy", "d"):
            assert name in sections
        discrepancies = sections["d"]["discrepancies"]
        assert len(discrepancies) == 2
        assert discrepancies[1] <= discrepancies[0] + config.inner_tol
        assert len(sections["n"]["differences"]) == 2
        floor = config.inner_tol
        assert sections["n"]["differences"][1] <= sections["n"]["differences"][0] + floor
        assert sections["eps"]["differences"][1] <= sections["eps"]["differences"][0] + floor
        assert set(solution.stages) == {"penalized", "unpenalized", "shifted"}

        unshifted = shift_residuals(small_operator, solution.stages["unpenalized"].field.values[-1])
        residuals = np.array(sections["phi"]["residuals"])
        assert np.max(np.abs(residuals)) <= 1e-8 * max(np.max(np.abs(unshifted)), scale)

        assert solution.sigma_fit.computed
        assert solution.sigma_fit.sigma > 0.0
        assert all(sigma is None or sigma > 0.0 for sigma in sections["d"]["sigma_fits"])

    @pytest.mark.slow
    def test_decay_fit_stable_across_slab_lengths(self, small_operator, fast_solve_config):
        """Test that the fitted decay rate on d = 4, 8, 16 is positive and changes by less than 25%."""
        config = fast_solve_config.model_copy(update={"d_schedule": [4.0, 8.0, 16.0], "x_max_spacing": 0.1})
        f_b = build_boundary(small_operator, BoundarySpec(family="v1v2_gaussian", amplitude=0.05))
        solution = TruncatedSolver(small_operator, config).extend_domain(LinearProblem(f_b))

        sigmas = solution.report.sections["d"]["sigma_fits"]
        assert len(sigmas) == 3
        assert all(sigma is not None and sigma > 0.0 for sigma in sigmas)
        for earlier, later in zip(sigmas, sigmas[1:]):
            assert later == pytest.approx(earlier, rel=0.25)
        assert solution.sigma_fit.samples >= 3
