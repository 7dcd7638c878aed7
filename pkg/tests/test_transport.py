"""
Tests for characteristic transport on the slab
"""

import numpy as np
import pytest

from kinetic_layer.core.operator import collision_frequency
from kinetic_layer.core.transport import (
    CharacteristicSweep,
    SlabGrid,
    backward_exit,
    build_cycle,
    cycle_sum_closed_form,
    default_slab,
    sweep_mild,
)
from kinetic_layer.utils.exceptions import TransportError, ValidationError


def uniform_slab(d: float, cells: int) -> SlabGrid:
    return SlabGrid(d=d, x_nodes=np.linspace(0.0, d, cells + 1)[1:-1])


def manufactured(grid, x):
    """Smooth exact solution h(x, v) and its x-derivative."""
    profile = np.exp(-0.25 * grid.speed2) * (1.0 + 0.3 * grid.v3)
    h = (1.0 + 0.5 * np.sin(2.0 * x))[:, None] * profile[None, :]
    dh = np.cos(2.0 * x)[:, None] * profile[None, :]
    return h, dh


def wall_data(grid, h, damp):
    """Incoming data making h satisfy h = damp * h o R + src at both walls."""
    src = np.zeros(grid.size)
    up = grid.v3 > 0.0
    down = ~up
    src[up] = h[0, up] - damp * h[0, grid.reflect[up]]
    src[down] = h[-1, down] - damp * h[-1, grid.reflect[down]]
    return src


class TestBackwardExit:
    """Tests for backward exit times and cycles."""

    def test_straight_line_exit(self):
        """Test (x=0.5, v3=0.25, d=1) exits backwards at the left wall after t=2."""
        assert backward_exit(0.5, 0.25, 1.0) == (2.0, 0.0)

    def test_exit_through_far_wall(self):
        """Test that negative v3 exits backwards through x = d."""
        t_b, x_b = backward_exit(0.25, -0.5, 1.0)
        assert t_b == pytest.approx(1.5)
        assert x_b == 1.0

    def test_grazing_rejected(self):
        """Test that v3 = 0 has no exit."""
        with pytest.raises(TransportError):
            backward_exit(0.5, 0.0, 1.0)

    def test_outside_slab_rejected(self):
        """Test that positions outside [0, d] are rejected."""
        with pytest.raises(TransportError):
            backward_exit(1.5, 0.5, 1.0)

    def test_cycle_bounces_between_walls(self):
        """Test positions, times and velocities of a back-time cycle."""
        cycle = build_cycle(0.5, np.array([0.1, 0.0, 0.25]), 1.0, k_max=3)
        assert cycle.times == pytest.approx([0.0, -2.0, -6.0, -10.0])
        assert cycle.positions == [0.5, 0.0, 1.0, 0.0]
        assert cycle.v3_sequence == [0.25, -0.25, 0.25]
        assert cycle.period == pytest.approx(4.0)
        assert cycle.gaps[1:] == pytest.approx([cycle.period, cycle.period])
        assert cycle.lookback == pytest.approx(10.0)
        assert all(v[0] == 0.1 for v in cycle.velocities)

    def test_cycle_needs_a_bounce(self):
        """Test that k_max must be positive."""
        with pytest.raises(ValidationError):
            build_cycle(0.5, np.array([0.0, 0.0, 1.0]), 1.0, k_max=0)

    def test_closed_form_matches_bounce_sum(self, small_grid):
        """Test the geometric closed form of the alternating wall sum."""
        sweep = CharacteristicSweep(small_grid, collision_frequency(small_grid), uniform_slab(1.0, 4), cycle_tol=1e-16)
        p0 = np.array([1.0, -0.5, 2.0])
        p1 = np.array([0.25, 1.0, -1.0])
        rho = np.array([0.9, 0.5, 0.1])
        left, right, bounces = sweep._bounce_sum(p0, p1, rho)
        assert np.allclose(left, cycle_sum_closed_form(p0, p1, rho), rtol=1e-13)
        assert np.allclose(right, cycle_sum_closed_form(p1, p0, rho), rtol=1e-13)
        assert bounces > 300


class TestSlabGrid:
    """Tests for slab node layouts."""

    def test_default_slab(self):
        """Test spacing, refinement and wall handling of the default layout."""
        slab = default_slab(4.0, spacing_fraction=0.05, refine_levels=4)
        assert slab.size == slab.x_nodes.size + 2
        assert slab.all_nodes[0] == 0.0 and slab.all_nodes[-1] == 4.0
        assert np.all(np.diff(slab.all_nodes) > 0.0)
        assert slab.spacing.max() <= 0.2 + 1e-12
        assert slab.x_nodes[0] < 0.2 * 0.7 ** 3

    def test_max_spacing_caps_uniform_part(self):
        """Test that the absolute cap wins over the fraction."""
        slab = default_slab(8.0, spacing_fraction=0.1, max_spacing=0.25, refine_levels=0)
        assert slab.spacing.max() <= 0.25 + 1e-12

    def test_short_slab_rejected(self):
        """Test that d < 1 is rejected."""
        with pytest.raises(ValidationError):
            SlabGrid(d=0.5, x_nodes=np.array([0.25]))

    def test_nodes_must_be_interior(self):
        """Test that wall points are not stored as interior nodes."""
        with pytest.raises(ValidationError):
            SlabGrid(d=1.0, x_nodes=np.array([0.0, 0.5]))


class TestCharacteristicSweep:
    """Tests for the mild-form solve."""

    def setup_method(self):
        """Set up a slab shared by the tests."""
        self.slab = uniform_slab(1.0, 8)

    @pytest.mark.parametrize("eps,damp", [(0.0, 1.0), (0.5, 1.0), (0.1, 0.5)])
    def test_constant_solution_exact(self, small_grid, eps, damp):
        """Test that an even constant-in-x solution is reproduced to 1e-12."""
        nu = collision_frequency(small_grid)
        c = np.exp(-0.25 * small_grid.speed2)
        rhs = np.tile((eps + nu) * c, (self.slab.size, 1))
        src = (1.0 - damp) * c
        h = CharacteristicSweep(small_grid, nu, self.slab).sweep(eps, damp, rhs, src)
        assert np.allclose(h, c[None, :], rtol=0, atol=1e-12)

    def test_manufactured_second_order(self, small_grid):
        """Test observed order >= 1.8 under two x refinements."""
        nu = collision_frequency(small_grid)
        eps, damp = 0.1, 1.0
        errors = []
        for cells in (8, 16, 32):
            slab = uniform_slab(1.0, cells)
            x = slab.all_nodes
            h, dh = manufactured(small_grid, x)
            rhs = (eps + nu)[None, :] * h + small_grid.v3[None, :] * dh
            computed = sweep_mild(small_grid, nu, eps, damp, rhs, wall_data(small_grid, h, damp), slab)
            errors.append(np.max(np.abs(computed - h)))
        orders = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
        assert np.all(orders >= 1.8)

    def test_specular_trace(self, small_grid, rng):
        """Test h(0, v) = h(0, Rv) for v3 > 0 without wall data."""
        nu = collision_frequency(small_grid)
        rhs = rng.standard_normal((self.slab.size, small_grid.size))
        h = CharacteristicSweep(small_grid, nu, self.slab).sweep(0.0, 1.0, rhs)
        up = small_grid.v3 > 0.0
        assert np.allclose(h[0, up], h[0, small_grid.reflect[up]], rtol=1e-12, atol=1e-14)
        down = ~up
        assert np.allclose(h[-1, down], h[-1, small_grid.reflect[down]], rtol=1e-12, atol=1e-14)

    def test_sweep_is_linear(self, small_grid, rng):
        """Test S(a r1 + r2) = a S r1 + S r2."""
        nu = collision_frequency(small_grid)
        sweep = CharacteristicSweep(small_grid, nu, self.slab)
        r1, r2 = rng.standard_normal((2, self.slab.size, small_grid.size))
        combined = sweep.sweep(0.2, 0.9, 3.0 * r1 + r2)
        separate = 3.0 * sweep.sweep(0.2, 0.9, r1) + sweep.sweep(0.2, 0.9, r2)
        assert np.allclose(combined, separate, atol=1e-12 * np.abs(separate).max())

    def test_sweep_decreases_with_penalty(self, small_grid, rng):
        """Test S(eps2) r <= S(eps1) r for eps2 > eps1 and r >= 0."""
        nu = collision_frequency(small_grid)
        sweep = CharacteristicSweep(small_grid, nu, self.slab)
        rhs = np.abs(rng.standard_normal((self.slab.size, small_grid.size)))
        solutions = [sweep.sweep(eps, 1.0, rhs) for eps in (0.0, 0.1, 0.5, 2.0)]
        assert np.all(solutions[-1] >= 0.0)
        for larger, smaller in zip(solutions, solutions[1:]):
            assert np.all(smaller <= larger * (1.0 + 1e-12))

    @pytest.mark.parametrize("eps", [0.0, 0.1])
    def test_damped_sweep_dominated_by_specular(self, small_grid, rng, eps):
        """Test |S(eps, eta) r| <= S(eps, eta') |r| for eta <= eta'."""
        nu = collision_frequency(small_grid)
        sweep = CharacteristicSweep(small_grid, nu, self.slab)
        rhs = rng.standard_normal((self.slab.size, small_grid.size))
        bound = sweep.sweep(eps, 1.0, np.abs(rhs))
        previous = bound
        for damp in (0.9, 0.5, 0.25):
            damped = sweep.sweep(eps, damp, rhs)
            assert np.all(np.abs(damped) <= bound * (1.0 + 1e-12))
            dominated = sweep.sweep(eps, damp, np.abs(rhs))
            assert np.all(dominated <= previous * (1.0 + 1e-12))
            previous = dominated

    def test_bounces_reported(self, small_grid):
        """Test that the number of wall bounces is recorded."""
        nu = collision_frequency(small_grid)
        sweep = CharacteristicSweep(small_grid, nu, self.slab)
        sweep.sweep(0.0, 1.0, np.ones((self.slab.size, small_grid.size)))
        specular = sweep.last_bounces
        sweep.sweep(0.0, 0.5, np.ones((self.slab.size, small_grid.size)))
        assert specular >= sweep.last_bounces >= 1

    def test_invalid_arguments(self, small_grid):
        """Test rejection of bad penalties, damping factors and shapes."""
        nu = collision_frequency(small_grid)
        sweep = CharacteristicSweep(small_grid, nu, self.slab)
        rhs = np.zeros((self.slab.size, small_grid.size))
        with pytest.raises(ValidationError):
            sweep.sweep(-0.1, 1.0, rhs)
        with pytest.raises(ValidationError):
            sweep.sweep(0.0, 0.0, rhs)
        with pytest.raises(ValidationError):
            sweep.sweep(0.0, 1.0, rhs[:-1])
        rhs[2, 3] = np.nan
        with pytest.raises(TransportError):
            sweep.sweep(0.0, 1.0, rhs)
