"""
Pytest configuration and shared fixtures
"""

import numpy as np
import pytest

from kinetic_layer.config import GridSpec, SolveConfig
from kinetic_layer.core.operator import assemble_operator
from kinetic_layer.core.velocity_grid import build_grid


@pytest.fixture(scope="session")
def small_grid():
    """Gauss-Hermite grid with 6 nodes per axis (216 nodes)."""
    return build_grid(GridSpec(n_per_axis=6))


@pytest.fixture(scope="session")
def small_operator(small_grid):
    """Operator on the small grid with a coarse angular rule for Gamma."""
    return assemble_operator(small_grid, angular=(4, 2))


@pytest.fixture(scope="session")
def reference_grid():
    """Grid used for the moment identities at reference resolution."""
    return build_grid(GridSpec(n_per_axis=16))


@pytest.fixture
def fast_solve_config():
    """Short schedules on short slabs, enough to exercise every stage."""
    return SolveConfig(
        sigma0=0.3,
        lambda_steps=[0.5, 1.0],
        n_schedule=[4, 8, 16],
        eps_schedule=[1e-1, 5e-2, 2.5e-2],
        d_schedule=[2.0, 4.0],
        x_spacing_fraction=0.1,
        refine_levels=3,
        inner_tol=1e-9,
        cauchy_tol=1e-4,
        angular_rule=(4, 2),
    )


@pytest.fixture
def rng():
    """Seeded generator so that random samples are reproducible."""
    return np.random.default_rng(1234)


@pytest.fixture
def config_file(tmp_path):
    """Write a YAML run configuration and return its path."""

    def _write(content: str):
        path = tmp_path / "klayer.yaml"
        path.write_text(content)
        return path

    return _write


# Pytest configuration
def pytest_configure(config):
    """Configure pytest with custom markers."""
    config.addinivalue_line(
        "markers", "slow: marks tests as slow (deselect with '-m \"not slow\"')"
    )
    config.addinivalue_line(
        "markers", "integration: marks tests as integration tests"
    )
    config.addinivalue_line(
        "markers", "unit: marks tests as unit tests"
    )


def pytest_collection_modifyitems(config, items):
    """Modify test collection to add markers based on test names."""
    for item in items:
        if "pipeline" in item.name or "resolution" in item.name or "picard" in item.name:
            item.add_marker(pytest.mark.slow)

        if "integration" in item.name or "end_to_end" in item.name or "pipeline" in item.name:
            item.add_marker(pytest.mark.integration)

        if "test_" in item.name and "integration" not in item.name:
            item.add_marker(pytest.mark.unit)
