"""
On-disk cache of assembled operators
"""

import hashlib
import json
from pathlib import Path
from typing import Optional

import numpy as np

from ..config import WeightSpec
from ..utils.exceptions import ArtifactError
from ..utils.logger import get_logger
from .operator import KERNEL_VERSION, OperatorSet
from .velocity_grid import VelocityGrid


def cache_key(grid: VelocityGrid, weight_spec: WeightSpec) -> str:
    """Key built solely from the grid digest, kernel version and weight spec."""
    payload = json.dumps(
        {
            "grid": grid.digest,
            "kernel": KERNEL_VERSION,
            "weight": weight_spec.model_dump(),
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:32]


class OperatorCache:
    """Store and retrieve OperatorSets as ``.npz`` files."""

    def __init__(self, directory: Path):
        """
        Initialize operator cache.

        Args:
            directory: Cache directory, created on first store
        """
        self.directory = Path(directory)
        self.logger = get_logger(__name__)

    def path_for(self, grid: VelocityGrid, weight_spec: WeightSpec) -> Path:
        return self.directory / f"operator-{cache_key(grid, weight_spec)}.npz"

    def get(self, grid: VelocityGrid, weight_spec: WeightSpec, threads: int = 1) -> Optional[OperatorSet]:
        """Load a cached operator, or None on a miss."""

        path = self.path_for(grid, weight_spec)
        if not path.exists():
            self.logger.info(f"Operator cache miss: {path.name}")
            return None

        try:
            with np.load(path, allow_pickle=False) as data:
                header = json.loads(str(data["header"]))
                nu = data["nu"]
                L_sym = data["L_sym"]
                P_basis = data["P_basis"]
                null_eigenvalues = data["null_eigenvalues"]
        except (OSError, KeyError, ValueError) as e:
            raise ArtifactError(f"Corrupt operator cache {path}: {e}") from e

        if header.get("grid") != grid.digest or header.get("kernel") != KERNEL_VERSION:
            raise ArtifactError(f"Operator cache {path} does not match the requested grid")

        self.logger.info(f"Operator cache hit: {path.name}")
        values = header["values"]
        return OperatorSet(
            grid=grid,
            weight_spec=weight_spec,
            nu=nu,
            L_sym=L_sym,
            P_basis=P_basis,
            kappa1=values.pop("kappa1"),
            kappa2=values.pop("kappa2"),
            c0=values.pop("c0"),
            nu0=values.pop("nu0"),
            nu1=values.pop("nu1"),
            constants=values,
            null_eigenvalues=null_eigenvalues,
            threads=threads,
            angular=tuple(header["angular"]),
        )

    def set(self, operator: OperatorSet) -> Path:
        """Write an operator; returns the cache file path."""

        self.directory.mkdir(parents=True, exist_ok=True)
        path = self.path_for(operator.grid, operator.weight_spec)
        header = {
            "grid": operator.grid.digest,
            "kernel": KERNEL_VERSION,
            "weight": operator.weight_spec.model_dump(),
            "angular": list(operator.angular),
            "values": operator.header(),
        }
        with open(path, "wb") as f:
            np.savez(
                f,
                header=np.array(json.dumps(header, sort_keys=True)),
                nu=operator.nu,
                L_sym=operator.L_sym,
                P_basis=operator.P_basis,
                null_eigenvalues=operator.null_eigenvalues,
            )
        self.logger.info(f"Cached operator at {path}")
        return path

    def clear(self) -> int:
        """Remove all cached operators; returns how many were deleted."""
        removed = 0
        for path in self.directory.glob("operator-*.npz"):
            path.unlink()
            removed += 1
        return removed
