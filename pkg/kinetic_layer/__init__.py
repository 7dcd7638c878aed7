"""
Kinetic Layer

Solver for the steady Boltzmann boundary layer of a hard-sphere gas on a
half-space with specular reflection.
"""

__version__ = "0.1.0"

from .core.linear_solver import LinearProblem, LinearSolution, TruncatedSolver
from .core.nonlinear_solver import NonlinearProblem, PicardSolver
from .core.operator import OperatorSet, assemble_operator
from .core.velocity_grid import VelocityGrid, build_grid, quad

__all__ = [
    "LinearProblem",
    "LinearSolution",
    "TruncatedSolver",
    "NonlinearProblem",
    "PicardSolver",
    "OperatorSet",
    "assemble_operator",
    "VelocityGrid",
    "build_grid",
    "quad",
]
