"""
Core numerical modules of the kinetic layer solver
"""

from .cache import OperatorCache
from .linear_solver import KineticField, LinearProblem, LinearSolution, TruncatedSolver
from .nonlinear_solver import NonlinearProblem, PicardSolver
from .operator import OperatorAssembler, OperatorSet, assemble_operator
from .transport import CharacteristicSweep, SlabGrid, default_slab
from .velocity_grid import VelocityGrid, build_grid

__all__ = [
    "OperatorCache",
    "KineticField",
    "LinearProblem",
    "LinearSolution",
    "TruncatedSolver",
    "NonlinearProblem",
    "PicardSolver",
    "OperatorAssembler",
    "OperatorSet",
    "assemble_operator",
    "CharacteristicSweep",
    "SlabGrid",
    "default_slab",
    "VelocityGrid",
    "build_grid",
]
