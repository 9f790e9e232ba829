"""Local subproblem solvers: exact dual bisection, a generic QP oracle and an interior-point backend."""

from .bisection import (
    SubproblemSolution,
    SubproblemSpec,
    build_subproblem,
    solve_dual_bisection,
)
from .generic import GenericQp, QpResult, generic_qp_solve
from .interior import interior_qp_solve

__all__ = [
    "GenericQp",
    "QpResult",
    "SubproblemSolution",
    "SubproblemSpec",
    "build_subproblem",
    "generic_qp_solve",
    "interior_qp_solve",
    "solve_dual_bisection",
]
