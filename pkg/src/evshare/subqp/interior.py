"""Interior-point backend for horizon QPs (Clarabel).

Multi-slot baseline problems are nearly linear programs with many
degenerate optima.  Operator splitting reaches them only slowly, so the
baselines hand the same :class:`GenericQp` to an interior-point solver.
"""

from __future__ import annotations

import clarabel
import numpy as np
import scipy.sparse as sp

from ..errors import InfeasibleProblemError, NonConvergenceError
from .generic import _INF, GenericQp, QpResult


def interior_qp_solve(qp: GenericQp, tol: float = 1e-9) -> QpResult:
    """Solve ``qp`` with Clarabel; returns a :class:`QpResult` (``y`` holds row duals)."""
    n = qp.n
    fixed = np.where(qp.lo == qp.hi)[0]
    upper = np.where((qp.hi < _INF) & (qp.lo != qp.hi))[0]
    lower = np.where((qp.lo > -_INF) & (qp.lo != qp.hi))[0]
    eye = sp.identity(n, format="csr")
    A = sp.vstack([qp.A_eq, eye[fixed], qp.A_ineq, eye[upper], -eye[lower]], format="csc")
    b = np.concatenate([qp.b_eq, qp.lo[fixed], qp.b_ineq, qp.hi[upper], -qp.lo[lower]])
    n_zero = len(qp.b_eq) + len(fixed)
    cones = []
    if n_zero:
        cones.append(clarabel.ZeroConeT(n_zero))
    if len(b) - n_zero:
        cones.append(clarabel.NonnegativeConeT(len(b) - n_zero))

    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = settings.tol_gap_rel = tol
    settings.tol_feas = tol
    solver = clarabel.DefaultSolver(sp.triu(qp.P, format="csc"), qp.q, A, b, cones, settings)
    sol = solver.solve()
    status = str(sol.status)
    if "Infeasible" in status:
        raise InfeasibleProblemError(f"interior-point solver reports {status}")
    if status not in ("Solved", "AlmostSolved"):
        raise NonConvergenceError(f"interior-point solver stopped with {status}")
    x = np.clip(np.asarray(sol.x), qp.lo, qp.hi)
    return QpResult(x, np.asarray(sol.z), qp.objective(x), int(sol.iterations), qp.max_violation(x), 0.0, False)
