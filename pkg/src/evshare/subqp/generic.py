"""Operator-splitting solver for small convex QPs with boxes and linear rows.

Solves ``min 1/2 x'Px + q'x`` subject to ``lo <= x <= hi``,
``A_eq x = b_eq`` and ``A_ineq x <= b_ineq``.  The iteration alternates a
regularised equality-constrained quadratic solve (one sparse factorisation
per penalty value) with projection onto the constraint box and an
over-relaxed dual update.  Near convergence the active set is guessed from
the duals and the reduced KKT system is solved directly; the polished point
is accepted only if it passes primal, dual and sign checks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ..errors import InvalidParameterError, NonConvergenceError

log = logging.getLogger(__name__)

_INF = 1e20


@dataclass
class GenericQp:
    P: object
    q: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    A_eq: object = None
    b_eq: np.ndarray = None
    A_ineq: object = None
    b_ineq: np.ndarray = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        n = len(self.q)
        self.P = sp.csc_matrix(self.P, shape=(n, n), dtype=float)
        self.lo = np.broadcast_to(np.asarray(self.lo, dtype=float), (n,)).copy()
        self.hi = np.broadcast_to(np.asarray(self.hi, dtype=float), (n,)).copy()
        if np.any(self.lo > self.hi):
            raise InvalidParameterError("empty box in GenericQp")
        self.A_eq = sp.csr_matrix((0, n)) if self.A_eq is None else sp.csr_matrix(self.A_eq, dtype=float)
        self.b_eq = np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, dtype=float)
        self.A_ineq = sp.csr_matrix((0, n)) if self.A_ineq is None else sp.csr_matrix(self.A_ineq, dtype=float)
        self.b_ineq = np.zeros(0) if self.b_ineq is None else np.asarray(self.b_ineq, dtype=float)
        if self.A_eq.shape != (len(self.b_eq), n) or self.A_ineq.shape != (len(self.b_ineq), n):
            raise InvalidParameterError("constraint row shapes do not match")

    @property
    def n(self) -> int:
        return len(self.q)

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ (self.P @ x) + self.q @ x)

    def max_violation(self, x) -> float:
        x = np.asarray(x, dtype=float)
        v = [0.0, float(np.max(self.lo - x, initial=0.0)), float(np.max(x - self.hi, initial=0.0))]
        if len(self.b_eq):
            v.append(float(np.max(np.abs(self.A_eq @ x - self.b_eq))))
        if len(self.b_ineq):
            v.append(float(np.max(self.A_ineq @ x - self.b_ineq, initial=0.0)))
        return max(v)


@dataclass
class QpResult:
    x: np.ndarray
    y: np.ndarray
    objective: float
    iterations: int
    primal_residual: float
    dual_residual: float
    polished: bool


def _stack(qp: GenericQp):
    n = qp.n
    finite_box = np.where((qp.lo > -_INF) | (qp.hi < _INF))[0]
    I = sp.identity(n, format="csr")[finite_box]
    A = sp.vstack([qp.A_eq, qp.A_ineq, I], format="csc")
    l = np.concatenate([qp.b_eq, np.full(len(qp.b_ineq), -np.inf), qp.lo[finite_box]])
    u = np.concatenate([qp.b_eq, qp.b_ineq, qp.hi[finite_box]])
    l = np.where(l < -_INF, -np.inf, l)
    u = np.where(u > _INF, np.inf, u)
    return A, l, u


def _ruiz(P, q, A, iters=15):
    """Equilibrate the KKT matrix; returns scaled data and the scalings."""
    n, m = P.shape[0], A.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    Ps, As, qs = P.copy(), A.copy(), q.copy()
    for _ in range(iters):
        col_p = np.abs(Ps).max(axis=0).toarray().ravel() if Ps.nnz else np.zeros(n)
        col_a = np.abs(As).max(axis=0).toarray().ravel() if As.nnz else np.zeros(n)
        dn = np.maximum(col_p, col_a)
        dn = np.where(dn < 1e-4, 1.0, dn)
        dn = 1.0 / np.sqrt(np.minimum(dn, 1e4))
        row_a = np.abs(As).max(axis=1).toarray().ravel() if As.nnz else np.zeros(m)
        em = np.where(row_a < 1e-4, 1.0, row_a)
        em = 1.0 / np.sqrt(np.minimum(em, 1e4))
        Dm = sp.diags(dn)
        Em = sp.diags(em)
        Ps = (Dm @ Ps @ Dm).tocsc()
        As = (Em @ As @ Dm).tocsc()
        qs = dn * qs
        D *= dn
        E *= em
    mean_p = float(np.mean(np.abs(Ps).max(axis=0).toarray())) if Ps.nnz else 0.0
    qn = float(np.max(np.abs(qs), initial=0.0))
    scale = max(mean_p, qn)
    c = 1.0 / min(max(scale, 1e-4), 1e4) if scale > 0 else 1.0
    return c * Ps, c * qs, As, D, E, c


class _Kkt:
    def __init__(self, P, A, sigma, rho_vec):
        n, m = P.shape[0], A.shape[0]
        K = sp.bmat(
            [[P + sigma * sp.identity(n), A.T], [A, -sp.diags(1.0 / rho_vec)]],
            format="csc",
        )
        self.n = n
        self.lu = spla.splu(K, permc_spec="COLAMD")

    def solve(self, rhs):
        return self.lu.solve(rhs)


def _rho_vector(l, u, rho):
    eq = np.abs(u - l) < 1e-12
    free = np.isinf(l) & np.isinf(u)
    r = np.full(len(l), rho)
    r[eq] = 1e3 * rho
    r[free] = 1e-6
    return r


def _residuals(P, q, A, x, y, z):
    Ax = A @ x
    Px = P @ x
    Aty = A.T @ y
    r_prim = float(np.max(np.abs(Ax - z), initial=0.0))
    r_dual = float(np.max(np.abs(Px + q + Aty), initial=0.0))
    prim_scale = max(float(np.max(np.abs(Ax), initial=0.0)), float(np.max(np.abs(z), initial=0.0)))
    dual_scale = max(
        float(np.max(np.abs(Px), initial=0.0)),
        float(np.max(np.abs(Aty), initial=0.0)),
        float(np.max(np.abs(q), initial=0.0)),
    )
    return r_prim, r_dual, prim_scale, dual_scale


def _polish(P, q, A, l, u, x, y, z, tol):
    """Solve the reduced KKT system on the guessed active set."""
    n = P.shape[0]
    # a row is active if its dual says so or it sits on the bound anyway
    near = 1e-7 * (1.0 + np.abs(z))
    lower = (z - l < -y) | (z - l < near) | (np.abs(u - l) < 1e-12)
    upper = ((u - z < y) | (u - z < near)) & ~lower
    act = np.where(lower | upper)[0]
    b = np.where(lower, l, u)[act]
    Aa = A[act]
    delta = 1e-7
    Kreg = sp.bmat(
        [[P + delta * sp.identity(n), Aa.T], [Aa, -delta * sp.identity(len(act))]], format="csc"
    )
    rhs = np.concatenate([-q, b])
    try:
        lu = spla.splu(Kreg, permc_spec="COLAMD")
    except RuntimeError:
        return None
    # proximal refinement around the current iterate: stays bounded along
    # directions the reduced system leaves free (LP-like blocks)
    sol = np.concatenate([x, y[act]])
    shift = np.concatenate([np.full(n, delta), np.full(len(act), -delta)])
    for _ in range(50):
        new = lu.solve(rhs + shift * sol)
        step = float(np.max(np.abs(new - sol), initial=0.0))
        sol = new
        if step < 1e-13 * (1.0 + float(np.max(np.abs(sol), initial=0.0))):
            break
    if not np.all(np.isfinite(sol)):
        return None
    xp = sol[:n]
    yp = np.zeros(len(l))
    yp[act] = sol[n:]
    zp = A @ xp
    # sign check: lower-active duals <= 0, upper-active >= 0 (equality rows free)
    eq = np.abs(u - l) < 1e-12
    sign_bad = max(
        float(np.max(yp[lower & ~eq], initial=0.0)),
        float(np.max(-yp[upper & ~eq], initial=0.0)),
    )
    prim = float(max(np.max(l - zp, initial=0.0), np.max(zp - u, initial=0.0)))
    dual = float(np.max(np.abs(P @ xp + q + A.T @ yp), initial=0.0))
    if max(prim, dual, sign_bad) > tol:
        return None
    return xp, yp, np.clip(zp, l, u), prim, dual


def generic_qp_solve(
    qp: GenericQp,
    eps: float = 1e-9,
    eps_rel: float = 0.0,
    max_iter: int = 50_000,
    rho: float = 0.1,
    sigma: float = 1e-6,
    alpha: float = 1.6,
    polish: bool = True,
    check_every: int = 25,
) -> QpResult:
    """Solve ``qp``; deterministic for identical inputs.

    Stops when unscaled primal and dual residuals are both
    ``<= eps + eps_rel * scale`` (after polishing when possible), where
    ``scale`` is the magnitude of the terms in each residual.  Raises
    :class:`NonConvergenceError` carrying the last residuals otherwise.
    """
    A0, l0, u0 = _stack(qp)
    P0 = qp.P
    q0 = qp.q
    n, m = qp.n, A0.shape[0]
    if m == 0:
        A0 = sp.csc_matrix((0, n))

    Ps, qs, As, D, E, c = _ruiz(P0, q0, A0)
    ls = np.where(np.isfinite(l0), E * np.where(np.isfinite(l0), l0, 0), -np.inf)
    us = np.where(np.isfinite(u0), E * np.where(np.isfinite(u0), u0, 0), np.inf)

    x = np.zeros(n)
    z = np.clip(np.zeros(m), ls, us)
    y = np.zeros(m)
    rho_vec = _rho_vector(ls, us, rho)
    kkt = _Kkt(Ps, As, sigma, rho_vec)
    r_prim = r_dual = np.inf

    def unscale(xs, ys, zs):
        return D * xs, E * ys / c, zs / E

    for it in range(1, max_iter + 1):
        rhs = np.concatenate([sigma * x - qs, z - y / rho_vec])
        sol = kkt.solve(rhs)
        xt = sol[:n]
        nu = sol[n:]
        zt = z + (nu - y) / rho_vec
        x = alpha * xt + (1 - alpha) * x
        zr = alpha * zt + (1 - alpha) * z
        z_new = np.clip(zr + y / rho_vec, ls, us)
        y = y + rho_vec * (zr - z_new)
        z = z_new

        if it % check_every and it != max_iter:
            continue
        xu, yu, zu = unscale(x, y, z)
        r_prim, r_dual, ps, ds = _residuals(P0, q0, A0, xu, yu, zu)
        if r_prim <= eps + eps_rel * ps and r_dual <= eps + eps_rel * ds:
            return QpResult(xu, yu, qp.objective(xu), it, r_prim, r_dual, False)
        if polish and r_prim <= 1e-3 * (1 + ps) and r_dual <= 1e-3 * (1 + ds):
            pol = _polish(P0, q0, A0, l0, u0, xu, yu, zu, eps)
            if pol is not None:
                xp, yp, _, pp, pd = pol
                return QpResult(xp, yp, qp.objective(xp), it, pp, pd, True)
        # penalty adaptation
        ratio = np.sqrt((r_prim / max(ps, 1e-12)) / max(r_dual / max(ds, 1e-12), 1e-30))
        new_rho = float(np.clip(rho * ratio, 1e-6, 1e6))
        if new_rho > 5 * rho or new_rho < rho / 5:
            rho = new_rho
            rho_vec = _rho_vector(ls, us, rho)
            kkt = _Kkt(Ps, As, sigma, rho_vec)
    raise NonConvergenceError(
        f"QP did not converge in {max_iter} iterations",
        {"primal": r_prim, "dual": r_dual},
    )
