"""Per-station local subproblem and its exact dual solver.

Each station, at each coordination round, minimises a separable objective
``const + sum(lin*x + quad*x**2)`` over per-variable boxes subject to one
power-balance row ``sum(coef*x) == rhs``.  Dualising the balance row with a
scalar ``lam`` makes every variable a closed-form clip of its stationary
point; the balance residual is piecewise linear and nonincreasing in
``lam``, so the root is located by bisecting over its sorted breakpoints
and finishing with an exact interpolation inside the final segment.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..errors import InfeasibleProblemError, InvalidParameterError
from ..model import Decision, QueueState, StationParams, SystemState
from ..queues import LyapunovParams
from .generic import GenericQp

GRID_BUY = "grid_buy"
GRID_SELL = "grid_sell"
BATT_DIS = "batt_dis"
BATT_CHG = "batt_chg"
DEMAND = "demand_served"

# Variables absorbed last on flat dual segments, least-preferred-small first.
_FILL_ORDER = {DEMAND: 0, BATT_DIS: 1, BATT_CHG: 1, "share": 2, GRID_SELL: 3, GRID_BUY: 4}


@dataclass
class SubproblemSpec:
    """Separable convex program ``min const + lin.x + quad.x^2`` s.t. boxes and one balance row."""

    names: tuple
    linear: np.ndarray
    quadratic: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    balance: np.ndarray
    rhs: float
    const: float = 0.0
    station: int = 0
    n_stations: int = 1
    share_index: tuple = ()
    share_target: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        for name in ("linear", "quadratic", "lo", "hi", "balance"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        k = len(self.names)
        if any(len(getattr(self, a)) != k for a in ("linear", "quadratic", "lo", "hi", "balance")):
            raise InvalidParameterError("subproblem arrays must match the variable list")
        if np.any(self.quadratic < 0):
            raise InvalidParameterError("quadratic coefficients must be >= 0")
        if np.any(self.lo > self.hi):
            raise InvalidParameterError("empty box")
        if not np.any(self.balance != 0):
            raise InvalidParameterError("balance row has no nonzero coefficient")
        self.share_target = np.asarray(self.share_target, dtype=float)

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(self.const + self.linear @ x + self.quadratic @ (x * x))

    def balance_residual(self, x) -> float:
        return float(self.balance @ np.asarray(x, dtype=float) - self.rhs)

    def kkt_violation(self, x, lam: float, tol: float = 1e-9) -> float:
        """Largest violation of ``grad + lam*coef`` lying in the box normal cone."""
        x = np.asarray(x, dtype=float)
        g = self.linear + 2.0 * self.quadratic * x + lam * self.balance
        viol = 0.0
        for k in range(len(x)):
            at_lo = x[k] <= self.lo[k] + tol
            at_hi = x[k] >= self.hi[k] - tol
            if at_lo and at_hi:
                continue
            if at_lo:
                viol = max(viol, -g[k])
            elif at_hi:
                viol = max(viol, g[k])
            else:
                viol = max(viol, abs(g[k]))
        return viol

    def as_qp(self) -> GenericQp:
        """Same program for :func:`generic_qp_solve` (``const`` dropped)."""
        k = len(self.names)
        return GenericQp(
            P=sp.diags(2.0 * self.quadratic),
            q=self.linear,
            lo=self.lo,
            hi=self.hi,
            A_eq=sp.csr_matrix(self.balance.reshape(1, k)),
            b_eq=np.array([self.rhs]),
        )

    def to_decision(self, x) -> Decision:
        values = dict(zip(self.names, np.asarray(x, dtype=float)))
        share = np.zeros(self.n_stations)
        for pos, j in zip(self._share_positions(), self.share_index):
            share[j] = x[pos]
        return Decision(
            station=self.station,
            grid_buy=float(values.get(GRID_BUY, 0.0)),
            grid_sell=float(values.get(GRID_SELL, 0.0)),
            share=share,
            batt_dis=float(values.get(BATT_DIS, 0.0)),
            batt_chg=float(values.get(BATT_CHG, 0.0)),
            demand_served=float(values.get(DEMAND, 0.0)),
        )

    def from_decision(self, d: Decision) -> np.ndarray:
        x = np.zeros(len(self.names))
        share_pos = dict(zip(self._share_positions(), self.share_index))
        for k, name in enumerate(self.names):
            x[k] = d.share[share_pos[k]] if k in share_pos else getattr(d, name)
        return x

    def _share_positions(self) -> list[int]:
        return [k for k, name in enumerate(self.names) if name.startswith("share")]


@dataclass
class SubproblemSolution:
    x: np.ndarray
    multiplier: float
    objective: float
    decision: Decision


def build_subproblem(
    i: int,
    s: SystemState,
    q: QueueState,
    lp: LyapunovParams,
    p: StationParams,
    eps=None,
    duals=None,
    rho: float = 1.0,
    grid_cap: float = 1e4,
    neighbors=None,
) -> SubproblemSpec:
    """Local drift-plus-penalty problem of station ``i`` plus its ADMM penalty.

    ``eps`` and ``duals`` are length-``n`` rows of the auxiliary and dual
    variables seen by station ``i``; only entries of ``neighbors`` are used.
    With ``rho == 0`` the sharing variables carry only their price.
    """
    if rho < 0:
        raise InvalidParameterError("rho must be >= 0")
    n = s.n
    if neighbors is None:
        neighbors = p.neighbors() if p.share_min else []
    eps = np.zeros(n) if eps is None else np.asarray(eps, dtype=float)
    duals = np.zeros(n) if duals is None else np.asarray(duals, dtype=float)
    v, w = lp.v, lp.w
    b = q.b_queue[i]
    h = q.h_queue[i]
    dmax = s.demand_max[i]
    span = dmax - s.demand_min[i]
    h_coef = w * h / span if span > 0 else 0.0

    names = [GRID_BUY, GRID_SELL]
    lin = [v * s.price_buy, -v * s.price_sell]
    quad = [0.0, 0.0]
    lo = [0.0, 0.0]
    hi = [grid_cap, grid_cap]
    coef = [-1.0, 1.0]
    const = (h_coef * dmax if span > 0 else 0.0) + v * p.alpha * dmax**2
    target = []
    for j in neighbors:
        names.append(f"share_{j}")
        lin.append(v * s.price_share + duals[j] - rho * eps[j])
        quad.append(rho / 2.0)
        lo.append(p.share_min[j])
        hi.append(p.share_max[j])
        coef.append(-1.0)
        if rho > 0:
            const += rho / 2.0 * (duals[j] / rho - eps[j]) ** 2
            target.append(eps[j] - duals[j] / rho)
        else:
            target.append(0.0)
    names += [BATT_DIS, BATT_CHG, DEMAND]
    lin += [-b / p.eta_d + v * p.c_batt, b * p.eta_c + v * p.c_batt, -h_coef - 2.0 * v * p.alpha * dmax]
    quad += [0.0, 0.0, v * p.alpha]
    lo += [0.0, 0.0, s.demand_min[i]]
    hi += [p.p_dis_max, p.p_chg_max, dmax]
    coef += [-1.0, 1.0, 1.0]
    return SubproblemSpec(
        names=tuple(names),
        linear=np.array(lin),
        quadratic=np.array(quad),
        lo=np.array(lo),
        hi=np.array(hi),
        balance=np.array(coef),
        rhs=float(s.pv[i]),
        const=float(const),
        station=i,
        n_stations=n,
        share_index=tuple(neighbors),
        share_target=np.array(target),
    )


class _Response:
    """Closed-form minimiser of each variable as a function of the multiplier."""

    def __init__(self, spec: SubproblemSpec):
        self.a = spec.linear
        self.q = spec.quadratic
        self.c = spec.balance
        self.lo = spec.lo
        self.hi = spec.hi
        self.rhs = spec.rhs
        k = len(self.a)
        self.active = [j for j in range(k) if self.c[j] != 0]
        self.linear_vars = [j for j in self.active if self.q[j] == 0]
        self.quad_vars = [j for j in self.active if self.q[j] > 0]
        self.bp = {j: -self.a[j] / self.c[j] for j in self.linear_vars}

    def breakpoints(self) -> list[float]:
        pts = set(self.bp.values())
        for j in self.quad_vars:
            pts.add((-2.0 * self.q[j] * self.lo[j] - self.a[j]) / self.c[j])
            pts.add((-2.0 * self.q[j] * self.hi[j] - self.a[j]) / self.c[j])
        return sorted(pts)

    def x_at(self, lam: float, side: int) -> np.ndarray:
        """Minimiser at ``lam``; ``side`` picks the left (-1) or right (+1) limit on flat pieces."""
        x = np.zeros(len(self.a))
        for j in self.quad_vars:
            x[j] = min(max(-(self.a[j] + lam * self.c[j]) / (2.0 * self.q[j]), self.lo[j]), self.hi[j])
        for j in self.linear_vars:
            bp = self.bp[j]
            # coefficient a + lam*c is positive iff lam is on the c-sign side of bp
            if lam == bp:
                positive = side * self.c[j] > 0
            else:
                positive = (lam > bp) == (self.c[j] > 0)
            x[j] = self.lo[j] if positive else self.hi[j]
        return x

    def residual(self, x: np.ndarray) -> float:
        return float(sum(self.c[j] * x[j] for j in self.active) - self.rhs)


def _solve_inactive(spec: SubproblemSpec, x: np.ndarray) -> None:
    """Variables outside the balance row minimise independently."""
    for j in range(len(x)):
        if spec.balance[j] != 0:
            continue
        if spec.quadratic[j] > 0:
            x[j] = min(max(-spec.linear[j] / (2.0 * spec.quadratic[j]), spec.lo[j]), spec.hi[j])
        elif spec.linear[j] > 0:
            x[j] = spec.lo[j]
        elif spec.linear[j] < 0:
            x[j] = spec.hi[j]
        else:
            x[j] = min(max(0.0, spec.lo[j]), spec.hi[j])


def _fill_ties(spec: SubproblemSpec, resp: _Response, lam: float, tol: float) -> np.ndarray:
    """Resolve a flat dual segment at ``lam`` with the deterministic tie-break order."""
    x = resp.x_at(lam, +1)
    tied = [j for j in resp.linear_vars if resp.bp[j] == lam]
    share_target = dict(zip(spec._share_positions(), spec.share_target))
    for j in tied:
        if j in share_target:
            x[j] = min(max(share_target[j], spec.lo[j]), spec.hi[j])
        else:
            x[j] = spec.lo[j]
    gap = -resp.residual(x)

    def rank(j):
        name = spec.names[j]
        key = "share" if name.startswith("share") else name
        return (_FILL_ORDER.get(key, 0), j)

    for j in sorted(tied, key=rank):
        if abs(gap) <= 0:
            break
        step = gap / resp.c[j]
        step = min(max(step, spec.lo[j] - x[j]), spec.hi[j] - x[j])
        x[j] += step
        gap -= resp.c[j] * step
    if abs(gap) > tol:
        raise InfeasibleProblemError(f"station {spec.station}: could not close balance gap {gap:.3e}")
    return x


def solve_dual_bisection(spec: SubproblemSpec, tol: float = 1e-8, max_steps: int = 200) -> SubproblemSolution:
    """Global minimiser of a :class:`SubproblemSpec`.

    Raises :class:`InfeasibleProblemError` when no point of the boxes meets
    the balance row.
    """
    resp = _Response(spec)
    bps = resp.breakpoints()
    if not bps:
        raise InvalidParameterError("no variable responds to the balance multiplier")
    g_low = resp.residual(resp.x_at(bps[0], -1))
    g_high = resp.residual(resp.x_at(bps[-1], +1))
    if g_low < -tol or g_high > tol:
        raise InfeasibleProblemError(
            f"station {spec.station}: balance unreachable within boxes "
            f"(residual range [{g_high:.3e}, {g_low:.3e}])"
        )

    # smallest breakpoint whose right limit has residual <= 0
    lo_idx, hi_idx = 0, len(bps) - 1
    steps = 0
    while lo_idx < hi_idx:
        steps += 1
        if steps > max_steps:
            raise InfeasibleProblemError(f"station {spec.station}: breakpoint search did not terminate")
        mid = (lo_idx + hi_idx) // 2
        if resp.residual(resp.x_at(bps[mid], +1)) <= 0:
            hi_idx = mid
        else:
            lo_idx = mid + 1
    m = lo_idx
    gap_tol = max(tol, 1e-9 * (1 + abs(spec.rhs)))
    g_left = resp.residual(resp.x_at(bps[m], -1))
    # a left limit within round-off of zero is a root at the breakpoint itself
    if g_left >= -gap_tol or m == 0:
        lam = bps[m]
        x = _fill_ties(spec, resp, lam, gap_tol)
    else:
        a, b = bps[m - 1], bps[m]
        ga = resp.residual(resp.x_at(a, +1))
        lam = a + ga / (ga - g_left) * (b - a)
        lam = min(max(lam, a), b)
        # inside (a, b] the left limit is the segment's own response, also when lam rounds onto b
        x = resp.x_at(lam, -1)
        _polish_segment(resp, x, lam)
    gap = resp.residual(x)
    if abs(gap) > gap_tol:
        raise InfeasibleProblemError(f"station {spec.station}: balance residual {gap:.3e} after dual search")
    _solve_inactive(spec, x)
    return SubproblemSolution(x=x, multiplier=float(lam), objective=spec.objective(x), decision=spec.to_decision(x))


def _polish_segment(resp: _Response, x: np.ndarray, lam: float) -> None:
    """Remove rounding drift by spreading the residual over interior quadratic variables."""
    res = resp.residual(x)
    if res == 0:
        return
    free = [j for j in resp.quad_vars if resp.lo[j] < x[j] < resp.hi[j]]
    if not free:
        return
    weight = sum(1.0 / (2.0 * resp.q[j]) for j in free)
    for j in free:
        share = res * (1.0 / (2.0 * resp.q[j])) / weight
        x[j] = min(max(x[j] - share / resp.c[j], resp.lo[j]), resp.hi[j])
