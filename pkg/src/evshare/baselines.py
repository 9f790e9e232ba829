"""Reference controllers: greedy (with and without sharing), MPC and offline.

All of them are centralised and enforce the SOC bounds explicitly, which
the drift-plus-penalty controller only guarantees implicitly.  Multi-slot
problems are assembled as :class:`GenericQp` instances with battery
dynamics rows and solved by the interior-point backend (they are nearly
LPs with degenerate optima); single-station greedy slots reuse the exact
dual solver.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import InfeasibleProblemError, InvalidParameterError
from .model import JointDecision, QueueState, StationParams, SystemState, joint_slot_costs, link_pairs
from .queues import LyapunovParams
from .subqp import GenericQp, build_subproblem, generic_qp_solve, interior_qp_solve, solve_dual_bisection

# Tiny quadratic on shares in centralised baselines.  Their sharing payments
# cancel in the joint objective, so without it share volumes are arbitrary.
SHARE_REG = 1e-6


@dataclass(frozen=True)
class BaselineConfig:
    which: str = "B1"
    price_threshold: float = 0.1
    mpc_horizon: int = 6
    threshold_rule: bool = True

    def __post_init__(self):
        if self.which not in ("B1", "B2", "B3", "B4"):
            raise InvalidParameterError(f"unknown baseline {self.which!r}")
        if self.mpc_horizon < 1:
            raise InvalidParameterError("mpc_horizon must be >= 1")
        if self.price_threshold <= 0:
            raise InvalidParameterError("price_threshold must be > 0")


class _Layout:
    """Variable indexing for ``H`` slots x ``n`` stations (+ SOC states)."""

    FIELDS = ("grid_buy", "grid_sell", "batt_dis", "batt_chg", "demand_served")

    def __init__(self, params: Sequence[StationParams], horizon: int, sharing: bool, soc_states: bool):
        self.n = len(params)
        self.H = horizon
        self.pairs = link_pairs(params) if sharing else []
        idx = 0
        self.var = {}
        for t in range(horizon):
            for i in range(self.n):
                for f in self.FIELDS:
                    self.var[(t, i, f)] = idx
                    idx += 1
            for i, j in self.pairs:
                # one variable per link: e_ij, with e_ji = -e_ij
                self.var[(t, "pair", i, j)] = idx
                idx += 1
        if soc_states:
            for t in range(1, horizon + 1):
                for i in range(self.n):
                    self.var[(t, "soc", i)] = idx
                    idx += 1
        self.size = idx

    def __getitem__(self, key):
        return self.var[key]


def _slot_coefficients(s: SystemState, params, i, v=1.0, b=0.0, w_h=0.0):
    """Linear/quadratic coefficients of one station-slot (no sharing terms)."""
    p = params[i]
    dmax = s.demand_max[i]
    span = dmax - s.demand_min[i]
    h_coef = w_h / span if span > 0 else 0.0
    lin = {
        "grid_buy": v * s.price_buy,
        "grid_sell": -v * s.price_sell,
        "batt_dis": -b / p.eta_d + v * p.c_batt,
        "batt_chg": b * p.eta_c + v * p.c_batt,
        "demand_served": -h_coef - 2.0 * v * p.alpha * dmax,
    }
    quad = {"demand_served": v * p.alpha}
    const = v * p.alpha * dmax**2 + (h_coef * dmax if span > 0 else 0.0)
    return lin, quad, const


def _assemble(
    states: Sequence[SystemState],
    params: Sequence[StationParams],
    sharing: bool,
    soc0: np.ndarray | None,
    grid_cap: float,
    coeffs=None,
    fixed: dict | None = None,
    shed_cap: bool = False,
    share_reg: float = SHARE_REG,
):
    """Build a horizon QP; returns ``(qp, layout, const)``."""
    H = len(states)
    n = len(params)
    lay = _Layout(params, H, sharing, soc_states=soc0 is not None)
    N = lay.size
    q = np.zeros(N)
    pdiag = np.zeros(N)
    lo = np.full(N, -np.inf)
    hi = np.full(N, np.inf)
    const = 0.0
    eq_rows, eq_cols, eq_vals, b_eq = [], [], [], []
    row = 0

    def add_eq(entries, rhs):
        nonlocal row
        for c, v in entries:
            eq_rows.append(row)
            eq_cols.append(c)
            eq_vals.append(v)
        b_eq.append(rhs)
        row += 1

    for t, s in enumerate(states):
        for i, p in enumerate(params):
            lin, quad, c0 = coeffs(t, s, i) if coeffs else _slot_coefficients(s, params, i)
            const += c0
            for f in _Layout.FIELDS:
                k = lay[(t, i, f)]
                q[k] = lin[f]
                pdiag[k] = 2.0 * quad.get(f, 0.0)
            bounds = {
                "grid_buy": (0.0, grid_cap),
                "grid_sell": (0.0, grid_cap),
                "batt_dis": (0.0, p.p_dis_max),
                "batt_chg": (0.0, p.p_chg_max),
                "demand_served": (s.demand_min[i], s.demand_max[i]),
            }
            for f, (a, b) in bounds.items():
                k = lay[(t, i, f)]
                lo[k], hi[k] = a, b
            if fixed:
                for f, val in fixed.get((t, i), {}).items():
                    k = lay[(t, i, f)]
                    lo[k] = hi[k] = val
            # balance: demand - buy + sell - shares - dis + chg = pv
            entries = [
                (lay[(t, i, "demand_served")], 1.0),
                (lay[(t, i, "grid_buy")], -1.0),
                (lay[(t, i, "grid_sell")], 1.0),
                (lay[(t, i, "batt_dis")], -1.0),
                (lay[(t, i, "batt_chg")], 1.0),
            ]
            for a, b in lay.pairs:
                if i == a:
                    entries.append((lay[(t, "pair", a, b)], -1.0))
                elif i == b:
                    entries.append((lay[(t, "pair", a, b)], 1.0))
            add_eq(entries, float(s.pv[i]))
        for a, b in lay.pairs:
            k = lay[(t, "pair", a, b)]
            lo[k], hi[k] = params[a].share_min[b], params[a].share_max[b]
            pdiag[k] = 2.0 * share_reg
            # e_ab*c + e_ba*c = 0: the sharing price has no net effect
        if soc0 is not None:
            for i, p in enumerate(params):
                k_next = lay[(t + 1, "soc", i)]
                lo[k_next], hi[k_next] = p.e_batt_min, p.e_batt_max
                entries = [
                    (k_next, 1.0),
                    (lay[(t, i, "batt_dis")], 1.0 / p.eta_d),
                    (lay[(t, i, "batt_chg")], -p.eta_c),
                ]
                if t == 0:
                    add_eq(entries, float(soc0[i]))
                else:
                    add_eq(entries + [(lay[(t, "soc", i)], -1.0)], 0.0)

    A_eq = sp.csr_matrix((eq_vals, (eq_rows, eq_cols)), shape=(row, N))
    A_ineq = b_ineq = None
    if shed_cap:
        rows, cols, vals, rhs = [], [], [], []
        for i, p in enumerate(params):
            # sum_t (dmax - p)/span <= beta*H  <=>  -sum_t p/span <= beta*H - sum_t dmax/span
            r = len(rhs)
            bound = p.beta_shed * H
            for t, s in enumerate(states):
                span = s.demand_max[i] - s.demand_min[i]
                if span <= 0:
                    continue
                rows.append(r)
                cols.append(lay[(t, i, "demand_served")])
                vals.append(-1.0 / span)
                bound -= s.demand_max[i] / span
            rhs.append(bound)
        A_ineq = sp.csr_matrix((vals, (rows, cols)), shape=(len(rhs), N))
        b_ineq = np.array(rhs)
    qp = GenericQp(P=sp.diags(pdiag), q=q, lo=lo, hi=hi, A_eq=A_eq, b_eq=np.array(b_eq), A_ineq=A_ineq, b_ineq=b_ineq)
    return qp, lay, const


def _extract(x: np.ndarray, lay: _Layout, t: int) -> JointDecision:
    n = lay.n
    arr = {f: np.array([x[lay[(t, i, f)]] for i in range(n)]) for f in _Layout.FIELDS}
    share = np.zeros((n, n))
    for a, b in lay.pairs:
        e = float(x[lay[(t, "pair", a, b)]])
        share[a, b] = e
        share[b, a] = -e
    return JointDecision(share=share, **arr)


def _clean(jd: JointDecision, s: SystemState, params) -> JointDecision:
    """Clip solver round-off into the boxes and put the balance residual on the grid."""
    jd = jd.copy()
    for i, p in enumerate(params):
        jd.batt_dis[i] = min(max(jd.batt_dis[i], 0.0), p.p_dis_max)
        jd.batt_chg[i] = min(max(jd.batt_chg[i], 0.0), p.p_chg_max)
        jd.demand_served[i] = min(max(jd.demand_served[i], s.demand_min[i]), s.demand_max[i])
    jd.grid_buy = np.maximum(jd.grid_buy, 0.0)
    jd.grid_sell = np.maximum(jd.grid_sell, 0.0)
    res = jd.balance_residuals(s)
    for i in range(jd.n):
        if res[i] > 0:
            jd.grid_buy[i] += res[i]
        else:
            jd.grid_sell[i] -= res[i]
    return jd


def _clean_soc(jd: JointDecision, soc: np.ndarray, params) -> JointDecision:
    """Trim battery moves so round-off never steps outside the SOC bounds."""
    for i, p in enumerate(params):
        nxt = soc[i] - jd.batt_dis[i] / p.eta_d + jd.batt_chg[i] * p.eta_c
        if nxt > p.e_batt_max:
            jd.batt_chg[i] = max(0.0, jd.batt_chg[i] - (nxt - p.e_batt_max) / p.eta_c)
        elif nxt < p.e_batt_min:
            jd.batt_dis[i] = max(0.0, jd.batt_dis[i] - (p.e_batt_min - nxt) * p.eta_d)
    return jd


def default_grid_cap(states: Sequence[SystemState], params: Sequence[StationParams]) -> float:
    scale = max(
        max(float(np.max(s.demand_max)) for s in states),
        max(float(np.max(s.pv)) for s in states),
        max(p.p_dis_max for p in params),
        1.0,
    )
    return 10.0 * scale


def centralized_p3(
    s: SystemState,
    q: QueueState,
    lp: LyapunovParams,
    params: Sequence[StationParams],
    grid_cap: float | None = None,
):
    """Solve the joint per-slot drift-plus-penalty problem in one QP.

    Returns ``(JointDecision, objective)``; used as the reference for the
    distributed solver.
    """
    cap = grid_cap if grid_cap is not None else default_grid_cap([s], params)

    def coeffs(t, st, i):
        return _slot_coefficients(st, params, i, v=lp.v, b=q.b_queue[i], w_h=lp.w * q.h_queue[i])

    qp, lay, const = _assemble([s], params, True, None, cap, coeffs=coeffs, share_reg=0.0)
    res = generic_qp_solve(qp)
    jd = _clean(_extract(res.x, lay, 0), s, params)
    return jd, res.objective + const


def _forced_charge(s: SystemState, soc: np.ndarray, params, cfg: BaselineConfig) -> dict:
    fixed = {}
    if cfg.threshold_rule and s.price_buy < cfg.price_threshold:
        for i, p in enumerate(params):
            headroom = max(0.0, (p.e_batt_max - soc[i]) / p.eta_c)
            fixed[(0, i)] = {"batt_chg": min(p.p_chg_max, headroom), "batt_dis": 0.0}
    return fixed


def greedy_slot(
    s: SystemState,
    soc,
    params: Sequence[StationParams],
    cfg: BaselineConfig = BaselineConfig(),
    sharing: bool = False,
    grid_cap: float | None = None,
) -> JointDecision:
    """Single-slot cost minimisation with SOC bounds (B1 without sharing, B2 with).

    Below ``cfg.price_threshold`` batteries are forced to charge at
    ``min(p_chg_max, headroom)``.
    """
    soc = np.asarray(soc, dtype=float)
    for i, p in enumerate(params):
        if not p.e_batt_min - 1e-9 <= soc[i] <= p.e_batt_max + 1e-9:
            raise InfeasibleProblemError(f"station {i}: soc {soc[i]} outside bounds", "soc")
    cap = grid_cap if grid_cap is not None else default_grid_cap([s], params)
    fixed = _forced_charge(s, soc, params, cfg)
    if sharing and link_pairs(params):
        qp, lay, _ = _assemble([s], params, True, soc, cap, fixed=fixed)
        res = interior_qp_solve(qp)
        jd = _extract(res.x, lay, 0)
    else:
        jd = _greedy_separate(s, soc, params, fixed, cap)
    return _clean(_clean_soc(_clean(jd, s, params), soc, params), s, params)


def _greedy_separate(s, soc, params, fixed, cap) -> JointDecision:
    """No-sharing greedy: each station is an independent one-row problem."""
    n = len(params)
    lp = LyapunovParams(v=1.0, w=0.0, theta=np.zeros(n), drift_const=0.0)
    zero_q = QueueState(np.zeros(n), np.zeros(n), np.zeros(n))
    decisions = []
    for i, p in enumerate(params):
        spec = build_subproblem(i, s, zero_q, lp, p, rho=0.0, grid_cap=cap, neighbors=[])
        # one-slot SOC bounds become battery boxes (only one side is ever active at an optimum)
        k_dis = spec.names.index("batt_dis")
        k_chg = spec.names.index("batt_chg")
        spec.hi[k_dis] = min(p.p_dis_max, max(0.0, (soc[i] - p.e_batt_min) * p.eta_d))
        spec.hi[k_chg] = min(p.p_chg_max, max(0.0, (p.e_batt_max - soc[i]) / p.eta_c))
        for f, val in fixed.get((0, i), {}).items():
            k = spec.names.index(f)
            spec.lo[k] = spec.hi[k] = val
        decisions.append(solve_dual_bisection(spec).decision)
    return JointDecision.from_stations(decisions)


def mpc_slot(
    window: Sequence[SystemState],
    soc,
    params: Sequence[StationParams],
    cfg: BaselineConfig = BaselineConfig(),
    grid_cap: float | None = None,
) -> JointDecision:
    """Perfect-foresight receding-horizon step; returns the first-slot decision."""
    if not window:
        raise InvalidParameterError("empty MPC window")
    soc = np.asarray(soc, dtype=float)
    cap = grid_cap if grid_cap is not None else default_grid_cap(window, params)
    qp, lay, _ = _assemble(list(window), params, True, soc, cap)
    res = interior_qp_solve(qp)
    jd = _extract(res.x, lay, 0)
    return _clean(_clean_soc(_clean(jd, window[0], params), soc, params), window[0], params)


@dataclass
class OfflineResult:
    decisions: list
    cost: float
    soc: np.ndarray


def offline_solve(
    states: Sequence[SystemState],
    params: Sequence[StationParams],
    soc0,
    grid_cap: float | None = None,
    shed_cap: bool = True,
) -> OfflineResult:
    """Full-information minimum of total cost over the horizon.

    Enforces SOC bounds through explicit dynamics and the finite-horizon
    average shedding cap ``mean_t r_i(t) <= beta_i``.
    """
    if not states:
        return OfflineResult([], 0.0, np.zeros((1, len(params))))
    soc0 = np.asarray(soc0, dtype=float)
    for i, p in enumerate(params):
        if not p.e_batt_min <= soc0[i] <= p.e_batt_max:
            raise InfeasibleProblemError(f"station {i}: initial soc outside bounds", "soc")
    cap = grid_cap if grid_cap is not None else default_grid_cap(states, params)
    for s in states:
        # the battery may be empty, so the grid alone must be able to cover minimum demand
        if np.any(s.demand_min - s.pv > cap + 1e-9):
            raise InfeasibleProblemError(f"slot {s.t}: grid cap {cap} cannot cover demand", "grid")
    qp, lay, const = _assemble(list(states), params, True, soc0, cap, shed_cap=shed_cap)
    res = interior_qp_solve(qp)
    decisions = []
    soc = [soc0.copy()]
    cur = soc0.copy()
    total = 0.0
    for t, s in enumerate(states):
        jd = _clean(_clean_soc(_clean(_extract(res.x, lay, t), s, params), cur, params), s, params)
        decisions.append(jd)
        total += sum(c.total for c in joint_slot_costs(jd, s, params))
        cur = cur + np.array(
            [-jd.batt_dis[i] / p.eta_d + jd.batt_chg[i] * p.eta_c for i, p in enumerate(params)]
        )
        soc.append(cur.copy())
    return OfflineResult(decisions, total, np.array(soc))
