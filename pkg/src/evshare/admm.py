"""Distributed per-slot coordinator: consensus ADMM with iteration truncation.

Stations only exchange their sharing vectors ``e_i``; auxiliary and dual
variables live on links.  After the loop stops (converged, truncated or
capped) every link is made exactly antisymmetric by keeping the smaller
of the two requested amounts, and each station that lost part of its
trade offsets the difference through its grid exchange.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidParameterError
from .model import Decision, JointDecision, QueueState, StationParams, SystemState
from .queues import LyapunovParams
from .subqp import build_subproblem, solve_dual_bisection


@dataclass(frozen=True)
class AdmmConfig:
    rho: float = 3.0
    delta: float = 1e-3
    k_max: int = 200
    k_s: int = 4
    truncation_enabled: bool = True
    grid_cap: float | None = None
    aux_check: bool = True

    def __post_init__(self):
        if self.rho <= 0:
            raise InvalidParameterError("rho must be > 0")
        if self.delta <= 0:
            raise InvalidParameterError("delta must be > 0")
        if not 1 <= self.k_s <= self.k_max:
            raise InvalidParameterError("need 1 <= k_s <= k_max")


@dataclass
class AdmmTrace:
    residuals: list = field(default_factory=list)
    aux_residuals: list = field(default_factory=list)
    shares: list = field(default_factory=list)
    iterations: int = 0
    solves: int = 0
    converged: bool = False
    truncated: bool = False
    adjustments: list = field(default_factory=list)


# A transport maps a station-local solve over station indices.  The default
# is sequential; a ThreadPoolExecutor.map or a networked fan-out fits here.
Transport = Callable[[Callable[[int], Decision], Iterable[int]], Iterable[Decision]]


def rebalance_shares(shares: np.ndarray, pairs: Sequence[tuple[int, int]] | None = None):
    """Make every linked pair exactly antisymmetric.

    The larger request is cut to the negation of the smaller one
    (``e_ij <- -e_ji`` when ``|e_ij| > |e_ji|``); the smaller side keeps its
    value.  On equal magnitudes the lower-indexed station adjusts.  Returns
    ``(new_shares, changes)`` where ``changes`` lists ``(i, j, old, new)``
    for every modified entry.
    """
    e = np.array(shares, dtype=float, copy=True)
    n = e.shape[0]
    if pairs is None:
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    changes = []
    for i, j in pairs:
        a, b = e[i, j], e[j, i]
        if a == -b:
            continue
        if abs(a) >= abs(b):
            e[i, j] = -b + 0.0
            changes.append((i, j, a, e[i, j]))
        else:
            e[j, i] = -a + 0.0
            changes.append((j, i, b, e[j, i]))
    return e, changes


def adjust_grid(d: Decision, delta_e: float, buyer: bool) -> Decision:
    """Offset a share reduction of ``delta_e`` (old minus new) through the grid.

    Buyers raise ``grid_buy``; sellers lower ``grid_sell``.  Whatever would
    push a grid variable below zero is routed to the other one.
    """
    if delta_e == 0:
        return d
    buy, sell = d.grid_buy, d.grid_sell
    if buyer:
        buy += delta_e
        if buy < 0:
            sell -= buy
            buy = 0.0
    else:
        sell -= delta_e
        if sell < 0:
            buy -= sell
            sell = 0.0
    return replace(d, grid_buy=buy, grid_sell=sell)


def _link_mask(params: Sequence[StationParams]) -> np.ndarray:
    n = len(params)
    mask = np.zeros((n, n), dtype=bool)
    for i, p in enumerate(params):
        for j in p.neighbors():
            mask[i, j] = True
    return mask


def default_grid_cap(s: SystemState, params: Sequence[StationParams]) -> float:
    scale = max(float(np.max(s.demand_max)), float(np.max(s.pv)), max(p.p_dis_max for p in params), 1.0)
    return 10.0 * scale


def finalize_shares(
    decisions: list[Decision], params: Sequence[StationParams], trace: AdmmTrace | None = None
) -> JointDecision:
    """Rebalance shares of a joint decision and repair station balances."""
    jd = JointDecision.from_stations(decisions)
    pairs = [(i, j) for i, p in enumerate(params) for j in p.neighbors() if j > i]
    new_share, changes = rebalance_shares(jd.share, pairs)
    out = list(decisions)
    for i, j, old, new in changes:
        d = out[i]
        d = adjust_grid(d, old - new, buyer=old >= 0)
        share = d.share.copy()
        share[j] = new
        out[i] = replace(d, share=share)
    if trace is not None:
        trace.adjustments.extend(changes)
    result = JointDecision.from_stations(out)
    result.share = new_share
    return result


def admm_slot_solve(
    s: SystemState,
    q: QueueState,
    lp: LyapunovParams,
    params: Sequence[StationParams],
    cfg: AdmmConfig = AdmmConfig(),
    transport: Transport = map,
    keep_shares: bool = False,
) -> tuple[JointDecision, AdmmTrace]:
    """Solve one slot of the online problem by (truncated) consensus ADMM."""
    n = s.n
    rho = cfg.rho
    mask = _link_mask(params)
    neighbors = [p.neighbors() for p in params]
    grid_cap = cfg.grid_cap if cfg.grid_cap is not None else default_grid_cap(s, params)
    eps = np.zeros((n, n))
    dual = np.zeros((n, n))
    trace = AdmmTrace()

    def local_solve(i: int) -> Decision:
        spec = build_subproblem(
            i, s, q, lp, params[i], eps[i], dual[i], rho=rho, grid_cap=grid_cap, neighbors=neighbors[i]
        )
        return solve_dual_bisection(spec).decision

    decisions: list[Decision] = []
    k = 0
    while True:
        decisions = list(transport(local_solve, range(n)))
        trace.solves += n
        k += 1
        e = np.array([d.share for d in decisions], dtype=float)
        eps_new = np.where(mask, 0.5 * ((e - e.T) + (dual - dual.T) / rho), 0.0)
        # ascent direction matches the +d/rho placement inside the penalty
        dual_new = np.where(mask, dual + rho * (e - eps_new), 0.0)
        r = float(np.linalg.norm(dual_new - dual))
        # without the auxiliary-change term a first antisymmetric iterate would stop the loop
        s_aux = rho * float(np.linalg.norm(eps_new - eps))
        trace.residuals.append(r)
        trace.aux_residuals.append(s_aux)
        if keep_shares:
            trace.shares.append(e)
        eps, dual = eps_new, dual_new
        if r <= cfg.delta and (s_aux <= cfg.delta or not cfg.aux_check):
            trace.converged = True
            break
        if cfg.truncation_enabled and k >= cfg.k_s:
            trace.truncated = True
            break
        if k >= cfg.k_max:
            break
    trace.iterations = k
    return finalize_shares(decisions, params, trace), trace
