"""Domain types, feasibility predicates and per-slot cost functions.

All power-like quantities are energies per slot (kWh/slot), so the slot
length never enters a formula.  Sharing quantities use the convention
``share[j] > 0``: this station buys from station ``j``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import InfeasibleDecisionError, InvalidParameterError

BALANCE_TOL = 1e-6


@dataclass(frozen=True)
class StationParams:
    """Static physical and economic parameters of one charging station.

    ``share_min`` / ``share_max`` are indexed by the *other* station; the
    entry at ``id`` itself is ignored and kept at zero.  A pair with both
    bounds zero is not linked.
    """

    id: int
    e_batt_min: float
    e_batt_max: float
    p_dis_max: float
    p_chg_max: float
    share_min: tuple = ()
    share_max: tuple = ()
    eta_d: float = 0.95
    eta_c: float = 0.95
    c_batt: float = 0.01
    alpha: float = 0.1
    beta_shed: float = 0.15

    def __post_init__(self):
        object.__setattr__(self, "share_min", tuple(float(x) for x in self.share_min))
        object.__setattr__(self, "share_max", tuple(float(x) for x in self.share_max))
        if not self.e_batt_min < self.e_batt_max:
            raise InvalidParameterError(f"station {self.id}: e_batt_min must be < e_batt_max")
        if self.p_dis_max <= 0 or self.p_chg_max <= 0:
            raise InvalidParameterError(f"station {self.id}: battery power limits must be positive")
        for name in ("eta_d", "eta_c"):
            eta = getattr(self, name)
            if not 0 < eta <= 1:
                raise InvalidParameterError(f"station {self.id}: {name}={eta} outside (0, 1]")
        if self.c_batt < 0 or self.alpha < 0:
            raise InvalidParameterError(f"station {self.id}: cost coefficients must be >= 0")
        if not 0 < self.beta_shed <= 1:
            raise InvalidParameterError(f"station {self.id}: beta_shed outside (0, 1]")
        if len(self.share_min) != len(self.share_max):
            raise InvalidParameterError(f"station {self.id}: share bound lengths differ")
        for j, (lo, hi) in enumerate(zip(self.share_min, self.share_max)):
            if not lo <= 0 <= hi:
                raise InvalidParameterError(
                    f"station {self.id}: share bounds to {j} must satisfy lo <= 0 <= hi"
                )
        if self.share_min and (self.share_min[self.id] != 0 or self.share_max[self.id] != 0):
            raise InvalidParameterError(f"station {self.id}: self-share bounds must be zero")

    @property
    def battery_range(self) -> float:
        return self.e_batt_max - self.e_batt_min

    def satisfies_a1(self) -> bool:
        """Capacity holds two consecutive full-rate charges or discharges."""
        step = max(self.p_dis_max / self.eta_d, self.p_chg_max * self.eta_c)
        return 2.0 * step <= self.battery_range

    def neighbors(self) -> list[int]:
        return [
            j
            for j, (lo, hi) in enumerate(zip(self.share_min, self.share_max))
            if j != self.id and (lo < 0 or hi > 0)
        ]


def validate_params(params: Sequence[StationParams]) -> None:
    """Check indices, bound-vector lengths, A1 and link-bound symmetry."""
    n = len(params)
    for i, p in enumerate(params):
        if p.id != i:
            raise InvalidParameterError(f"station at position {i} has id {p.id}")
        if len(p.share_min) != n:
            raise InvalidParameterError(f"station {i}: share bounds must have length {n}")
        if not p.satisfies_a1():
            raise InvalidParameterError(f"station {i}: battery too small for two full-rate steps (A1)")
    for i in range(n):
        for j in range(i + 1, n):
            pi, pj = params[i], params[j]
            if pi.share_min[j] != pj.share_min[i] or pi.share_max[j] != pj.share_max[i]:
                raise InvalidParameterError(f"share bounds between {i} and {j} are not symmetric")


def share_bound_matrices(params: Sequence[StationParams]) -> tuple[np.ndarray, np.ndarray]:
    lo = np.array([p.share_min for p in params], dtype=float)
    hi = np.array([p.share_max for p in params], dtype=float)
    return lo, hi


def link_pairs(params: Sequence[StationParams]) -> list[tuple[int, int]]:
    """Linked station pairs ``(i, j)`` with ``i < j``."""
    return [(i, j) for i, p in enumerate(params) for j in p.neighbors() if j > i]


@dataclass
class SystemState:
    """Exogenous inputs for one slot (prices, PV, demand bounds)."""

    t: int
    price_buy: float
    price_sell: float
    price_share: float
    pv: np.ndarray
    demand_min: np.ndarray
    demand_max: np.ndarray

    def __post_init__(self):
        self.pv = np.asarray(self.pv, dtype=float)
        self.demand_min = np.asarray(self.demand_min, dtype=float)
        self.demand_max = np.asarray(self.demand_max, dtype=float)

    @property
    def n(self) -> int:
        return len(self.pv)

    @property
    def demand_span(self) -> np.ndarray:
        return self.demand_max - self.demand_min

    def violations(self, buy_bounds: tuple[float, float] | None = None) -> list[str]:
        out = []
        if not self.price_sell < self.price_share < self.price_buy:
            out.append(
                f"price ordering sell < share < buy violated "
                f"({self.price_sell}, {self.price_share}, {self.price_buy})"
            )
        if buy_bounds is not None:
            lo, hi = buy_bounds
            if not lo <= self.price_buy <= hi:
                out.append(f"price_buy {self.price_buy} outside [{lo}, {hi}]")
        if np.any(self.pv < 0):
            out.append("negative pv")
        if np.any(self.demand_min < 0):
            out.append("negative demand_min")
        if np.any(self.demand_max < self.demand_min):
            out.append("demand_max < demand_min")
        if not len(self.pv) == len(self.demand_min) == len(self.demand_max):
            out.append("per-station array lengths differ")
        return out

    def validate(self, buy_bounds: tuple[float, float] | None = None) -> None:
        bad = self.violations(buy_bounds)
        if bad:
            raise InvalidParameterError(f"slot {self.t}: " + "; ".join(bad))


@dataclass
class Decision:
    """Control vector of one station for one slot."""

    station: int
    grid_buy: float
    grid_sell: float
    share: np.ndarray
    batt_dis: float
    batt_chg: float
    demand_served: float

    def __post_init__(self):
        self.share = np.asarray(self.share, dtype=float)

    def balance_residual(self, pv: float) -> float:
        supply = self.grid_buy - self.grid_sell + float(np.sum(self.share)) + pv + self.batt_dis - self.batt_chg
        return self.demand_served - supply


@dataclass
class JointDecision:
    """Decisions of all stations for one slot, stored column-wise."""

    grid_buy: np.ndarray
    grid_sell: np.ndarray
    share: np.ndarray
    batt_dis: np.ndarray
    batt_chg: np.ndarray
    demand_served: np.ndarray

    @property
    def n(self) -> int:
        return len(self.grid_buy)

    def station(self, i: int) -> Decision:
        return Decision(
            station=i,
            grid_buy=float(self.grid_buy[i]),
            grid_sell=float(self.grid_sell[i]),
            share=self.share[i].copy(),
            batt_dis=float(self.batt_dis[i]),
            batt_chg=float(self.batt_chg[i]),
            demand_served=float(self.demand_served[i]),
        )

    def stations(self) -> list[Decision]:
        return [self.station(i) for i in range(self.n)]

    @classmethod
    def from_stations(cls, decisions: Sequence[Decision]) -> "JointDecision":
        decisions = sorted(decisions, key=lambda d: d.station)
        return cls(
            grid_buy=np.array([d.grid_buy for d in decisions]),
            grid_sell=np.array([d.grid_sell for d in decisions]),
            share=np.array([d.share for d in decisions], dtype=float),
            batt_dis=np.array([d.batt_dis for d in decisions]),
            batt_chg=np.array([d.batt_chg for d in decisions]),
            demand_served=np.array([d.demand_served for d in decisions]),
        )

    def copy(self) -> "JointDecision":
        return JointDecision(*(np.array(a, copy=True) for a in (
            self.grid_buy, self.grid_sell, self.share, self.batt_dis, self.batt_chg, self.demand_served
        )))

    def balance_residuals(self, s: SystemState) -> np.ndarray:
        supply = self.grid_buy - self.grid_sell + self.share.sum(axis=1) + s.pv + self.batt_dis - self.batt_chg
        return self.demand_served - supply

    def antisymmetry_residual(self) -> float:
        return float(np.max(np.abs(self.share + self.share.T), initial=0.0))


@dataclass
class QueueState:
    """Physical SOC plus the two virtual queues, one entry per station."""

    soc: np.ndarray
    b_queue: np.ndarray
    h_queue: np.ndarray

    def __post_init__(self):
        self.soc = np.asarray(self.soc, dtype=float)
        self.b_queue = np.asarray(self.b_queue, dtype=float)
        self.h_queue = np.asarray(self.h_queue, dtype=float)

    def copy(self) -> "QueueState":
        return QueueState(self.soc.copy(), self.b_queue.copy(), self.h_queue.copy())


@dataclass(frozen=True)
class CostBreakdown:
    grid: float = 0.0
    share: float = 0.0
    battery: float = 0.0
    shed: float = 0.0

    @property
    def total(self) -> float:
        return self.grid + self.share + self.battery + self.shed


def decision_violations(d: Decision, s: SystemState, p: StationParams, tol: float = BALANCE_TOL) -> list[str]:
    """List every constraint a station decision breaks; empty means feasible."""
    i = d.station
    out = []
    if d.grid_buy < -tol or d.grid_sell < -tol:
        out.append("negative grid exchange")
    if not -tol <= d.batt_dis <= p.p_dis_max + tol:
        out.append(f"batt_dis {d.batt_dis} outside [0, {p.p_dis_max}]")
    if not -tol <= d.batt_chg <= p.p_chg_max + tol:
        out.append(f"batt_chg {d.batt_chg} outside [0, {p.p_chg_max}]")
    if not s.demand_min[i] - tol <= d.demand_served <= s.demand_max[i] + tol:
        out.append(
            f"demand_served {d.demand_served} outside [{s.demand_min[i]}, {s.demand_max[i]}]"
        )
    if p.share_min:
        lo = np.asarray(p.share_min)
        hi = np.asarray(p.share_max)
        if np.any(d.share < lo - tol) or np.any(d.share > hi + tol):
            out.append("share outside link bounds")
    res = d.balance_residual(float(s.pv[i]))
    if abs(res) > tol:
        out.append(f"power balance residual {res:.3e}")
    return out


def is_feasible(d: Decision, s: SystemState, p: StationParams, tol: float = BALANCE_TOL) -> bool:
    return not decision_violations(d, s, p, tol)


def joint_violations(
    jd: JointDecision, s: SystemState, params: Sequence[StationParams], tol: float = BALANCE_TOL
) -> list[str]:
    out = []
    for i, p in enumerate(params):
        out.extend(f"station {i}: {v}" for v in decision_violations(jd.station(i), s, p, tol))
    asym = jd.antisymmetry_residual()
    if asym > tol:
        out.append(f"share antisymmetry residual {asym:.3e}")
    return out


def net_battery_energy(d: Decision, p: StationParams) -> float:
    """Net energy added to the battery: ``-dis/eta_d + chg*eta_c``."""
    return -d.batt_dis / p.eta_d + d.batt_chg * p.eta_c


def shed_ratio(d: Decision, s: SystemState) -> float:
    """Fraction of the sheddable band left unserved.

    A degenerate band (``demand_max == demand_min``) has nothing to shed
    and yields 0.
    """
    i = d.station
    span = s.demand_max[i] - s.demand_min[i]
    if span <= 0:
        return 0.0
    return float((s.demand_max[i] - d.demand_served) / span)


def slot_cost(d: Decision, s: SystemState, p: StationParams, check: bool = True) -> CostBreakdown:
    if check:
        bad = decision_violations(d, s, p)
        if bad:
            raise InfeasibleDecisionError(f"station {d.station} slot {s.t} infeasible: " + "; ".join(bad), bad)
    i = d.station
    return CostBreakdown(
        grid=d.grid_buy * s.price_buy - d.grid_sell * s.price_sell,
        share=float(np.sum(d.share)) * s.price_share,
        battery=p.c_batt * (d.batt_dis + d.batt_chg),
        shed=p.alpha * (s.demand_max[i] - d.demand_served) ** 2,
    )


def joint_slot_costs(
    jd: JointDecision, s: SystemState, params: Sequence[StationParams], check: bool = True
) -> list[CostBreakdown]:
    return [slot_cost(jd.station(i), s, p, check=check) for i, p in enumerate(params)]


def share_budget_residual(jd: JointDecision, s: SystemState) -> float:
    """Sum of all pairwise sharing payments, accumulated exactly.

    Exactly zero whenever ``share[i, j] == -share[j, i]`` bit-for-bit,
    because ``c*(-x) == -(c*x)`` in IEEE arithmetic and ``fsum`` is exact.
    """
    n = jd.n
    return math.fsum(s.price_share * jd.share[i, j] for i in range(n) for j in range(n) if i != j)


def step_soc(soc: float, d: Decision, p: StationParams) -> float:
    """Battery energy after one slot; bounds are not enforced here."""
    return soc + net_battery_energy(d, p)


def simultaneous_flags(d: Decision, tol: float = BALANCE_TOL) -> list[str]:
    """Flag slots where both sides of a grid or battery pair are active."""
    flags = []
    if d.grid_buy > tol and d.grid_sell > tol:
        flags.append("grid")
    if d.batt_dis > tol and d.batt_chg > tol:
        flags.append("battery")
    return flags


def zero_decision(station: int, n: int) -> Decision:
    return Decision(station, 0.0, 0.0, np.zeros(n), 0.0, 0.0, 0.0)


def with_share(d: Decision, share: np.ndarray) -> Decision:
    return replace(d, share=np.asarray(share, dtype=float).copy())
