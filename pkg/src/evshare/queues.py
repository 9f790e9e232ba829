"""Virtual-queue machinery for the drift-plus-penalty controller.

Two queues per station turn the long-run constraints into stability
conditions:

* ``b_queue = soc - theta`` tracks battery energy shifted by a constant
  perturbation ``theta``; keeping it stable is the time-average
  energy-neutrality condition.  With ``theta`` from :func:`compute_theta`
  and ``0 <= v <= v_max`` the greedy per-slot minimiser never pushes the
  physical SOC outside its bounds.
* ``h_queue`` accumulates shed ratio in excess of ``beta_shed``.

Each slot minimises ``sum_i b_i*pb_i + w*h_i*r_i + v*C_i`` (the constant
``-w*h_i*beta_i`` is dropped).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidParameterError
from .model import (
    Decision,
    JointDecision,
    QueueState,
    StationParams,
    SystemState,
    net_battery_energy,
    shed_ratio,
    slot_cost,
)


@dataclass(frozen=True)
class LyapunovParams:
    v: float
    w: float
    theta: np.ndarray
    drift_const: float

    def __post_init__(self):
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float))
        if self.v < 0:
            raise InvalidParameterError("v must be nonnegative")
        if self.w < 0:
            raise InvalidParameterError("w must be nonnegative")

    def gap_bound(self) -> float:
        """Upper bound ``A / v`` on the time-average optimality gap."""
        return float("inf") if self.v == 0 else self.drift_const / self.v


def _v_ratio(p: StationParams, c_buy_min: float, c_buy_max: float) -> float:
    num = p.e_batt_max - p.e_batt_min - p.eta_c * p.p_chg_max - p.p_dis_max / p.eta_d
    den = c_buy_max / p.eta_c - p.eta_d * c_buy_min + p.c_batt * (p.eta_d + 1.0 / p.eta_c)
    if num <= 0:
        raise InvalidParameterError(f"station {p.id}: battery range too small for any v > 0 (A1)")
    if den <= 0:
        raise InvalidParameterError(f"station {p.id}: nonpositive v_max denominator {den}")
    return num / den


def compute_v_max(params: Sequence[StationParams], price_bounds: tuple[float, float]) -> float:
    """Largest drift-penalty weight for which SOC bounds are guaranteed.

    ``price_bounds`` is the declared ``(c_buy_min, c_buy_max)``.
    """
    c_min, c_max = price_bounds
    if not params:
        raise InvalidParameterError("no stations")
    for p in params:
        if not p.satisfies_a1():
            raise InvalidParameterError(f"station {p.id}: A1 violated")
    return min(_v_ratio(p, c_min, c_max) for p in params)


def compute_theta(p: StationParams, v: float, c_buy_max: float) -> float:
    return p.e_batt_min + p.p_dis_max / p.eta_d + (v / p.eta_c) * (c_buy_max + p.c_batt)


def upper_soc_margin(p: StationParams, v: float, c_buy_max: float, c_sell: float) -> float:
    """Headroom left above the highest SOC at which charging can still pay off.

    With free surplus energy the per-slot minimiser charges while
    ``b*eta_c + v*(c_batt + c_sell) < 0``, i.e. below
    ``theta - v*(c_batt + c_sell)/eta_c``.  One more full-rate step from
    there must stay under ``e_batt_max``; a negative margin means the
    upper SOC bound is not guaranteed for this ``v``.
    """
    top = compute_theta(p, v, c_buy_max) - v * (p.c_batt + c_sell) / p.eta_c
    return p.e_batt_max - p.eta_c * p.p_chg_max - top


def drift_constant(params: Sequence[StationParams], w: float) -> float:
    battery = sum(max((p.eta_c * p.p_chg_max) ** 2, (p.p_dis_max / p.eta_d) ** 2) for p in params)
    shed = sum(1.0 + p.beta_shed**2 for p in params)
    return 0.5 * battery + 0.5 * w * shed


def default_w(v: float, params: Sequence[StationParams], demand_span: float) -> float:
    """Shedding-queue weight that puts ``w*h*r`` on the scale of ``v*alpha*(span*r)**2``."""
    return v * max(p.alpha for p in params) * demand_span**2


def make_lyapunov_params(
    params: Sequence[StationParams],
    price_bounds: tuple[float, float],
    v: float | None = None,
    w: float | None = None,
    demand_span: float = 1.0,
) -> LyapunovParams:
    """Assemble ``LyapunovParams``; ``v`` defaults to ``v_max``.

    ``w`` defaults to :func:`default_w` evaluated at ``v``.
    """
    v_max = compute_v_max(params, price_bounds)
    if v is None:
        v = v_max
    if not 0 <= v <= v_max * (1 + 1e-12):
        raise InvalidParameterError(f"v={v} outside [0, v_max={v_max}]")
    if w is None:
        w = default_w(v, params, demand_span)
    theta = np.array([compute_theta(p, v, price_bounds[1]) for p in params])
    return LyapunovParams(v=v, w=w, theta=theta, drift_const=drift_constant(params, w))


def initial_queues(params: Sequence[StationParams], lp: LyapunovParams, soc0=None) -> QueueState:
    """Mid-range SOC (unless given), ``H = 0`` and ``B = soc - theta``."""
    if soc0 is None:
        soc0 = [(p.e_batt_min + p.e_batt_max) / 2 for p in params]
    soc = np.asarray(soc0, dtype=float)
    return QueueState(soc=soc, b_queue=soc - lp.theta, h_queue=np.zeros(len(params)))


def update_b_queue(b: float, d: Decision, p: StationParams) -> float:
    return b + net_battery_energy(d, p)


def update_h_queue(h: float, ratio: float, beta: float) -> float:
    return max(h - beta, 0.0) + ratio


def advance_queues(
    q: QueueState, jd: JointDecision, s: SystemState, params: Sequence[StationParams]
) -> QueueState:
    """Apply one slot of SOC, B and H dynamics for every station."""
    soc = q.soc.copy()
    b = q.b_queue.copy()
    h = q.h_queue.copy()
    for i, p in enumerate(params):
        d = jd.station(i)
        pb = net_battery_energy(d, p)
        soc[i] = q.soc[i] + pb
        b[i] = q.b_queue[i] + pb
        h[i] = update_h_queue(q.h_queue[i], shed_ratio(d, s), p.beta_shed)
    return QueueState(soc, b, h)


def p3_station_objective(
    d: Decision, s: SystemState, q: QueueState, lp: LyapunovParams, p: StationParams, check: bool = True
) -> float:
    i = d.station
    cost = slot_cost(d, s, p, check=check).total
    return q.b_queue[i] * net_battery_energy(d, p) + lp.w * q.h_queue[i] * shed_ratio(d, s) + lp.v * cost


def p3_objective(
    jd: JointDecision,
    s: SystemState,
    q: QueueState,
    lp: LyapunovParams,
    params: Sequence[StationParams],
    check: bool = True,
) -> float:
    """Per-slot drift-plus-penalty bound (without its constant terms)."""
    return sum(p3_station_objective(jd.station(i), s, q, lp, p, check) for i, p in enumerate(params))
