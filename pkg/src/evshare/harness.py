"""Simulation loop, run reports and parameter sweeps."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .admm import AdmmConfig, admm_slot_solve
from .baselines import BaselineConfig, greedy_slot, mpc_slot, offline_solve
from .errors import ControllerError, EvShareError, InvalidParameterError, InvariantViolation, SocViolationError
from .model import (
    BALANCE_TOL,
    JointDecision,
    SystemState,
    joint_slot_costs,
    joint_violations,
    share_budget_residual,
    shed_ratio,
)
from .queues import LyapunovParams, advance_queues, initial_queues, make_lyapunov_params, upper_soc_margin
from .scenario import ScenarioConfig, load_states, symmetric_config

log = logging.getLogger(__name__)

CONTROLLERS = ("proposed", "B1", "B2", "B3", "B4")
COST_FIELDS = ("grid", "share", "battery", "shed")


@dataclass(frozen=True)
class SimConfig:
    admm: AdmmConfig = AdmmConfig()
    baseline: BaselineConfig = BaselineConfig()
    v: float | None = None
    w: float | None = None
    soc0: tuple | None = None
    soc_tol: float = 1e-9

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunReport:
    controller: str
    seed: int
    stations: int
    decisions: list = field(default_factory=list)
    soc: np.ndarray = None
    b_queue: np.ndarray = None
    h_queue: np.ndarray = None
    costs: np.ndarray = None  # (T, n, 4): grid, share, battery, shed
    shed: np.ndarray = None  # (T, n) per-slot shed ratios
    budget: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    solves: int = 0
    truncated_slots: int = 0
    wall_time: float = 0.0
    v: float | None = None
    w: float | None = None
    config: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.decisions)

    @property
    def slot_costs(self) -> np.ndarray:
        return self.costs.sum(axis=(1, 2)) if self.T else np.zeros(0)

    @property
    def cumulative_cost(self) -> np.ndarray:
        return np.cumsum(self.slot_costs)

    @property
    def total_cost(self) -> float:
        return float(self.slot_costs.sum()) if self.T else 0.0

    def breakdown(self) -> dict:
        """Per-station totals of each cost component plus station totals."""
        out = {}
        for i in range(self.stations):
            row = {f: float(self.costs[:, i, k].sum()) if self.T else 0.0 for k, f in enumerate(COST_FIELDS)}
            row["total"] = sum(row[f] for f in COST_FIELDS)
            out[f"station_{i + 1}"] = row
        return out

    def average_shed(self) -> np.ndarray:
        """Time-average shed ratio per station."""
        return self.shed.mean(axis=0) if self.T else np.zeros(self.stations)

    def shared_energy(self) -> float:
        """Total traded volume, counting each link once."""
        return float(sum(np.abs(np.triu(d.share, 1)).sum() for d in self.decisions))

    def admm_stats(self) -> dict:
        if not self.iterations:
            return {"mean_iterations": 0.0, "max_iterations": 0, "solves": 0, "truncated_slots": 0}
        it = np.asarray(self.iterations)
        return {
            "mean_iterations": float(it.mean()),
            "max_iterations": int(it.max()),
            "solves": int(self.solves),
            "truncated_slots": int(self.truncated_slots),
        }

    def summary(self, timing: bool = True) -> dict:
        out = {
            "controller": self.controller,
            "seed": self.seed,
            "T": self.T,
            "stations": self.stations,
            "v": self.v,
            "w": self.w,
            "total_cost": self.total_cost,
            "breakdown": self.breakdown(),
            "average_shed": self.average_shed().tolist(),
            "shared_energy": self.shared_energy(),
            "admm": self.admm_stats(),
            "config": self.config,
        }
        if timing:
            out["wall_time"] = self.wall_time
        return out

    def write(self, out_dir) -> Path:
        """Write ``trajectory.csv`` and ``summary.json`` into ``out_dir``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "trajectory.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(
                ["t", "station", "soc", "b_queue", "h_queue", "grid_buy", "grid_sell", "share_net",
                 "batt_dis", "batt_chg", "demand_served", "shed_ratio", *COST_FIELDS, "cumulative_cost"]
            )
            cum = self.cumulative_cost
            for t, jd in enumerate(self.decisions):
                for i in range(self.stations):
                    w.writerow(
                        [t, i + 1]
                        + [repr(float(x)) for x in (
                            self.soc[t + 1, i], self.b_queue[t + 1, i], self.h_queue[t + 1, i],
                            jd.grid_buy[i], jd.grid_sell[i], jd.share[i].sum(), jd.batt_dis[i],
                            jd.batt_chg[i], jd.demand_served[i], self.shed[t, i],
                            *self.costs[t, i], cum[t],
                        )]
                    )
        with open(out / "summary.json", "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return out


def _lyapunov(scn: ScenarioConfig, cfg: SimConfig) -> LyapunovParams:
    lp = make_lyapunov_params(scn.stations, scn.price_bounds, v=cfg.v, w=cfg.w, demand_span=scn.demand_span_ref)
    for p in scn.stations:
        margin = upper_soc_margin(p, lp.v, scn.price_buy_max, scn.price_sell)
        if margin < 0:
            log.warning("station %d: upper SOC bound not guaranteed at v=%.4g (margin %.4g kWh)", p.id, lp.v, margin)
    return lp


def _check_slot(t: int, jd: JointDecision, s: SystemState, soc_next: np.ndarray, params, tol: float) -> float:
    bad = joint_violations(jd, s, params, BALANCE_TOL)
    if bad:
        raise InvariantViolation(f"slot {t}: infeasible decision: " + "; ".join(bad), slot=t)
    if np.any(jd.share + jd.share.T != 0):
        raise InvariantViolation(f"slot {t}: shares are not exactly antisymmetric", slot=t)
    for i, p in enumerate(params):
        if soc_next[i] < p.e_batt_min - tol or soc_next[i] > p.e_batt_max + tol:
            raise SocViolationError(
                f"slot {t}: station {i} soc {soc_next[i]!r} outside [{p.e_batt_min}, {p.e_batt_max}]", slot=t
            )
    budget = share_budget_residual(jd, s)
    if budget != 0.0:
        raise InvariantViolation(f"slot {t}: sharing payments sum to {budget!r}", slot=t)
    return budget


def simulate(
    scn: ScenarioConfig,
    controller: str = "proposed",
    cfg: SimConfig = SimConfig(),
    states: Sequence[SystemState] | None = None,
    seed: int | None = None,
) -> RunReport:
    """Run one controller over a scenario, checking invariants every slot.

    SOC bounds, per-station balance, exact share antisymmetry and the zero
    net sharing payment are hard failures (:class:`InvariantViolation`).
    Controller exceptions are re-raised as :class:`ControllerError` with
    the slot index.
    """
    if controller not in CONTROLLERS:
        raise InvalidParameterError(f"unknown controller {controller!r}; choose from {CONTROLLERS}")
    seed = scn.seed if seed is None else seed
    if states is None:
        states = load_states(scn, seed)
    params = scn.stations
    n = len(params)
    T = len(states)
    lp = _lyapunov(scn, cfg)
    q = initial_queues(params, lp, cfg.soc0)
    rep = RunReport(controller=controller, seed=seed, stations=n, v=lp.v, w=lp.w)
    rep.config = {"scenario": scn.to_dict(), "sim": cfg.to_dict()}
    socs, bs, hs = [q.soc.copy()], [q.b_queue.copy()], [q.h_queue.copy()]
    costs = np.zeros((T, n, len(COST_FIELDS)))
    shed = np.zeros((T, n))
    grid_cap = cfg.admm.grid_cap
    t0 = time.perf_counter()

    offline = None
    if controller == "B4" and T:
        try:
            offline = offline_solve(states, params, q.soc, grid_cap=grid_cap)
        except EvShareError as exc:
            raise ControllerError(f"offline solve failed: {exc}", slot=0) from exc

    for t, s in enumerate(states):
        try:
            if controller == "proposed":
                jd, trace = admm_slot_solve(s, q, lp, params, cfg.admm)
                rep.iterations.append(trace.iterations)
                rep.solves += trace.solves
                rep.truncated_slots += int(trace.truncated)
            elif controller in ("B1", "B2"):
                jd = greedy_slot(s, q.soc, params, cfg.baseline, sharing=controller == "B2", grid_cap=grid_cap)
            elif controller == "B3":
                window = states[t : t + cfg.baseline.mpc_horizon]
                jd = mpc_slot(window, q.soc, params, cfg.baseline, grid_cap=grid_cap)
            else:
                jd = offline.decisions[t]
        except EvShareError as exc:
            raise ControllerError(f"slot {t}: {controller} failed: {exc}", slot=t) from exc
        q_next = advance_queues(q, jd, s, params)
        rep.budget.append(_check_slot(t, jd, s, q_next.soc, params, cfg.soc_tol))
        for i, c in enumerate(joint_slot_costs(jd, s, params, check=False)):
            costs[t, i] = (c.grid, c.share, c.battery, c.shed)
            shed[t, i] = shed_ratio(jd.station(i), s)
        rep.decisions.append(jd)
        q = q_next
        socs.append(q.soc.copy())
        bs.append(q.b_queue.copy())
        hs.append(q.h_queue.copy())

    rep.wall_time = time.perf_counter() - t0
    rep.soc, rep.b_queue, rep.h_queue = np.array(socs), np.array(bs), np.array(hs)
    rep.costs, rep.shed = costs, shed
    log.info("%s seed=%d T=%d cost=%.4f", controller, seed, T, rep.total_cost)
    return rep


def compare(
    scn: ScenarioConfig,
    controllers: Sequence[str] = CONTROLLERS,
    cfg: SimConfig = SimConfig(),
    seed: int | None = None,
) -> dict:
    """Run several controllers on the same realised trace."""
    states = load_states(scn, scn.seed if seed is None else seed)
    return {c: simulate(scn, c, cfg, states=states, seed=seed) for c in controllers}


def sweep_v(
    scn: ScenarioConfig,
    fractions: Sequence[float],
    cfg: SimConfig = SimConfig(),
    seed: int | None = None,
) -> list[dict]:
    """Simulate the proposed controller at ``v = fraction * v_max``.

    The shedding weight is held at its ``v_max`` default across the sweep
    so that only the cost/backlog trade-off moves.
    """
    if any(not 0 < f <= 1 for f in fractions):
        raise InvalidParameterError("fractions must lie in (0, 1]")
    ref = make_lyapunov_params(scn.stations, scn.price_bounds, w=cfg.w, demand_span=scn.demand_span_ref)
    states = load_states(scn, scn.seed if seed is None else seed)
    rows = []
    for f in fractions:
        v = f * ref.v
        run_cfg = SimConfig(cfg.admm, cfg.baseline, v=v, w=ref.w, soc0=cfg.soc0, soc_tol=cfg.soc_tol)
        rep = simulate(scn, "proposed", run_cfg, states=states, seed=seed)
        shed = rep.average_shed()
        rows.append(
            {
                "fraction": float(f),
                "v": float(v),
                "total_cost": rep.total_cost,
                "average_shed": shed.tolist(),
                "mean_shed": float(shed.mean()),
            }
        )
    return rows


def sweep_scale(
    counts: Sequence[int],
    T: int = 48,
    seed: int = 0,
    cfg: SimConfig = SimConfig(),
) -> list[dict]:
    """Truncated vs untruncated ADMM wall time and cost per station count."""
    rows = []
    for n in counts:
        scn = symmetric_config(int(n), T=T, seed=seed)
        states = load_states(scn, seed)
        out = {"stations": int(n)}
        for label, trunc in (("truncated", True), ("untruncated", False)):
            admm = AdmmConfig(**{**asdict(cfg.admm), "truncation_enabled": trunc})
            rep = simulate(scn, "proposed", SimConfig(admm, cfg.baseline, cfg.v, cfg.w), states=states, seed=seed)
            out[f"{label}_time"] = rep.wall_time
            out[f"{label}_cost"] = rep.total_cost
            out[f"{label}_iterations"] = rep.admm_stats()["mean_iterations"]
        rows.append(out)
    return rows
