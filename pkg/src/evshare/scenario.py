"""Exogenous data: seeded synthetic traces and CSV ingestion.

Two synthetic regimes are provided.  ``diurnal`` produces a week-like
trace with sinusoidal PV, a two-peak charging profile and a mean-reverting
buy price with occasional spikes; station 1 (index 1) is PV-rich while the
others are demand-heavy.  ``iid`` draws every slot independently and
uniformly inside the declared bounds.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .model import StationParams, SystemState, validate_params


class CsvSchemaError(ConfigError):
    pass


class BoundViolationError(ConfigError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


@dataclass
class ScenarioConfig:
    stations: list
    pv_peak: list
    demand_peak: list
    T: int = 1008
    slot_minutes: float = 10.0
    mode: str = "diurnal"
    seed: int = 0
    price_buy_min: float = 0.02
    price_buy_max: float = 0.12
    price_sell: float = 0.01
    share_rule: str = "mid"
    demand_gamma: float = 0.6
    # diurnal price process: wholesale-like levels that stay mostly below the
    # greedy charging threshold, with the declared ceiling close to what is
    # realised (v_max, and with it the usable SOC band, scales as 1/ceiling)
    price_night: float = 0.022
    price_peak: float = 0.085
    price_reversion: float = 0.15
    price_noise: float = 0.012
    spike_prob: float = 0.01
    spike_size: float = 0.05
    spike_decay: float = 0.7
    pv_noise: float = 0.25
    demand_noise: float = 0.15
    csv_path: str | None = None

    def __post_init__(self):
        self.stations = [s if isinstance(s, StationParams) else StationParams(**s) for s in self.stations]
        n = len(self.stations)
        if len(self.pv_peak) != n or len(self.demand_peak) != n:
            raise ConfigError("pv_peak and demand_peak need one entry per station")
        if self.T < 0:
            raise ConfigError("T must be >= 0")
        if self.mode not in ("diurnal", "iid", "csv"):
            raise ConfigError(f"unknown scenario mode {self.mode!r}")
        if self.mode == "csv" and not self.csv_path:
            raise ConfigError("csv mode needs csv_path")
        if not 0 <= self.demand_gamma < 1:
            raise ConfigError("demand_gamma must lie in [0, 1)")
        if not 0 <= self.price_sell < self.price_buy_min < self.price_buy_max:
            raise ConfigError("need 0 <= price_sell < price_buy_min < price_buy_max")
        if self.share_rule != "mid":
            raise ConfigError(f"unknown share price rule {self.share_rule!r}")
        try:
            validate_params(self.stations)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def n_stations(self) -> int:
        return len(self.stations)

    @property
    def price_bounds(self) -> tuple[float, float]:
        return (self.price_buy_min, self.price_buy_max)

    @property
    def demand_span_ref(self) -> float:
        """Typical width of the sheddable band, used to scale the shedding-queue weight."""
        return (1.0 - self.demand_gamma) * float(np.mean(self.demand_peak)) * 0.5

    def share_price(self, buy: float, sell: float) -> float:
        return 0.5 * (buy + sell)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stations"] = [asdict(s) for s in self.stations]
        for s in d["stations"]:
            s["share_min"] = list(s["share_min"])
            s["share_max"] = list(s["share_max"])
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        data = dict(data)
        n = len(data.get("stations", []))
        stations = []
        for i, raw in enumerate(data.get("stations", [])):
            raw = dict(raw)
            raw.setdefault("id", i)
            # share_limit is a symmetric shorthand; a station with neither is unlinked
            limit = float(raw.pop("share_limit", 0.0))
            raw.setdefault("share_min", [0.0 if j == i else -limit for j in range(n)])
            raw.setdefault("share_max", [0.0 if j == i else limit for j in range(n)])
            stations.append(raw)
        data["stations"] = stations
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def make_stations(
    e_min: Sequence[float],
    e_max: Sequence[float],
    p_max: Sequence[float],
    share_limit: float = 15.0,
    **common,
) -> list[StationParams]:
    n = len(e_min)
    out = []
    for i in range(n):
        lo = [0.0 if j == i else -share_limit for j in range(n)]
        hi = [0.0 if j == i else share_limit for j in range(n)]
        out.append(
            StationParams(
                id=i,
                e_batt_min=e_min[i],
                e_batt_max=e_max[i],
                p_dis_max=p_max[i],
                p_chg_max=p_max[i],
                share_min=lo,
                share_max=hi,
                **common,
            )
        )
    return out


def default_config(
    T: int = 1008,
    seed: int = 0,
    mode: str = "diurnal",
    share_limit: float = 15.0,
    battery_kw: Sequence[float] = (10.0, 20.0, 20.0),
    slot_minutes: float = 10.0,
    **overrides,
) -> ScenarioConfig:
    """Three stations: 100/200/200 kWh batteries rated 10/20/20 kW, eta 0.95, c_b 0.01.

    Battery ratings become per-slot energies (``kW * slot_minutes / 60``).
    Station index 1 is PV-rich with moderate demand; 0 and 2 are demand-heavy.
    """
    p_max = [kw * slot_minutes / 60.0 for kw in battery_kw]
    stations = make_stations([10.0, 20.0, 20.0], [100.0, 200.0, 200.0], p_max, share_limit)
    cfg = dict(
        stations=stations,
        pv_peak=[6.0, 30.0, 8.0],
        demand_peak=[30.0, 17.5, 35.0],
        T=T,
        seed=seed,
        mode=mode,
        slot_minutes=slot_minutes,
    )
    cfg.update(overrides)
    return ScenarioConfig(**cfg)


def symmetric_config(
    n: int, T: int = 1008, seed: int = 0, share_limit: float = 15.0, slot_minutes: float = 10.0, **overrides
) -> ScenarioConfig:
    """``n`` structurally identical 200 kWh / 20 kW stations whose PV and demand peaks alternate."""
    p = 20.0 * slot_minutes / 60.0
    stations = make_stations([20.0] * n, [200.0] * n, [p] * n, share_limit)
    pv = [30.0 if i % 3 == 1 else 8.0 for i in range(n)]
    dem = [7.0 if i % 3 == 1 else 13.0 for i in range(n)]
    cfg = dict(stations=stations, pv_peak=pv, demand_peak=dem, T=T, seed=seed, slot_minutes=slot_minutes)
    cfg.update(overrides)
    return ScenarioConfig(**cfg)


def _truncated_normal(rng: np.random.Generator, size, scale: float, bound: float = 2.0) -> np.ndarray:
    """Zero-mean Gaussian noise truncated to ``[-bound*scale, bound*scale]`` by resampling."""
    out = rng.normal(0.0, 1.0, size)
    bad = np.abs(out) > bound
    while np.any(bad):
        out[bad] = rng.normal(0.0, 1.0, int(bad.sum()))
        bad = np.abs(out) > bound
    return out * scale


def _hours(cfg: ScenarioConfig) -> np.ndarray:
    return (np.arange(cfg.T) * cfg.slot_minutes / 60.0) % 24.0


def _demand_shape(h: np.ndarray) -> np.ndarray:
    return 0.25 + 0.6 * np.exp(-((h - 8.5) ** 2) / (2 * 1.5**2)) + 0.75 * np.exp(-((h - 18.0) ** 2) / (2 * 2.0**2))


def _price_mean(cfg: ScenarioConfig, h: np.ndarray) -> np.ndarray:
    day = 0.5 * (1 + np.cos(2 * np.pi * (h - 17.0) / 24.0))
    return cfg.price_night + (cfg.price_peak - cfg.price_night) * day**2


def generate_synthetic(cfg: ScenarioConfig, seed: int | None = None) -> list[SystemState]:
    """Deterministic trace of ``cfg.T`` slots for ``seed`` (defaults to ``cfg.seed``)."""
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    n, T = cfg.n_stations, cfg.T
    pv_peak = np.asarray(cfg.pv_peak, dtype=float)
    d_peak = np.asarray(cfg.demand_peak, dtype=float)
    lo, hi = cfg.price_bounds

    if cfg.mode == "iid":
        buy = rng.uniform(lo, hi, T)
        pv = rng.uniform(0.0, 1.0, (T, n)) * pv_peak
        dmax = rng.uniform(0.2, 1.0, (T, n)) * d_peak
    elif cfg.mode == "diurnal":
        h = _hours(cfg)
        sun = np.clip(np.sin(np.pi * (h - 6.0) / 12.0), 0.0, None)
        cloud = np.clip(1.0 + _truncated_normal(rng, (T, n), cfg.pv_noise), 0.0, None)
        pv = sun[:, None] * pv_peak[None, :] * cloud
        dshape = _demand_shape(h) / 1.6
        dnoise = 1.0 + _truncated_normal(rng, (T, n), cfg.demand_noise)
        dmax = np.clip(dshape[:, None] * d_peak[None, :] * dnoise, 0.0, None)
        mean = _price_mean(cfg, h)
        buy = np.empty(T)
        x = mean[0] if T else 0.0
        spike = 0.0
        noise = rng.normal(0.0, cfg.price_noise, T)
        jumps = rng.random(T) < cfg.spike_prob
        sizes = rng.exponential(cfg.spike_size, T)
        for t in range(T):
            x = x + cfg.price_reversion * (mean[t] - x) + noise[t]
            spike = spike * cfg.spike_decay + (sizes[t] if jumps[t] else 0.0)
            buy[t] = x + spike
        buy = np.clip(buy, lo, hi)
    else:
        raise ConfigError("csv scenarios are loaded with load_csv")

    sell = cfg.price_sell
    states = []
    for t in range(T):
        dm = dmax[t]
        states.append(
            SystemState(
                t=t,
                price_buy=float(buy[t]),
                price_sell=sell,
                price_share=cfg.share_price(float(buy[t]), sell),
                pv=pv[t].copy(),
                demand_min=cfg.demand_gamma * dm,
                demand_max=dm.copy(),
            )
        )
    return states


def csv_header(n: int) -> list[str]:
    return (
        ["t", "price_buy", "price_sell", "price_share"]
        + [f"pv_{i + 1}" for i in range(n)]
        + [f"dmin_{i + 1}" for i in range(n)]
        + [f"dmax_{i + 1}" for i in range(n)]
    )


def write_csv(states: Sequence[SystemState], path, n: int | None = None) -> None:
    if n is None:
        n = states[0].n if states else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header(n))
        for s in states:
            w.writerow(
                [s.t, repr(s.price_buy), repr(s.price_sell), repr(s.price_share)]
                + [repr(float(x)) for x in s.pv]
                + [repr(float(x)) for x in s.demand_min]
                + [repr(float(x)) for x in s.demand_max]
            )


def load_csv(path, cfg: ScenarioConfig) -> list[SystemState]:
    """Read and validate a wide-format trace for ``cfg.n_stations`` stations.

    Raises :class:`CsvSchemaError` for header or parse problems and
    :class:`BoundViolationError` for rows breaking price ordering, declared
    price bounds or demand/PV sign rules.  Row numbers count the header as 1.
    """
    n = cfg.n_stations
    expected = csv_header(n)
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: no such file")
    states = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [c.strip() for c in next(reader)]
        except StopIteration:
            raise CsvSchemaError(f"{path}: empty file") from None
        missing = [c for c in expected if c not in header]
        if missing:
            raise CsvSchemaError(f"{path}: missing columns {missing}")
        col = {name: header.index(name) for name in expected}
        for rowno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = {name: float(row[idx]) for name, idx in col.items()}
            except (ValueError, IndexError) as exc:
                raise CsvSchemaError(f"{path}: row {rowno}: {exc}") from None
            if any(not math.isfinite(v) for v in vals.values()):
                raise CsvSchemaError(f"{path}: row {rowno}: non-finite value")
            s = SystemState(
                t=int(vals["t"]),
                price_buy=vals["price_buy"],
                price_sell=vals["price_sell"],
                price_share=vals["price_share"],
                pv=[vals[f"pv_{i + 1}"] for i in range(n)],
                demand_min=[vals[f"dmin_{i + 1}"] for i in range(n)],
                demand_max=[vals[f"dmax_{i + 1}"] for i in range(n)],
            )
            bad = s.violations(cfg.price_bounds)
            if bad:
                raise BoundViolationError(f"{path}: row {rowno} (slot {s.t}): " + "; ".join(bad), row=rowno)
            states.append(s)
    return states


def load_states(cfg: ScenarioConfig, seed: int | None = None) -> list[SystemState]:
    if cfg.mode == "csv":
        states = load_csv(cfg.csv_path, cfg)
        return states[: cfg.T] if cfg.T else states
    return generate_synthetic(cfg, seed)
