"""Command line entry point: ``evshare run|compare|sweep-v|sweep-scale``.

Exit codes: 0 success, 1 configuration error, 2 invariant violation.
The output directory defaults to ``--out``, then ``$EVSHARE_OUT``, then
``./out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import yaml

from .admm import AdmmConfig
from .baselines import BaselineConfig
from .errors import ConfigError, ControllerError, EvShareError, InvariantViolation
from .harness import CONTROLLERS, SimConfig, compare, simulate, sweep_scale, sweep_v
from .queues import compute_v_max
from .scenario import ScenarioConfig, default_config, symmetric_config

log = logging.getLogger("evshare")

PRESETS = {"default": default_config, "symmetric": symmetric_config}


def _pick(cls, raw: dict, section: str):
    raw = dict(raw or {})
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def load_config(path) -> tuple[ScenarioConfig, SimConfig]:
    """Read a YAML run file.

    Top-level sections: ``scenario`` (either full ScenarioConfig fields or
    ``preset: default|symmetric`` plus overrides), ``admm``, ``baseline``
    and ``lyapunov`` (``v``, ``v_fraction``, ``w``, ``soc0``).
    """
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(data) - {"scenario", "admm", "baseline", "lyapunov"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    raw = dict(data.get("scenario") or {"preset": "default"})
    preset = raw.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        try:
            if preset == "symmetric":
                scn = symmetric_config(int(raw.pop("n_stations", 3)), **raw)
            else:
                scn = default_config(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
    else:
        scn = ScenarioConfig.from_dict(raw)

    lyap = dict(data.get("lyapunov") or {})
    unknown = set(lyap) - {"v", "v_fraction", "w", "soc0"}
    if unknown:
        raise ConfigError(f"unknown keys in lyapunov: {sorted(unknown)}")
    v = lyap.get("v")
    if "v_fraction" in lyap:
        v = float(lyap["v_fraction"]) * compute_v_max(scn.stations, scn.price_bounds)
    soc0 = tuple(lyap["soc0"]) if lyap.get("soc0") is not None else None
    sim = SimConfig(
        admm=_pick(AdmmConfig, data.get("admm"), "admm"),
        baseline=_pick(BaselineConfig, data.get("baseline"), "baseline"),
        v=v,
        w=lyap.get("w"),
        soc0=soc0,
    )
    return scn, sim


def _out_dir(arg: str | None) -> Path:
    return Path(arg or os.environ.get("EVSHARE_OUT") or "out")


def _scenario(args) -> tuple[ScenarioConfig, SimConfig]:
    if args.config:
        scn, sim = load_config(args.config)
    else:
        scn, sim = default_config(), SimConfig()
    if getattr(args, "T", None) is not None:
        scn = ScenarioConfig.from_dict({**scn.to_dict(), "T": args.T})
    return scn, sim


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_run(args) -> int:
    scn, sim = _scenario(args)
    controller = {c.lower(): c for c in CONTROLLERS}.get(args.controller.lower())
    if controller is None:
        raise ConfigError(f"unknown controller {args.controller!r}")
    rep = simulate(scn, controller, sim, seed=args.seed)
    out = rep.write(_out_dir(args.out) / controller)
    print(f"{controller}: total cost {rep.total_cost:.4f} -> {out}")
    return 0


def cmd_compare(args) -> int:
    scn, sim = _scenario(args)
    lookup = {c.lower(): c for c in CONTROLLERS}
    names = []
    for c in args.controllers.split(","):
        if c.strip().lower() not in lookup:
            raise ConfigError(f"unknown controller {c!r}")
        names.append(lookup[c.strip().lower()])
    reports = compare(scn, names, sim, seed=args.seed)
    out = _out_dir(args.out)
    table = {}
    for name, rep in reports.items():
        rep.write(out / name)
        table[name] = {"total_cost": rep.total_cost, "average_shed": rep.average_shed().tolist(), **rep.admm_stats()}
        print(f"{name:>8}: {rep.total_cost:12.4f}")
    _write_json(out / "compare.json", table)
    return 0


def cmd_sweep_v(args) -> int:
    scn, sim = _scenario(args)
    try:
        fractions = [float(x) for x in args.fractions.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad --fractions: {exc}") from exc
    rows = sweep_v(scn, fractions, sim, seed=args.seed)
    for r in rows:
        print(f"v={r['v']:10.4f} cost={r['total_cost']:12.4f} shed={r['mean_shed']:.4f}")
    _write_json(_out_dir(args.out) / "sweep_v.json", rows)
    return 0


def cmd_sweep_scale(args) -> int:
    _, sim = _scenario(args)
    try:
        counts = [int(x) for x in args.counts.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad --counts: {exc}") from exc
    rows = sweep_scale(counts, T=args.T or 48, seed=args.seed or 0, cfg=sim)
    for r in rows:
        print(
            f"n={r['stations']:3d} truncated {r['truncated_time']:.2f}s/{r['truncated_cost']:.3f}"
            f" untruncated {r['untruncated_time']:.2f}s/{r['untruncated_cost']:.3f}"
        )
    _write_json(_out_dir(args.out) / "sweep_scale.json", rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="evshare", description="Online energy sharing between charging stations")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--out", help="output directory (or $EVSHARE_OUT)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--T", type=int, default=None, help="override the horizon")

    p = sub.add_parser("run", help="simulate one controller")
    common(p)
    p.add_argument("--controller", default="proposed")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="simulate several controllers on one trace")
    common(p)
    p.add_argument("--controllers", default="b1,b2,b3,b4,proposed")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep-v", help="cost and shedding against v")
    common(p)
    p.add_argument("--fractions", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")
    p.set_defaults(func=cmd_sweep_v)

    p = sub.add_parser("sweep-scale", help="truncated vs untruncated ADMM by station count")
    common(p)
    p.add_argument("--counts", default="3,10,25")
    p.set_defaults(func=cmd_sweep_scale)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 2
    except ControllerError as exc:
        if isinstance(exc.__cause__, InvariantViolation):
            print(f"invariant violation: {exc}", file=sys.stderr)
            return 2
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, EvShareError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
