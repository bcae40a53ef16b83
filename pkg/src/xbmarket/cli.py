"""Command-line entry point.

Exit codes: 0 success, 1 model/numerical error, 2 invalid configuration or
parameters, 3 I/O failure. The default output directory is taken from
XBMARKET_OUT (falls back to the working directory).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import MarketState, load_config, params_from_dict, reinit_from_dict
from .errors import ConfigInvalid, IoError, XBError

log = logging.getLogger("xbmarket")

OUT_ENV = "XBMARKET_OUT"


@dataclass
class RunConfig:
    command: str
    config_path: Optional[str]
    output_dir: Path
    master_seed: int
    worker_count: int = 1
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.worker_count < 1:
            raise ConfigInvalid(f"--workers must be >= 1, got {self.worker_count}")


def fmt(x: float) -> str:
    return f"{x:.9g}"


def _floats(s: str, n: Optional[int] = None) -> tuple:
    try:
        v = tuple(float(t) for t in s.split(","))
    except ValueError:
        raise ConfigInvalid(f"expected comma-separated numbers, got {s!r}") from None
    if n is not None and len(v) != n:
        raise ConfigInvalid(f"expected {n} numbers, got {s!r}")
    return v


def _matrix(s: str) -> np.ndarray:
    """'I', '0.5I', 'a,b,c,d' (row-major) or 'a,b;c,d'."""
    s = s.replace(" ", "")
    if s.endswith("I"):
        k = s[:-1].rstrip("*")
        return (float(k) if k else 1.0) * np.eye(2)
    v = _floats(s.replace(";", ","), 4)
    return np.array(v).reshape(2, 2)


def _parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigInvalid(f"override must be key=value, got {item!r}")
    k, v = item.split("=", 1)
    try:
        return k, json.loads(v)
    except json.JSONDecodeError:
        return k, v


def _config(rc: RunConfig) -> dict:
    d = load_config(rc.config_path) if rc.config_path else {}
    d = {**d, **rc.overrides}
    params_from_dict(d)
    return d


def _out(rc: RunConfig, name: str) -> Path:
    try:
        rc.output_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"cannot create output directory {rc.output_dir}: {e}") from None
    if not os.access(rc.output_dir, os.W_OK):
        raise IoError(f"output directory not writable: {rc.output_dir}")
    return rc.output_dir / name


def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([fmt(x) if isinstance(x, float) else x for x in r])
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from None


def _initial(d: dict, rng_init) -> MarketState:
    """Start state from the config; queues drawn from the reinit law unless given."""
    ini = d.get("initial", {})
    q = ini["Q"] if "Q" in ini else reinit_from_dict(d).draw(rng_init, 1)[0]
    return MarketState.make(q, ini.get("B", (0, 0)), ini.get("C", 0))


# ---------------------------------------------------------------- commands


def cmd_simulate_micro(a, rc: RunConfig) -> str:
    from .experiments import _rngs
    from .flow import generate_stream
    from .micro import ReinitDraws, run_active, run_inactive, run_regime_switching

    d = _config(rc)
    p = params_from_dict(d)
    g_stream, g_reinit, g_init = _rngs(rc.master_seed, 0)
    s0 = _initial(d, g_init)
    st = generate_stream(g_stream, p)
    draws = ReinitDraws(reinit_from_dict(d), g_reinit)
    if a.regime == "active":
        tr = run_active(s0, st, draws)
    elif a.regime == "inactive":
        tr = run_inactive(s0, st, draws)
    else:
        tr = run_regime_switching(s0, st, draws, p, add_order_at_handoff=d.get("handoff", "add") == "add")
    try:
        tr.to_csv(_out(rc, "trajectory.csv"), tick=p.tick_delta, dv=p.dv)
        tr.events_csv(_out(rc, "events.csv"))
        if a.orders:
            st.to_csv(_out(rc, "orders.csv"))
    except OSError as e:
        raise IoError(str(e)) from None
    return (f"simulate-micro regime={a.regime} events={len(st)} price_changes={tr.n_price_changes} "
            f"switches={len(tr.sigma_steps)} out={rc.output_dir}")


def cmd_simulate_limit(a, rc: RunConfig) -> str:
    from .core import derive_event_moments
    from .experiments import _rngs
    from .limit import BmSpec, simulate_active_limit, simulate_inactive_limit, simulate_regime_switching_limit

    d = _config(rc)
    p = params_from_dict(d)
    g_init = _rngs(rc.master_seed, 0)[2]
    s0 = _initial(d, g_init)
    dv = p.dv
    grid = a.grid_dt or p.dt
    spec = BmSpec.from_moments(s0.Q * dv, derive_event_moments(p), grid_dt=grid)
    seed = np.random.SeedSequence(rc.master_seed)
    r = reinit_from_dict(d)
    T = p.horizon_T
    if a.regime == "active":
        tr = simulate_active_limit(s0, seed, spec, r, T, dv)
    elif a.regime == "inactive":
        tr = simulate_inactive_limit(s0, seed, spec, r, T, dv)
    else:
        si = BmSpec.from_moments(s0.Q * dv, derive_event_moments(p, inactive=True), grid_dt=grid)
        s0.C = s0.C * dv
        tr = simulate_regime_switching_limit(s0, seed, spec, r, p.kappa_minus, p.kappa_plus, T, dv, si)
    try:
        tr.to_csv(_out(rc, "trajectory.csv"), tick=p.tick_delta)
        tr.events_csv(_out(rc, "events.csv"))
    except OSError as e:
        raise IoError(str(e)) from None
    return f"simulate-limit regime={a.regime} price_changes={tr.n_price_changes} out={rc.output_dir}"


def cmd_analytics(a, rc: RunConfig) -> str:
    from . import analytics as an

    what = a.what
    if what == "survival":
        x, mu, sig = _floats(a.x, 2), _floats(a.mu, 2), _matrix(a.sigma)
        ts = _floats(a.t)
        vals = [an.survival_probability(x, mu, sig, t) for t in ts]
        rows = [(t, v) for t, v in zip(ts, vals)]
        if a.csv:
            _write_rows(_out(rc, "survival.csv"), ["t", "survival"], rows)
        return " ".join(fmt(v) for v in vals)
    if what == "upward":
        x, mu, sig = _floats(a.x, 2), _floats(a.mu, 2), _matrix(a.sigma)
        est = an.upward_probability(x, mu, sig, an.McControl(n_paths=a.paths, seed=rc.master_seed))
        return fmt(est.value) if est.se == 0 else f"{fmt(est.value)} se={fmt(est.se)} method={est.method}"
    if what == "exit-density":
        x, sig = _floats(a.x, 2), _matrix(a.sigma)
        z = np.array(_floats(a.z))
        dens = an.exit_location_density(x, sig, z)
        if a.csv:
            _write_rows(_out(rc, "exit_density.csv"), ["z", "density"], zip(map(float, z), map(float, dens)))
        return " ".join(fmt(v) for v in dens)
    if what == "range":
        x, mu, sig = _floats(a.x, 2), _floats(a.mu, 2), _matrix(a.sigma)
        dist = (np.array([x]), np.array([1.0]))
        v = an.range_distribution(dist, mu, sig, a.t_end, a.n)
        return fmt(v)
    if what == "interface-pde":
        ip = an.InterfaceParams.from_flows(*_floats(a.flows, 5))
        pts = [_floats(s, 2) for s in a.points.split(";")]
        ts = _floats(a.t)
        ctl = an.PdeControl(h=a.h, dt=a.dt)
        S = an.interface_survival_grid(pts, ip, ts, ctl)
        rows = [(t, pt[0], pt[1], float(S[i, j])) for i, t in enumerate(ts) for j, pt in enumerate(pts)]
        if a.csv:
            _write_rows(_out(rc, "interface_survival.csv"), ["t", "xF", "xG", "survival"], rows)
        return " ".join(fmt(r[3]) for r in rows)
    raise ConfigInvalid(f"unknown analytics query {what!r}")


def cmd_experiment(a, rc: RunConfig) -> str:
    from . import experiments as ex

    if a.what == "tables":
        d = _config(rc)
        scen = d.get("scenarios") or ex.TABLE_SCENARIOS
        scen = {k: tuple(v) for k, v in scen.items()}
        m = int(a.m or d.get("replications", 1000))
        tab = ex.run_price_change_table(scen, n=int(d.get("n", 10_000)), m=m, seed=rc.master_seed,
                                        reinit=reinit_from_dict(d), workers=rc.worker_count)
        path = _out(rc, "table.csv")
        try:
            tab.to_csv(path)
        except OSError as e:
            raise IoError(str(e)) from None
        return f"tables scenarios={','.join(scen)} m={m} out={path}"
    if a.what == "scenario":
        if rc.config_path:
            d = _config(rc)
            p = params_from_dict(d)
            name = d.get("description", Path(rc.config_path).stem)
        else:
            name = a.name
            p = ex.scenario_params(name)
            d = {}
        m = int(a.m or d.get("replications", 1000))
        spec = ex.ScenarioSpec(name, p, m, rc.master_seed, a.engine, reinit_from_dict(d))
        res = ex.run_scenario(spec, workers=rc.worker_count)
        try:
            res.summary.to_csv(_out(rc, "summary.csv"))
            res.trajectory.to_csv(_out(rc, "trajectory.csv"), tick=p.tick_delta,
                                  dv=p.dv if a.engine == "micro" else 1.0)
            res.trajectory.events_csv(_out(rc, "events.csv"))
        except OSError as e:
            raise IoError(str(e)) from None
        s = res.summary
        return (f"scenario {name} m={m} switch_frequency={fmt(s.switch_frequency)} "
                f"mean_terminal_C={fmt(s.mean_terminal_C)}")
    if a.what == "cross-validate":
        b = ex.Budget(n_paths=a.paths, dt=a.dt, seed=rc.master_seed)
        x, sig = _floats(a.x, 2), _matrix(a.sigma)
        if a.kind == "survival":
            q = ex.SurvivalQuery(x, _floats(a.mu, 2), tuple(map(tuple, sig)), a.t_end)
        elif a.kind == "upward":
            q = ex.UpwardQuery(x, tuple(map(tuple, sig)))
        else:
            q = ex.RangeQuery(x, tuple(map(tuple, sig)), a.t_end, a.n, _floats(a.mu, 2))
        cc = ex.mc_cross_validate(q, b)
        _write_rows(_out(rc, "cross_validate.csv"), ["kind", "analytic", "mc", "se", "z"],
                    [(a.kind, cc.analytic, cc.mc, cc.se, cc.z)])
        return (f"{a.kind} analytic={fmt(cc.analytic)} mc={fmt(cc.mc)} se={fmt(cc.se)} "
                f"z={fmt(cc.z)} {'agree' if cc.agrees else 'DISAGREE'}")
    raise ConfigInvalid(f"unknown experiment {a.what!r}")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, default=0, help="master seed")
    common.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or .)")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a configuration key (value parsed as JSON)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    ap = argparse.ArgumentParser(prog="xbmarket", description="Coupled cross-border order book toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    for name, fn in (("simulate-micro", cmd_simulate_micro), ("simulate-limit", cmd_simulate_limit)):
        sp = sub.add_parser(name, parents=[common])
        sp.add_argument("--regime", choices=("active", "inactive", "switching"), default="switching")
        if name == "simulate-micro":
            sp.add_argument("--orders", action="store_true", help="also write the order stream")
        else:
            sp.add_argument("--grid-dt", type=float, default=None)
        sp.set_defaults(fn=fn)

    sa = sub.add_parser("analytics", parents=[common])
    sa.add_argument("what", choices=("survival", "upward", "exit-density", "range", "interface-pde"))
    sa.add_argument("--x", default="1,1")
    sa.add_argument("--mu", default="0,0")
    sa.add_argument("--sigma", default="I")
    sa.add_argument("--t", default="1", help="time or comma-separated times")
    sa.add_argument("--t-end", type=float, default=1.0, help="horizon for range")
    sa.add_argument("--n", type=int, default=1, help="range bound in ticks")
    sa.add_argument("--z", default="0.5,1,2", help="exit locations")
    sa.add_argument("--paths", type=int, default=20_000)
    sa.add_argument("--flows", default="0.25,0.25,0,-2,-2", help="var_F,var_G,cov_FG,mu_F,mu_G")
    sa.add_argument("--points", default="1,1", help="xF,xG;xF,xG;...")
    sa.add_argument("--h", type=float, default=0.05)
    sa.add_argument("--dt", type=float, default=0.01)
    sa.add_argument("--csv", action="store_true", help="also write a CSV")
    sa.set_defaults(fn=cmd_analytics)

    se = sub.add_parser("experiment", parents=[common])
    se.add_argument("what", choices=("tables", "scenario", "cross-validate"))
    se.add_argument("--m", type=int, default=None, help="replications")
    se.add_argument("--name", default="balanced", help="built-in scenario when no config is given")
    se.add_argument("--engine", choices=("micro", "limit"), default="micro")
    se.add_argument("--kind", choices=("survival", "upward", "range"), default="survival")
    se.add_argument("--x", default="1,1")
    se.add_argument("--mu", default="0,0")
    se.add_argument("--sigma", default="I")
    se.add_argument("--t-end", type=float, default=1.0)
    se.add_argument("--n", type=int, default=1)
    se.add_argument("--paths", type=int, default=20_000)
    se.add_argument("--dt", type=float, default=1e-4)
    se.set_defaults(fn=cmd_experiment)
    return ap


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    a = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(a.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = RunConfig(a.command, a.config, Path(a.out or os.environ.get(OUT_ENV, ".")), a.seed, a.workers,
                       dict(_parse_override(s) for s in a.set))
        msg = a.fn(a, rc)
    except XBError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    print(msg)
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
