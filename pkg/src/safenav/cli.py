"""``safenav`` command-line entry point.

Subcommands:
    simulate   run episodes for one scenario and write CSV logs and metrics
    evaluate   compare filtered and unfiltered runs (or several configs)
    enumerate  probabilistic enumeration of unsafe input boxes + density map
    track      closed-loop NMPC tracking of a reference schedule (boat)
    plot       emit plot-ready series from a trajectory or tracking CSV

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
The log level comes from the ``SAFE_NAV_LOG`` environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, ScenarioConfig
from .dynamics import rest_state
from .nmpc import track_episode
from .policy import NetworkFormatError, feature_ranges, load_network, position_indices
from .simulator import (aggregate, episode_world, evaluate, format_metrics, run_batch, write_trajectory_csv)
from .verification import (build_safe_set, density_map, enumerate_unsafe,
                           harvest_unsafe_pairs, load_property_file, property_file_dict, write_density_map)

log = logging.getLogger("safenav")


class UsageError(Exception):
    pass


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_config(args) -> ScenarioConfig:
    cfg = ScenarioConfig.load(args.config)
    data = cfg.to_dict()
    if getattr(args, "episodes", None) is not None:
        data["episodes"] = args.episodes
    if getattr(args, "seed", None) is not None:
        data["seeds"] = [args.seed]
    if getattr(args, "filter", None) is not None:
        data["filter"]["enabled"] = args.filter == "on"
    if getattr(args, "out", None) is not None:
        data["output"] = str(Path(args.out).resolve())
    cfg = ScenarioConfig(data, Path(args.config).parent)
    if getattr(args, "dump_effective_config", None):
        cfg.dump(args.dump_effective_config)
    return cfg


def _out_dir(cfg: ScenarioConfig) -> Path:
    out = Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    stack = cfg.stack()
    start = time.perf_counter()
    results = run_batch(cfg.world_source(), stack, int(cfg["episodes"]), cfg["seeds"],
                        cfg["world"]["overrides"], args.jobs, record=True)
    log.info("simulated %d episodes in %.2f s", len(results), time.perf_counter() - start)
    traj_dir = out / "trajectories"
    traj_dir.mkdir(exist_ok=True)
    for r in results:
        write_trajectory_csv(r, traj_dir / f"seed{r.seed[0]}_ep{r.seed[1]:04d}.csv")
    name = cfg["name"] + ("_filtered" if stack.filtered else "_unfiltered")
    metrics = aggregate(name, results)
    errors = [r.summary() for r in results if r.error]
    _dump_json(out / "metrics.json", {"metrics": {name: metrics.to_dict()}, "partial": bool(errors)})
    (out / "metrics.txt").write_text(format_metrics({name: metrics}))
    _dump_json(out / "episodes.json", [r.summary() for r in results])
    sys.stdout.write(format_metrics({name: metrics}))
    if errors:
        log.warning("%d episodes ended with a component error (counted as Timeout)", len(errors))
    return 0


def cmd_evaluate(args) -> int:
    cfgs = [ScenarioConfig.load(p) for p in args.config]
    overrides = {}
    if args.episodes is not None:
        overrides["episodes"] = args.episodes
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    if overrides:
        cfgs = [ScenarioConfig({**c.to_dict(), **overrides}, Path(p).parent) for c, p in zip(cfgs, args.config)]
    base = cfgs[0]
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
    else:
        out = _out_dir(base)
    if len(cfgs) == 1:
        stacks = {f"{base['name']}_unfiltered": base.stack(False), f"{base['name']}_filtered": base.stack(True)}
        sources = {k: base for k in stacks}
    else:
        stacks = {c["name"]: c.stack() for c in cfgs}
        sources = {c["name"]: c for c in cfgs}
        if len(stacks) != len(cfgs):
            raise UsageError("config names must be unique")
    table = {}
    for name, stack in stacks.items():
        c = sources[name]
        t, _ = evaluate(c.world_source(), {name: stack}, int(c["episodes"]), c["seeds"],
                        c["world"]["overrides"], args.jobs)
        table.update(t)
    _dump_json(out / "evaluation.json", {k: m.to_dict() for k, m in table.items()})
    (out / "evaluation.txt").write_text(format_metrics(table))
    sys.stdout.write(format_metrics(table))
    return 0


def _read_csv(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"{path}: empty CSV")
    return rows


def _harvest(cfg: ScenarioConfig, net) -> list:
    h = cfg["enumeration"]["harvest"]
    episodes = []
    for p in h["trajectories"]:
        rows = _read_csv(p)
        obs_cols = sorted((c for c in rows[0] if c.startswith("obs_")), key=lambda c: int(c[4:]))
        if not obs_cols:
            raise ConfigError(f"{p}: no obs_* columns to harvest from")
        recs = []
        for r in rows:
            if r.get(obs_cols[0], "") == "":
                continue
            recs.append({"obs": [float(r[c]) for c in obs_cols], "collision": r.get("collision") == "1"})
        episodes.append(recs)
    src = cfg.world_source()
    if isinstance(src, str):
        src = episode_world(src, cfg["seeds"][0], 0, cfg["world"]["overrides"])
    ranges = h.get("feature_ranges")
    if ranges is None:
        ranges = feature_ranges(net.input_dim, src.bounds, cfg["sensor"]["max_range"])
    return harvest_unsafe_pairs(episodes, h.get("epsilon", 0.02), np.asarray(ranges, dtype=float),
                                h.get("v_slow", 0.1))


def cmd_enumerate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg) / "enumeration"
    out.mkdir(parents=True, exist_ok=True)
    enum = cfg["enumeration"]
    net_path = enum["network"] or cfg["policy"]["weights"]
    if net_path is None:
        raise ConfigError("enumeration needs enumeration.network or policy.weights")
    net = load_network(net_path)
    pairs = [load_property_file(p) for p in enum["properties"]]
    if enum["harvest"] is not None:
        harvested = _harvest(cfg, net)
        for k, (box, prop) in enumerate(harvested):
            _dump_json(out / f"property_{k:03d}.json", property_file_dict(box, prop))
        pairs += harvested
    if not pairs:
        raise ConfigError("no properties: give enumeration.properties or enumeration.harvest")
    ecfg = cfg.enumeration_config()
    regions, summary = [], []
    for k, (box, prop) in enumerate(pairs):
        res = enumerate_unsafe(net, box, prop, ecfg)
        res.save(out / f"region_{k:03d}.json")
        regions.append((box, res))
        summary.append({"region": k, "safe_leaves": len(res.safe_leaves), "unsafe_leaves": len(res.unsafe_leaves),
                        "incomplete": res.incomplete})
        if res.incomplete:
            log.warning("region %d hit max_leaves; unresolved boxes kept as unsafe", k)
    any_incomplete = any(s["incomplete"] for s in summary)
    _dump_json(out / "summary.json", {"regions": summary, "incomplete": any_incomplete})
    if net.input_dim > 2 or enum["density"] is not None:
        pos = (0, 1) if net.input_dim == 2 else position_indices(net.input_dim)
        safe = build_safe_set(regions, pos, allow_incomplete=bool(enum["allow_incomplete"]))
        safe.save(out / "safe_set.json")
        dens = enum["density"]
        if dens is not None:
            grid = density_map(safe, dens["bounds"], dens["resolution"])
            write_density_map(out / "density.txt", grid, dens["bounds"], dens["resolution"])
    sys.stdout.write(f"{len(pairs)} region(s) enumerated; incomplete={str(any_incomplete).lower()}\n")
    return 0


def cmd_track(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    ncfg = cfg.nmpc_config()
    if ncfg is None:
        raise ConfigError("track needs an nmpc block")
    params = cfg.boat_params()
    tr = cfg["tracking"]
    schedule = [tuple(float(v) for v in row) for row in tr["schedule"]]
    drift = tr.get("drift")
    drift = None if drift is None or not any(drift) else np.asarray(drift, dtype=float)
    x0 = rest_state(params)
    x0[0] = schedule[0][1]
    logres = track_episode(x0, schedule, ncfg, params, float(tr["duration"]), drift)
    path = out / "tracking.csv"
    with open(path, "w", newline="") as fh:
        cols = ["t", "v1", "w3", "v_ref", "w_ref", "u_l", "u_r", "cost", "iterations"]
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in logres.rows():
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()})
    _dump_json(out / "tracking_summary.json", {"monotone": logres.monotone, "error": logres.error,
                                               "steps": int(len(logres.t))})
    log.info("real-time factor %.2f", logres.real_time_factor)
    sys.stdout.write(f"wrote {path}; monotone={str(logres.monotone).lower()}\n")
    return 0 if logres.error is None else 1


def _floats(rows, col):
    return [float(r[col]) if r.get(col, "") != "" else math.nan for r in rows]


def plot_series(rows: list[dict], kind: str) -> tuple[list[str], list[list[float]]]:
    """Column names and aligned series for one plot kind."""
    cols = set(rows[0])
    if kind == "tracking":
        if {"v_ref", "w_ref", "v1", "w3"} <= cols:
            names = ["t", "v_ref", "v1", "w_ref", "w3"]
            return names, [_floats(rows, c) for c in names]
        if {"r_v", "r_w"} <= cols:
            boat = "x11" in cols
            actual = ("x0", "x5") if boat else ("r_v", "r_w")
            body = [r for r in rows if r.get("r_v", "") != ""]
            return (["t", "v_ref", "v1", "w_ref", "w3"],
                    [_floats(body, "t"), _floats(body, "r_v"), _floats(body, actual[0]),
                     _floats(body, "r_w"), _floats(body, actual[1])])
        raise ConfigError("CSV lacks reference/actual columns for a tracking plot")
    if kind == "trajectory":
        px, py = ("x6", "x7") if "x11" in cols else ("x0", "x1")
        if not {px, py} <= cols:
            raise ConfigError("CSV lacks position columns")
        names = ["x", "y", "filter_active", "fallback", "collision"]
        ev = [[float(r.get(c) or 0) for r in rows] for c in names[2:]]
        return names, [_floats(rows, px), _floats(rows, py)] + ev
    if kind == "h_profile":
        if not {"t", "h", "d_safe"} <= cols:
            raise ConfigError("CSV lacks h/d_safe columns")
        body = [r for r in rows if r.get("h", "") != ""]
        return ["t", "h", "d_safe"], [_floats(body, "t"), _floats(body, "h"), _floats(body, "d_safe")]
    raise UsageError(f"unknown plot kind {kind!r}")


def cmd_plot(args) -> int:
    try:
        rows = _read_csv(args.csv)
    except csv.Error as exc:
        raise ConfigError(f"{args.csv}: malformed CSV ({exc})") from None
    if "t" not in rows[0] and args.kind != "trajectory":
        raise ConfigError(f"{args.csv}: malformed CSV (no t column)")
    try:
        names, series = plot_series(rows, args.kind)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{args.csv}: malformed CSV ({exc})") from None
    out = Path(args.out) if args.out else Path(args.csv).with_suffix(f".{args.kind}.dat")
    with open(out, "w") as fh:
        fh.write("# " + " ".join(names) + "\n")
        for vals in zip(*series):
            fh.write(" ".join(repr(v) for v in vals) + "\n")
    sys.stdout.write(f"wrote {out}\n")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="safenav", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, episodes=True):
        sp.add_argument("--config", required=True, help="scenario JSON file")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--dump-effective-config", metavar="PATH",
                        help="write the fully resolved configuration to PATH")
        if episodes:
            sp.add_argument("--episodes", type=int)
            sp.add_argument("--seed", type=int)
            sp.add_argument("--filter", choices=("on", "off"))
            sp.add_argument("--jobs", type=int, default=None, help="parallel workers (default: all cores)")

    common(sub.add_parser("simulate", help="run episodes and write logs + metrics"))
    ev = sub.add_parser("evaluate", help="metrics table across configs")
    ev.add_argument("--config", required=True, action="append", help="scenario JSON (repeatable)")
    ev.add_argument("--out")
    ev.add_argument("--episodes", type=int)
    ev.add_argument("--seed", type=int)
    ev.add_argument("--jobs", type=int, default=None)
    en = sub.add_parser("enumerate", help="unsafe-box enumeration and density map")
    common(en, episodes=False)
    en.add_argument("--jobs", type=int, default=None, help="accepted for symmetry; enumeration runs serially")
    common(sub.add_parser("track", help="NMPC reference tracking run"), episodes=False)
    pl = sub.add_parser("plot", help="emit plot-data series from a CSV")
    pl.add_argument("csv")
    pl.add_argument("--kind", choices=("tracking", "trajectory", "h_profile"), required=True)
    pl.add_argument("--out")
    return p


COMMANDS = {"simulate": cmd_simulate, "evaluate": cmd_evaluate, "enumerate": cmd_enumerate,
            "track": cmd_track, "plot": cmd_plot}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SAFE_NAV_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 2
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, NetworkFormatError, FileNotFoundError) as exc:
        print(f"safenav: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("unhandled error", exc_info=True)
        print(f"safenav: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
