"""Command-line entry point: ``mpep <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .artifacts import MissingArtifactError
from .pipeline import Pipeline, StageError, export_plot_data

log = logging.getLogger("mpep")


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def _range(text: str) -> tuple[float, float, int]:
    try:
        lo, hi, n = text.split(":")
        return float(lo), float(hi), int(n)
    except ValueError:
        raise argparse.ArgumentTypeError("expected lo:hi:n") from None


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; SUPPRESS keeps
    # the subparser from overwriting values given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="YAML pipeline configuration")
    common.add_argument("--out", help="output directory (artifacts and CSV exports)")
    common.add_argument("--jobs", type=int, help="worker cap for parallel stages")
    common.add_argument("--seed", type=int, help="base seed for the Monte-Carlo stage")
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--force", action="store_true", help="ignore cached artifacts")
    common.add_argument("--format", choices=["csv", "json"],
                        help="export format for plot tables")

    p = argparse.ArgumentParser(prog="mpep", description="Most probable escape paths through "
                                "an unstable limit cycle.", parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("manifold", parents=[common], help="cycle, W^u(O) and W^s(Gamma) mesh")
    m.add_argument("--order", type=int)
    m.add_argument("--theta-samples", type=int)
    m.add_argument("--nu", type=float)
    m.add_argument("--tf", type=float)

    h = sub.add_parser("heteroclinics", parents=[common], help="connections O -> Gamma")
    h.add_argument("--in", dest="inp", help="directory holding the manifold artifacts")
    h.add_argument("--threshold", type=float)

    ms = sub.add_parser("maslov", parents=[common], help="conjugate points and indices")
    g = ms.add_mutually_exclusive_group()
    g.add_argument("--theta-list", type=_floats)
    g.add_argument("--theta-range", type=_range)

    r = sub.add_parser("river", parents=[common], help="River, pivot and mouth")
    r.add_argument("--samples", type=int)
    r.add_argument("--refine-ratio", type=float)
    r.add_argument("--max-time", type=float)
    r.add_argument("--collar", type=float, help="collar width inside the cycle")

    a = sub.add_parser("action", parents=[common], help="FW/OM profiles and minimizers")
    a.add_argument("--epsilon", type=float, action="append")
    a.add_argument("--epsilon-scan", type=_range)
    a.add_argument("--r0", type=float)
    a.add_argument("--border-distance", type=float)

    mc = sub.add_parser("montecarlo", parents=[common], help="Euler-Maruyama exit statistics")
    mc.add_argument("--sqrt-eps", type=float)
    mc.add_argument("--eta", type=float)
    mc.add_argument("--n", type=int)
    mc.add_argument("--dt", type=float)
    mc.add_argument("--tmax", type=float)
    mc.add_argument("--keep-paths", choices=["none", "escaped", "all"])
    mc.add_argument("--no-convergence", action="store_true")

    sub.add_parser("compare", parents=[common], help="OM point, pivot and exit histogram")
    pl = sub.add_parser("pipeline", parents=[common], help="all stages")
    pl.add_argument("--no-montecarlo", action="store_true")
    return p


def _set(cfg: dict, section: str, key: str, value):
    if value is not None:
        cfg.setdefault(section, {})[key] = value


def overrides(args) -> dict:
    o: dict = {}
    if args.out:
        o["output"] = args.out
    if args.jobs:
        o["jobs"] = args.jobs
    if args.seed is not None:
        o["seed"] = args.seed
    cmd = args.command
    if cmd == "manifold":
        for k in ("order", "theta_samples", "nu", "tf"):
            _set(o, "manifold", k, getattr(args, k))
    elif cmd == "heteroclinics":
        _set(o, "heteroclinics", "threshold", args.threshold)
        if args.inp and not args.out:
            o["output"] = args.inp
    elif cmd == "maslov":
        if args.theta_list:
            o["maslov"] = {"thetas": args.theta_list}
        elif args.theta_range:
            lo, hi, n = args.theta_range
            o["maslov"] = {"thetas": np.linspace(lo, hi, n).tolist()}
    elif cmd == "river":
        _set(o, "river", "samples", args.samples)
        _set(o, "river", "refine_ratio", args.refine_ratio)
        _set(o, "river", "max_time", args.max_time)
        _set(o, "river", "collar", args.collar)
    elif cmd == "action":
        _set(o, "action", "epsilon", args.epsilon)
        if args.epsilon_scan:
            lo, hi, n = args.epsilon_scan
            o.setdefault("action", {})["epsilon_scan"] = {"lo": lo, "hi": hi, "n": n}
        _set(o, "action", "r0", args.r0)
        _set(o, "action", "border_distance", args.border_distance)
    elif cmd == "montecarlo":
        if args.eta is not None:
            o["drift"] = {"name": "ivdp", "params": {"eta": args.eta}}
        for k, v in (("sqrt_eps", args.sqrt_eps), ("n", args.n), ("dt", args.dt),
                     ("tmax", args.tmax), ("keep_paths", args.keep_paths)):
            _set(o, "montecarlo", k, v)
        if args.no_convergence:
            _set(o, "montecarlo", "convergence", False)
    elif cmd == "pipeline" and args.no_montecarlo:
        o["montecarlo"] = None
    return o


def _merge(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


# subcommand -> stages whose tables are exported
EXPORTS = {
    "manifold": ["orbit", "manifold"],
    "heteroclinics": ["heteroclinics"],
    "maslov": ["maslov"],
    "river": ["river", "pivot"],
    "action": ["action"],
    "montecarlo": ["montecarlo"],
    "compare": ["compare"],
    "pipeline": ["orbit", "manifold", "heteroclinics", "maslov", "river", "pivot", "action",
                 "montecarlo", "compare"],
}
TARGET = {"manifold": "manifold", "heteroclinics": "heteroclinics", "maslov": "maslov",
          "river": "pivot", "action": "action", "montecarlo": "montecarlo",
          "compare": "compare", "pipeline": None}


GLOBAL_DEFAULTS = {"config": None, "out": None, "jobs": None, "seed": None,
                   "log_level": "WARNING", "force": False, "format": "csv"}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for k, v in GLOBAL_DEFAULTS.items():
        if not hasattr(args, k):
            setattr(args, k, v)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        base = cfgmod.load(args.config) if args.config else cfgmod.build()
        cfg = cfgmod.build(_merge(base, overrides(args)))
    except (cfgmod.ConfigError, OSError) as exc:
        print(f"mpep: [config] {exc}", file=sys.stderr)
        return 2
    pipe = Pipeline(cfg, force=args.force)
    try:
        if args.command == "montecarlo" and cfg["montecarlo"] is None:
            raise StageError("montecarlo", RuntimeError("montecarlo section is null"))
        rep = pipe.run(TARGET[args.command])
        files = []
        for st in EXPORTS[args.command]:
            if pipe.active(st):
                files += export_plot_data(pipe.root, st, args.format)
    except StageError as exc:
        print(f"mpep: {exc}", file=sys.stderr)
        return 1
    except MissingArtifactError as exc:
        print(f"mpep: [{exc.stage}] {exc}", file=sys.stderr)
        return 1
    (Path(pipe.root) / "config.yaml").write_text(cfgmod.dump(cfg))
    json.dump(rep, sys.stdout, indent=1)
    sys.stdout.write("\n")
    log.info("wrote %d export files under %s", len(files), pipe.root)
    return 0


if __name__ == "__main__":
    sys.exit(main())
