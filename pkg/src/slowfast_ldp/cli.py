"""Command-line entry point ``slowfast``.

Exit codes: 0 ok, 2 configuration error, 3 numerical failure.
"""
import argparse
import json
import os
import sys

import numpy as np

from .action import DiscretePath, Terminal, evaluate_action, minimize_action
from .config import load_config, parse_config, validate
from .errors import ConfigError, SlowFastError
from .model import ScalePoint, default_dt
from .occupation import OccupationMeasure, build_occupation, check_viability
from .simulate import Control, fast_rate, simulate_paths
from .suite import (EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, SUITE_RUNNERS, SuiteContext,
                    occupation_diagnostics, run_suite)


def _config(args):
    """Load ``--config`` (or defaults) and apply command-line overrides."""
    if args.config:
        cfg = load_config(args.config)
    else:
        if args.seed is None:
            raise ConfigError("either --config or --seed is required")
        cfg = parse_config({"run": {"seed": args.seed}})
    if args.seed is not None:
        cfg["run"]["seed"] = args.seed
    if args.threads is not None:
        cfg["run"]["threads"] = args.threads
    if args.out is not None:
        cfg["output"]["dir"] = args.out
    validate(cfg)
    return cfg


def _out_dir(cfg):
    out = cfg["output"]["dir"]
    os.makedirs(out, exist_ok=True)
    return out


def _emit(obj):
    json.dump(obj, sys.stdout, indent=2, sort_keys=True,
              default=lambda v: v.tolist() if isinstance(v, np.ndarray) else float(v))
    sys.stdout.write("\n")


def _scale(delta):
    return ScalePoint(delta=delta, epsilon=delta * delta, Delta=delta ** 0.5)


# ---------------------------------------------------------------- commands

def cmd_simulate(args):
    cfg = _config(args)
    ctx = SuiteContext(cfg, _out_dir(cfg))
    scale = _scale(args.delta if args.delta is not None else ctx.ladder[-1].delta)
    traj = simulate_paths(ctx.model, scale, args.N or cfg["run"]["N"], ctx.T, dt=ctx.dt,
                          seed=ctx.seed, keep=args.keep)
    path = os.path.join(ctx.out, "trajectory.csv")
    traj.to_csv(path)
    _emit({"file": path, "delta": scale.delta, "dt": traj.dt, "steps": traj.steps,
           "mean_X_T": traj.X_T.mean(axis=0), "aborted": int(traj.aborted.sum())})


def cmd_invariant(args):
    cfg = _config(args)
    if args.K is not None:
        cfg["bank"]["K"] = args.K
    ctx = SuiteContext(cfg, _out_dir(cfg))
    bank = ctx.bank
    bank.save(ctx.out)
    _emit({"dir": ctx.out, "K": bank.K, "kappa_hat": bank.kappa_hat,
           "mean": bank.features.mean, "variance": np.var(bank.samples, axis=0)})


def cmd_action(args):
    cfg = _config(args)
    ctx = SuiteContext(cfg, _out_dir(cfg))
    if args.action_cmd == "eval":
        path = DiscretePath.from_csv(args.path) if args.path else ctx.xbar
        _emit(evaluate_action(path, ctx.model, ctx.bank).to_dict())
        return
    if args.target is not None:
        terminal = Terminal.point(np.atleast_1d(args.target))
    elif args.at_least is not None:
        terminal = Terminal.halfspace(args.at_least)
    else:
        terminal = ctx.event().terminal()
    path, result = minimize_action(ctx.model, ctx.bank, terminal,
                                   K_nodes=cfg["action"]["K_nodes"],
                                   max_iter=cfg["action"]["max_iter"], T=ctx.T)
    file = os.path.join(ctx.out, "action_path.csv")
    path.to_csv(file)
    _emit({"file": file, **result.to_dict()})


def cmd_occupation(args):
    cfg = _config(args)
    ctx = SuiteContext(cfg, _out_dir(cfg))
    o = cfg["occupation"]
    if args.occ_cmd == "build":
        scale = _scale(args.delta if args.delta is not None else ctx.ladder[-1].delta)
        A = o["atoms_per_window"]
        step = ctx.dt if ctx.dt is not None else default_dt(scale, fast_rate(ctx.model))
        thin = max(1, int(scale.Delta / A / step))
        traj = simulate_paths(ctx.model, scale, cfg["run"]["N"], ctx.T + scale.Delta, dt=step,
                              seed=ctx.seed, keep="thinned", thin_every=thin)
        P = build_occupation(traj, Control.zero(ctx.model.d1 + ctx.model.d2), scale,
                             atoms_per_window=A, windows=o["windows"], T=ctx.T)
        file = os.path.join(ctx.out, "occupation.csv")
        P.to_csv(file)
        _emit({"file": file, "atoms": P.count, "delta": scale.delta})
        return
    if args.occupation:
        d = ctx.model.d1 + ctx.model.d2
        P = OccupationMeasure.from_csv(args.occupation, d, Delta=0.0, T=ctx.T,
                                       windows=o["windows"])
        phi = DiscretePath.from_csv(args.path) if args.path else ctx.xbar
        _emit(check_viability(phi, P, ctx.model, ctx.bank, seed=ctx.seed).to_dict())
        return
    _emit(occupation_diagnostics(ctx.model, ctx.ladder, ctx.bank, cfg["run"]["N"], ctx.T,
                                 windows=o["windows"], atoms_per_window=o["atoms_per_window"],
                                 seed=ctx.seed, dt=ctx.dt))


def cmd_ldp(args):
    cfg = _config(args)
    if args.estimator:
        cfg["ldp"]["estimator"] = args.estimator
    ctx = SuiteContext(cfg, _out_dir(cfg))
    SUITE_RUNNERS["ldp"](ctx)
    with open(os.path.join(ctx.out, "ldp.json")) as fh:
        sys.stdout.write(fh.read())


def cmd_suite(args):
    cfg = _config(args)
    code, out = run_suite(cfg)
    print(os.path.join(out, "manifest.json"))
    return code


def cmd_validate(args):
    warnings = validate(load_config(args.path))
    for w in warnings:
        print(f"warning: {w}")
    print(f"{args.path}: ok ({len(warnings)} warnings)")


# ---------------------------------------------------------------- parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment config")
    common.add_argument("--seed", type=int, help="root seed (overrides run.seed)")
    common.add_argument("--threads", type=int, help="worker cap; 1 is bit-exact")
    common.add_argument("--out", help="output directory (overrides output.dir)")

    parser = argparse.ArgumentParser(prog="slowfast", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate the particle system")
    p.add_argument("--delta", type=float, help="noise scale (default: smallest rung)")
    p.add_argument("--N", type=int, help="number of particles")
    p.add_argument("--keep", choices=("endpoints", "full", "thinned"), default="endpoints")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("invariant", parents=[common], help="sample the invariant bank")
    p.add_argument("--K", type=int, help="bank size")
    p.set_defaults(func=cmd_invariant)

    p = sub.add_parser("action", help="evaluate or minimise the rate function")
    asub = p.add_subparsers(dest="action_cmd", required=True)
    q = asub.add_parser("eval", parents=[common], help="action of a path CSV (t,x1,..)")
    q.add_argument("--path", help="path CSV; default is the averaged path")
    q.set_defaults(func=cmd_action)
    q = asub.add_parser("minimize", parents=[common], help="minimum action to a target")
    group = q.add_mutually_exclusive_group()
    group.add_argument("--target", type=float, nargs="+", help="terminal point")
    group.add_argument("--at-least", type=float, help="terminal halfspace X_T[0] >= q")
    q.set_defaults(func=cmd_action)

    p = sub.add_parser("occupation", help="occupation measures and viability")
    osub = p.add_subparsers(dest="occ_cmd", required=True)
    q = osub.add_parser("build", parents=[common], help="zero-control occupation measure")
    q.add_argument("--delta", type=float, help="noise scale (default: smallest rung)")
    q.set_defaults(func=cmd_occupation)
    q = osub.add_parser("check", parents=[common],
                        help="viability diagnostics (ladder, or a given measure)")
    q.add_argument("--occupation", help="occupation CSV (h..,y..,t,w)")
    q.add_argument("--path", help="path CSV; default is the averaged path")
    q.set_defaults(func=cmd_occupation)

    p = sub.add_parser("ldp", help="tail-probability ladders")
    lsub = p.add_subparsers(dest="ldp_cmd", required=True)
    q = lsub.add_parser("verify", parents=[common], help="crude and IS ladders vs I*")
    q.add_argument("--estimator", choices=("crude", "importance", "both"))
    q.set_defaults(func=cmd_ldp)

    p = sub.add_parser("suite", help="run verification suites")
    ssub = p.add_subparsers(dest="suite_cmd", required=True)
    q = ssub.add_parser("run", parents=[common], help="run the configured suites")
    q.set_defaults(func=cmd_suite)

    p = sub.add_parser("config", help="configuration utilities")
    csub = p.add_subparsers(dest="config_cmd", required=True)
    q = csub.add_parser("validate", help="check a config without simulating")
    q.add_argument("path")
    q.set_defaults(func=cmd_validate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        code = args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SlowFastError, FloatingPointError, ArithmeticError, ValueError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
