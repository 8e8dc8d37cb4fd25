"""Verification suites and their orchestration.

Each suite writes its tables into the output directory; ``run_suite`` runs
the selected ones in dependency order and records a ``manifest.json``.
"""
import csv
import json
import math
import os
import platform
import time
from datetime import datetime, timezone

import numpy as np
import scipy

from .action import evaluate_action, minimize_action, solve_averaged_ode
from .config import config_hash, ordered_suites
from .errors import ConfigError, EstimatorStarvedError, InsufficientDataError, SlowFastError
from .invariant import estimate_invariant, q_matrix
from .ldp import (TailEvent, crude_tail, gaussian_tail, is_tail, ldp_gap, linear_endpoint_law,
                  variance_reduction)
from .model import MeasureFeatures, build_model, default_dt, scale_ladder
from .occupation import build_occupation, check_viability
from .rng import sim_stream_name
from .simulate import Control, fast_rate, simulate_paths

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

try:
    from importlib.metadata import version as _dist_version
    PACKAGE_VERSION = _dist_version("artifact")
except Exception:  # not installed as a distribution
    PACKAGE_VERSION = "0+unknown"


# ---------------------------------------------------------------- experiments

def _step(model, scale, dt):
    return dt if dt is not None else default_dt(scale, fast_rate(model))


def averaging_errors(model, ladder, bank, N, T=1.0, seed=0, dt=None):
    """``E sup_{t<=T} |X_t - Xbar_t|^2`` and its standard error for every rung."""
    xbar = solve_averaged_ode(model, bank, T=T, dt=1e-4 * T)
    rows = []
    for scale in ladder:
        worst = np.zeros(int(N))

        def track(t, X, Y, worst=worst):
            np.maximum(worst, np.sum((X - xbar(t)) ** 2, axis=1), out=worst)

        simulate_paths(model, scale, N, T, dt=_step(model, scale, dt), seed=seed,
                       stream=sim_stream_name(scale.delta, 0, tag="averaging"),
                       observers=(track,))
        rows.append({"delta": scale.delta, "mean_sup_sq": math.fsum(worst) / len(worst),
                     "stderr": float(np.std(worst, ddof=1) / math.sqrt(len(worst)))})
    return rows


def moment_sups(model, ladder, control, N, T=1.0, seed=0, dt=None):
    """``E sup_{t<=T} |X^{delta,h}_t|^2`` for every rung under ``control``."""
    rows = []
    for scale in ladder:
        worst = np.zeros(int(N))

        def track(t, X, Y, worst=worst):
            np.maximum(worst, np.sum(X ** 2, axis=1), out=worst)

        simulate_paths(model, scale, N, T, dt=_step(model, scale, dt), control=control,
                       seed=seed, stream=sim_stream_name(scale.delta, 0, tag="moments"),
                       observers=(track,))
        rows.append({"delta": scale.delta, "mean_sup_sq": math.fsum(worst) / len(worst)})
    return rows


def holder_increments(model, scale, N, T=1.0, lag=0.005, multiples=(1, 2, 4, 8, 16), seed=0,
                      dt=None, control=None):
    """Mean squared increments ``E|X_{t+s} - X_t|^2`` at lags ``s = j * lag``.

    Returns ``(lags, means, slope)`` where ``slope`` is the least-squares
    slope of ``log mean`` against ``log s``.
    """
    step = _step(model, scale, dt)
    thin = max(1, int(round(lag / step)))
    step = lag / thin
    traj = simulate_paths(model, scale, N, T, dt=step, control=control, seed=seed,
                          keep="thinned", thin_every=thin,
                          stream=sim_stream_name(scale.delta, 0, tag="holder"))
    X = traj.X_path
    lags, means = [], []
    for j in multiples:
        if j >= len(X):
            break
        inc = np.sum((X[j:] - X[:-j]) ** 2, axis=-1)
        lags.append(j * lag)
        means.append(float(np.mean(inc)))
    slope = float(np.polyfit(np.log(lags), np.log(means), 1)[0])
    return np.asarray(lags), np.asarray(means), slope


def occupation_diagnostics(model, ladder, bank, N, T=1.0, windows=50, atoms_per_window=10,
                           seed=0, dt=None):
    """Zero-control occupation measure diagnostics for every rung."""
    rows = []
    xbar = solve_averaged_ode(model, bank, T=T)
    for scale in ladder:
        step = _step(model, scale, dt)
        thin = max(1, int(math.floor(scale.Delta / atoms_per_window / step)))
        traj = simulate_paths(model, scale, N, T + scale.Delta, dt=step, seed=seed,
                              keep="thinned", thin_every=thin,
                              stream=sim_stream_name(scale.delta, 0, tag="occupation"))
        P = build_occupation(traj, Control.zero(model.d1 + model.d2), scale,
                             atoms_per_window=atoms_per_window, windows=windows, T=T)
        report = check_viability(xbar, P, model, bank, seed=seed)
        rows.append({"delta": scale.delta, **report.to_dict()})
    return rows


def tail_event(model, bank, shift, T=1.0):
    """Halfspace ``{X_T[0] >= Xbar_T[0] + shift}``."""
    xbar_T = solve_averaged_ode(model, bank, T=T).values[-1]
    return TailEvent.halfspace(float(xbar_T[0]) + shift, T=T)


# ---------------------------------------------------------------- orchestration

def _write_rows(path, rows):
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        out = csv.DictWriter(fh, fieldnames=list(rows[0]))
        out.writeheader()
        for r in rows:
            out.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v
                          for k, v in r.items()})


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_plain)
        fh.write("\n")


def _plain(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    raise TypeError(f"cannot serialise {type(value).__name__}")


class SuiteContext:
    """Lazily computed shared artefacts (bank, averaged path, minimiser)."""

    def __init__(self, cfg, out):
        self.cfg, self.out = cfg, out
        run = cfg["run"]
        self.seed, self.T = int(run["seed"]), float(run["T"])
        self.dt = None if run["dt"] == "auto" else float(run["dt"])
        self.threads = int(run["threads"])
        self.model = build_model(cfg["model"]["kind"], cfg["model"]["params"])
        self.ladder = scale_ladder(cfg["scales"]["delta"])
        self.streams = set()
        self._bank = self._xbar = self._minimiser = None

    @property
    def bank(self):
        if self._bank is None:
            self.streams.add("invariant")
            self._bank = estimate_invariant(self.model, K=self.cfg["bank"]["K"], seed=self.seed,
                                            chains=self.cfg["bank"]["chains"])
        return self._bank

    @property
    def xbar(self):
        if self._xbar is None:
            self._xbar = solve_averaged_ode(self.model, self.bank, T=self.T)
        return self._xbar

    def event(self):
        return tail_event(self.model, self.bank, self.cfg["ldp"]["shift"], self.T)

    @property
    def minimiser(self):
        if self._minimiser is None:
            a = self.cfg["action"]
            self._minimiser = minimize_action(
                self.model, self.bank, self.event().terminal(), K_nodes=a["K_nodes"],
                max_iter=a["max_iter"], T=self.T)
        return self._minimiser


def _suite_invariant(ctx):
    bank = ctx.bank
    d = os.path.join(ctx.out, "invariant")
    bank.save(d)
    feats = bank.features
    x0 = ctx.model.x0
    Q = q_matrix(x0, MeasureFeatures.point_mass(x0), bank, ctx.model)
    summary = {"K": bank.K, "kappa_hat": bank.kappa_hat, "burn_in": bank.burn_in,
               "thin": bank.thin, "dt": bank.dt, "mean": feats.mean,
               "variance": np.var(bank.samples, axis=0), "q_matrix_at_x0": Q}
    _write_json(os.path.join(d, "invariant.json"), summary)
    return ["invariant/atoms.csv", "invariant/atoms.meta.json", "invariant/invariant.json"]


def _suite_ode(ctx):
    ctx.xbar.to_csv(os.path.join(ctx.out, "ode.csv"))
    return ["ode.csv"]


def _suite_action(ctx):
    path, result = ctx.minimiser
    zero = evaluate_action(ctx.xbar, ctx.model, ctx.bank)
    path.to_csv(os.path.join(ctx.out, "action_path.csv"))
    _write_json(os.path.join(ctx.out, "action.json"),
                {"event_q": ctx.event().q, "I_star": result.to_dict(),
                 "averaged_path_action": zero.value})
    return ["action_path.csv", "action.json"]


def _suite_averaging(ctx):
    ctx.streams.add("averaging:*")
    rows = averaging_errors(ctx.model, ctx.ladder, ctx.bank, ctx.cfg["run"]["N"], ctx.T,
                            seed=ctx.seed, dt=ctx.dt)
    _write_rows(os.path.join(ctx.out, "averaging.csv"), rows)
    return ["averaging.csv"]


def _suite_moments(ctx):
    ctx.streams.update(["moments:*", "holder:*"])
    m = ctx.model
    control = Control.constant(np.ones(m.d1 + m.d2), ctx.T)
    rows = moment_sups(m, ctx.ladder, control, ctx.cfg["run"]["N"], ctx.T, seed=ctx.seed,
                       dt=ctx.dt)
    sups = [r["mean_sup_sq"] for r in rows]
    lags, means, slope = holder_increments(m, ctx.ladder[-1], ctx.cfg["run"]["N"], ctx.T,
                                           seed=ctx.seed, dt=ctx.dt)
    _write_rows(os.path.join(ctx.out, "moments.csv"), rows)
    _write_json(os.path.join(ctx.out, "moments.json"),
                {"sup_ratio": max(sups) / min(sups), "holder_lags": lags,
                 "holder_means": means, "holder_slope": slope})
    return ["moments.csv", "moments.json"]


def _suite_occupation(ctx):
    ctx.streams.add("occupation:*")
    o = ctx.cfg["occupation"]
    rows = occupation_diagnostics(ctx.model, ctx.ladder, ctx.bank, ctx.cfg["run"]["N"], ctx.T,
                                  windows=o["windows"], atoms_per_window=o["atoms_per_window"],
                                  seed=ctx.seed, dt=ctx.dt)
    _write_rows(os.path.join(ctx.out, "occupation.csv"), rows)
    return ["occupation.csv"]


def _suite_ldp(ctx):
    cfg = ctx.cfg
    event = ctx.event()
    psi, result = ctx.minimiser
    I_star = result.value
    report = {"event_q": event.q, "I_star": I_star}
    files = []
    common = dict(replicas=cfg["run"]["replicas"], N_particles=cfg["run"]["N_particles"],
                  seed=ctx.seed, threads=ctx.threads, dt=ctx.dt)
    tables = {}
    if cfg["ldp"]["estimator"] in ("crude", "both"):
        ctx.streams.add("sim:*")
        try:
            tables["crude"] = crude_tail(ctx.model, ctx.ladder, event, **common)
        except EstimatorStarvedError as exc:
            report["crude_error"] = str(exc)
    if cfg["ldp"]["estimator"] in ("importance", "both"):
        ctx.streams.add("is:*")
        tables["importance"] = is_tail(ctx.model, ctx.ladder, event, psi, ctx.bank, **common)
    for name, table in tables.items():
        table.to_csv(os.path.join(ctx.out, f"ldp_{name}.csv"))
        files.append(f"ldp_{name}.csv")
        entry = table.to_json()
        try:
            entry["gap"] = ldp_gap(table, I_star)
        except InsufficientDataError as exc:
            entry["gap_error"] = str(exc)
        if name == "importance":
            entry["variance_reduction"] = [variance_reduction(r) for r in table.rows]
        report[name] = entry
    if cfg["model"]["kind"] == "linear" and ctx.model.n == 1:
        exact = []
        for scale in ctx.ladder:
            mean, var = linear_endpoint_law(ctx.model.params, scale, ctx.T)
            exact.append({"delta": scale.delta, "p_exact": gaussian_tail(mean, var, event.q)})
        report["exact_gaussian"] = exact
    _write_json(os.path.join(ctx.out, "ldp.json"), report)
    return files + ["ldp.json"]


SUITE_RUNNERS = {
    "invariant": _suite_invariant,
    "ode": _suite_ode,
    "action": _suite_action,
    "averaging": _suite_averaging,
    "moments": _suite_moments,
    "occupation": _suite_occupation,
    "ldp": _suite_ldp,
}


def _now():
    return datetime.now(timezone.utc).isoformat()


def run_suite(cfg, out=None, threads=None):
    """Run the configured suites; returns ``(exit_code, output_dir)``.

    ``cfg`` must already be validated. The manifest keeps every
    time-dependent field under ``"timestamps"``.
    """
    out = os.path.abspath(out or cfg["output"]["dir"])
    if threads is not None:
        cfg = {**cfg, "run": {**cfg["run"], "threads": int(threads)}}
    os.makedirs(out, exist_ok=True)
    manifest = {
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": int(cfg["run"]["seed"]),
        "versions": {"artifact": PACKAGE_VERSION, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "suites": {},
        "timestamps": {"started": _now(), "suites": {}},
    }
    code = EXIT_OK
    try:
        ctx = SuiteContext(cfg, out)
    except (ConfigError, ValueError) as exc:
        manifest["error"] = f"config: {exc}"
        code = EXIT_CONFIG
    else:
        manifest["order"] = ordered_suites(cfg)
        for name in manifest["order"]:
            started = time.perf_counter()
            try:
                files = SUITE_RUNNERS[name](ctx)
                manifest["suites"][name] = {"status": "ok", "files": files}
            except (SlowFastError, FloatingPointError, ArithmeticError, ValueError) as exc:
                manifest["suites"][name] = {"status": "error",
                                            "error": f"{type(exc).__name__}: {exc}"}
                code = EXIT_CONFIG if isinstance(exc, ConfigError) else EXIT_NUMERICAL
            manifest["timestamps"]["suites"][name] = round(time.perf_counter() - started, 3)
            if code != EXIT_OK:
                break
        manifest["substreams"] = sorted(ctx.streams)
    manifest["exit_code"] = code
    manifest["timestamps"]["finished"] = _now()
    _write_json(os.path.join(out, "manifest.json"), manifest)
    return code, out
