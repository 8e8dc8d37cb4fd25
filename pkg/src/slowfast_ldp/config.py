"""Experiment configuration: a data-only TOML file with dotted keys.

Example::

    model.kind = "linear"
    model.params = { a = 1.0, d = 1.0, sigma0 = 1.0, kappa = 2.0, gamma = 1.0 }
    scales.delta = [0.2, 0.1, 0.05]
    run.T = 1.0
    run.N = 2000
    run.replicas = 2000
    run.seed = 0
    suites = ["invariant", "action"]
    output.dir = "out"
"""
import copy
import hashlib
import json
import os
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .model import MODEL_REGISTRY, build_model, scale_ladder

SUITES = ("invariant", "ode", "action", "averaging", "moments", "occupation", "ldp")

DEFAULTS = {
    "model": {"kind": "linear", "params": {}},
    "scales": {"delta": [0.2, 0.1, 0.05]},
    "run": {"T": 1.0, "dt": "auto", "N": 2000, "replicas": 2000, "N_particles": 10000,
            "threads": 1},
    "bank": {"K": 20000, "chains": 100},
    "action": {"K_nodes": 200, "max_iter": 500},
    "occupation": {"windows": 50, "atoms_per_window": 10},
    "ldp": {"shift": 1.0, "estimator": "both"},
    "output": {"dir": "out"},
    "suites": list(SUITES),
}

# value checks: key -> (type, predicate, message)
_POSITIVE = (lambda v: v > 0, "must be positive")
_CHECKS = {
    ("run", "T"): ((int, float), *_POSITIVE),
    ("run", "N"): (int, *_POSITIVE),
    ("run", "replicas"): (int, *_POSITIVE),
    ("run", "N_particles"): (int, *_POSITIVE),
    ("run", "threads"): (int, *_POSITIVE),
    ("run", "seed"): (int, lambda v: v >= 0, "must be a nonnegative integer"),
    ("bank", "K"): (int, *_POSITIVE),
    ("bank", "chains"): (int, *_POSITIVE),
    ("action", "K_nodes"): (int, lambda v: v >= 2, "must be at least 2"),
    ("action", "max_iter"): (int, *_POSITIVE),
    ("occupation", "windows"): (int, *_POSITIVE),
    ("occupation", "atoms_per_window"): (int, *_POSITIVE),
    ("ldp", "shift"): ((int, float), lambda v: v > 0, "must be positive"),
    ("ldp", "estimator"): (str, lambda v: v in ("crude", "importance", "both"),
                           "must be crude, importance or both"),
    ("output", "dir"): (str, lambda v: bool(v), "must be a nonempty path"),
}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown key {where!r}")
        if isinstance(base[key], dict) and key != "params":
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a table")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def load_config(path):
    """Read and validate a config file; returns the merged, validated dict."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path!r}: {exc}") from exc
    return parse_config(raw)


def parse_config(raw):
    """Validate a raw mapping. Raises ``ConfigError`` on the first problem."""
    defaults = copy.deepcopy(DEFAULTS)
    defaults["run"]["seed"] = None
    cfg = _merge(defaults, raw)
    validate(cfg)
    return cfg


def validate(cfg):
    """Schema, scale-inequality and dt-rule checks. Never simulates.

    Returns a list of warnings; problems raise ``ConfigError``.
    """
    if cfg["run"].get("seed") is None:
        raise ConfigError("run.seed is required")
    for (section, key), (kind, ok, message) in _CHECKS.items():
        value = cfg[section][key]
        if isinstance(value, bool) or not isinstance(value, kind) or not ok(value):
            raise ConfigError(f"{section}.{key} {message} (got {value!r})")

    kind = cfg["model"]["kind"]
    if kind not in MODEL_REGISTRY:
        raise ConfigError(f"unknown model kind {kind!r}; known: {sorted(MODEL_REGISTRY)}")
    params = cfg["model"]["params"]
    if not isinstance(params, dict):
        raise ConfigError("model.params must be a table")
    try:
        build_model(kind, params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model.params rejected: {exc}") from exc

    deltas = cfg["scales"]["delta"]
    if not isinstance(deltas, list) or not deltas:
        raise ConfigError("scales.delta must be a nonempty list")
    try:
        ladder = scale_ladder([float(d) for d in deltas])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scales.delta rejected: {exc}") from exc

    dt = cfg["run"]["dt"]
    if dt != "auto":
        if isinstance(dt, bool) or not isinstance(dt, (int, float)) or not dt > 0:
            raise ConfigError(f"run.dt must be 'auto' or a positive number (got {dt!r})")
        worst = min(s.epsilon for s in ladder)
        if dt > worst / 10:
            raise ConfigError(f"run.dt = {dt} exceeds epsilon/10 = {worst / 10:.3g} "
                              f"at the smallest delta")

    suites = cfg["suites"]
    if not isinstance(suites, list) or not suites:
        raise ConfigError("suites must be a nonempty list")
    unknown = [s for s in suites if s not in SUITES]
    if unknown:
        raise ConfigError(f"unknown suites {unknown}; known: {list(SUITES)}")

    out = os.path.abspath(cfg["output"]["dir"])
    probe = out
    while not os.path.exists(probe):
        parent = os.path.dirname(probe)
        if parent == probe:
            break
        probe = parent
    if not os.access(probe, os.W_OK):
        raise ConfigError(f"output.dir {out!r} is not writable")

    warnings = []
    if cfg["bank"]["K"] < 1000:
        warnings.append(f"bank.K = {cfg['bank']['K']} gives averaged coefficients with "
                        f"Monte Carlo error above about 3%")
    return warnings


def config_hash(cfg):
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def ordered_suites(cfg):
    return [s for s in SUITES if s in cfg["suites"]]
