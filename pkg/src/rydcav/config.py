"""Strict JSON run configuration in laboratory units.

Frequencies are ``nu = omega / 2 pi`` in MHz (GHz for the cavity), lifetimes
in microseconds, temperatures in kelvin. :func:`resolve` merges the defaults
for an experiment, a user file and ``--set`` overrides, rejects unknown keys
and returns a fully populated plain dict. :func:`system_spec` converts its
``system`` block to a :class:`~rydcav.model.SystemSpec`.
"""

from __future__ import annotations

import copy
import json
import math
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import SCHEMES, SystemSpec, mhz

EXPERIMENTS = (
    "spectroscopy",
    "rabi",
    "cool",
    "teff-map",
    "optimize",
    "cooled-rabi",
    "cooled-spectroscopy",
    "multiatom",
    "steadystate",
)
FORMATS = ("csv", "json")
METHODS = ("auto", "linear-solve", "time-evolution", "null-space")

SYSTEM_DEFAULTS = {
    "scheme": "cool",
    "omega_c_ghz": 15.0,
    "delta_mhz": 0.0,
    "delta_prime_mhz": 0.0,
    "delta_c_mhz": 0.0,
    "g_mhz": 4.0,
    "omega_drive_mhz": 10.0,
    "omega_dress_mhz": 10.0,
    "tau_s_us": 289.0,
    "tau_p_us": 689.0,
    "gamma_e_mhz": 5.2,
    "q_factor": 1e5,
    "temperature_k": 4.0,
    "n_atoms": 1,
}

RUN_DEFAULTS = {
    "t_final_us": 10.0,
    "n_points": 201,
    "objective": "n_mean",
    "bounds_mhz": [[1.0, 30.0], [1.0, 30.0]],
    "grid_points": 11,
    "detuning_map": False,
}

SOLVER_DEFAULTS = {
    "method": "auto",
    "n_max": None,
    "converge_cutoff": False,
    "rel_tol": 1e-3,
    "dim_cap": 20000,
}

BASE = {
    "experiment": None,
    "system": SYSTEM_DEFAULTS,
    "grids": {},
    "run": RUN_DEFAULTS,
    "solver": SOLVER_DEFAULTS,
    "output": {"path": None, "format": None},
}

GRID_KEYS = {"delta", "axis1", "axis2", "n_atoms", "detuning"}
NAMED_GRIDS = {
    "axis1": ("g", "q_factor"),
    "axis2": ("temperature", "q_factor", "omega_drive"),
}

OPTIMAL = {"omega_drive_mhz": 14.5, "omega_dress_mhz": 17.6}

OVERLAYS = {
    "spectroscopy": {
        "system": {"scheme": "lambda", "omega_drive_mhz": 2.0, "omega_dress_mhz": 0.0},
        "grids": {
            "delta": {"min": -12.0, "max": 12.0, "points": 101, "scale": "linear"},
            "axis2": {"name": "temperature", "values": [0.0, 1.0, 2.0, 4.0]},
        },
    },
    "rabi": {
        "system": {"omega_drive_mhz": 0.0, "omega_dress_mhz": 0.0},
        "run": {"t_final_us": 2.0, "n_points": 801},
    },
    "cool": {"solver": {"converge_cutoff": True}},
    "teff-map": {
        "grids": {
            "axis1": {"name": "g", "min": 1.0, "max": 8.0, "points": 8, "scale": "linear"},
            "axis2": {"name": "omega_drive", "min": 2.0, "max": 20.0, "points": 10, "scale": "linear"},
        },
    },
    "optimize": {
        "grids": {"detuning": {"min": -8.0, "max": 8.0, "points": 9, "scale": "linear"}},
    },
    "cooled-rabi": {"system": OPTIMAL, "run": {"t_final_us": 2.0, "n_points": 801}},
    "cooled-spectroscopy": {
        "system": OPTIMAL,
        "grids": {"delta": {"min": -12.0, "max": 12.0, "points": 101, "scale": "linear"}},
    },
    "multiatom": {"system": OPTIMAL, "grids": {"n_atoms": {"values": [1, 2, 3]}},
                  "solver": {"converge_cutoff": True, "rel_tol": 5e-3}},
    "steadystate": {"solver": {"converge_cutoff": True}},
}

JSON_ONLY = {"optimize", "steadystate"}


def _merge(base: dict, extra: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        where = f"{path}{key}"
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key not in GRID_KEYS:
            out[key] = _merge(out[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def defaults(experiment: str) -> dict:
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}; choose from {', '.join(EXPERIMENTS)}",
                          "experiment")
    cfg = _merge(BASE, OVERLAYS.get(experiment, {}))
    cfg["experiment"] = experiment
    cfg["output"]["format"] = "json" if experiment in JSON_ONLY else "csv"
    return cfg


def load_file(path) -> dict:
    """Read a config file, or the ``config`` block of a result sidecar."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}", "--config") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}: {exc.msg}", "--config") from exc
    if not isinstance(data, dict):
        raise ConfigError("top level must be a JSON object", "--config")
    if set(data) == {"config", "provenance"}:
        data = data["config"]
    return data


def parse_override(text: str) -> tuple[list, object]:
    """``a.b.c=value`` -> (["a", "b", "c"], value); the value is JSON if it parses."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value", "--set")
    key, raw = text.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"malformed key {key!r}", "--set")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return parts, value


def apply_override(cfg: dict, parts: list, value) -> None:
    node = cfg
    for i, part in enumerate(parts[:-1]):
        child = node.get(part)
        if child is None:
            child = node[part] = {}
        if not isinstance(child, dict):
            raise ConfigError("cannot set a key below a scalar", ".".join(parts[: i + 1]))
        node = child
    node[parts[-1]] = value


def resolve(experiment: str | None, user: dict | None = None, overrides=()) -> dict:
    """Fully populated, validated config for ``experiment``."""
    user = copy.deepcopy(user or {})
    for text in overrides:
        apply_override(user, *parse_override(text))
    named = user.get("experiment")
    if experiment is None:
        if named is None:
            raise ConfigError("no experiment given on the command line or in the config", "experiment")
        experiment = named
    elif named is not None and named != experiment:
        raise ConfigError(f"config is for {named!r} but {experiment!r} was requested", "experiment")
    if not isinstance(experiment, str):
        raise ConfigError("must be a string", "experiment")
    cfg = defaults(experiment)
    _check_keys(user, cfg, "")
    cfg = _merge(cfg, user)
    cfg["experiment"] = experiment
    validate(cfg)
    return cfg


def _check_keys(user: dict, template: dict, path: str) -> None:
    for key, value in user.items():
        where = f"{path}{key}"
        if path == "grids.":
            if key not in GRID_KEYS:
                raise ConfigError(f"unknown grid {key!r}; allowed: {', '.join(sorted(GRID_KEYS))}", where)
            continue
        if key not in template:
            raise ConfigError("unknown key", where)
        if isinstance(template[key], dict) or key == "grids":
            if not isinstance(value, dict):
                raise ConfigError("must be an object", where)
            _check_keys(value, template[key] or {}, where + ".")


# ---------------------------------------------------------------------------
# validation


def _number(cfg, section, key, *, minimum=None, positive=False, integer=False, nullable=False):
    where = f"{section}.{key}"
    value = cfg[section][key]
    if value is None and nullable:
        return
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"must be a number, got {value!r}", where)
    if not math.isfinite(value):
        raise ConfigError("must be finite", where)
    if integer and int(value) != value:
        raise ConfigError(f"must be an integer, got {value!r}", where)
    if positive and value <= 0:
        raise ConfigError(f"must be positive, got {value!r}", where)
    if minimum is not None and value < minimum:
        raise ConfigError(f"must be >= {minimum}, got {value!r}", where)


def _choice(value, options, where):
    if value not in options:
        raise ConfigError(f"must be one of {', '.join(map(str, options))}, got {value!r}", where)


def validate(cfg: dict) -> None:
    s = "system"
    _choice(cfg[s]["scheme"], SCHEMES, "system.scheme")
    for key in ("delta_mhz", "delta_prime_mhz", "delta_c_mhz"):
        _number(cfg, s, key)
    for key in ("g_mhz", "omega_drive_mhz", "omega_dress_mhz", "gamma_e_mhz", "temperature_k"):
        _number(cfg, s, key, minimum=0.0)
    for key in ("omega_c_ghz", "q_factor", "tau_s_us", "tau_p_us"):
        _number(cfg, s, key, positive=True)
    _number(cfg, s, "n_atoms", integer=True, minimum=1)

    r = "run"
    _number(cfg, r, "t_final_us", positive=True)
    _number(cfg, r, "n_points", integer=True, minimum=2)
    _number(cfg, r, "grid_points", integer=True, minimum=1)
    _choice(cfg[r]["objective"], ("n_mean", "t_eff"), "run.objective")
    if not isinstance(cfg[r]["detuning_map"], bool):
        raise ConfigError("must be true or false", "run.detuning_map")
    bounds = cfg[r]["bounds_mhz"]
    ok = (isinstance(bounds, list) and len(bounds) == 2
          and all(isinstance(b, list) and len(b) == 2 for b in bounds))
    if not ok:
        raise ConfigError("must be [[min, max], [min, max]]", "run.bounds_mhz")
    for i, (lo, hi) in enumerate(bounds):
        where = f"run.bounds_mhz[{i}]"
        for v in (lo, hi):
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v) or v < 0:
                raise ConfigError(f"bounds must be finite non-negative numbers, got {v!r}", where)
        if lo > hi:
            raise ConfigError(f"min {lo} exceeds max {hi}", where)

    v = "solver"
    _choice(cfg[v]["method"], METHODS, "solver.method")
    _number(cfg, v, "n_max", integer=True, minimum=1, nullable=True)
    _number(cfg, v, "rel_tol", positive=True)
    _number(cfg, v, "dim_cap", integer=True, minimum=1)
    if not isinstance(cfg[v]["converge_cutoff"], bool):
        raise ConfigError("must be true or false", "solver.converge_cutoff")

    out = cfg["output"]
    _choice(out["format"], FORMATS, "output.format")
    if out["format"] == "csv" and cfg["experiment"] in JSON_ONLY:
        raise ConfigError(f"{cfg['experiment']} results are JSON only", "output.format")
    if out["path"] is not None and not isinstance(out["path"], str):
        raise ConfigError("must be a string or null", "output.path")

    for name, grid in cfg["grids"].items():
        grid_values(grid, f"grids.{name}")
        if name in NAMED_GRIDS:
            if "name" not in grid:
                raise ConfigError("axis needs a 'name'", f"grids.{name}.name")
            _choice(grid["name"], NAMED_GRIDS[name], f"grids.{name}.name")
        elif "name" in grid:
            raise ConfigError("only axis1/axis2 take a name", f"grids.{name}.name")


def grid_values(grid: dict, where: str) -> np.ndarray:
    """Expand ``{"values": [...]}`` or ``{"min", "max", "points", "scale"}``."""
    if not isinstance(grid, dict):
        raise ConfigError("grid must be an object", where)
    allowed = {"name", "values", "min", "max", "points", "scale"}
    for key in grid:
        if key not in allowed:
            raise ConfigError("unknown key", f"{where}.{key}")
    if "values" in grid:
        extra = {"min", "max", "points", "scale"} & set(grid)
        if extra:
            raise ConfigError("give either values or min/max/points, not both", f"{where}.{sorted(extra)[0]}")
        vals = grid["values"]
        if not isinstance(vals, list) or not vals:
            raise ConfigError("must be a non-empty list", f"{where}.values")
        for x in vals:
            if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
                raise ConfigError(f"entries must be finite numbers, got {x!r}", f"{where}.values")
        return np.asarray(vals, dtype=float)
    for key in ("min", "max", "points"):
        if key not in grid:
            raise ConfigError("missing", f"{where}.{key}")
    lo, hi, n = grid["min"], grid["max"], grid["points"]
    scale = grid.get("scale", "linear")
    for key, x in (("min", lo), ("max", hi)):
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
            raise ConfigError(f"must be a finite number, got {x!r}", f"{where}.{key}")
    if isinstance(n, bool) or not isinstance(n, int) or n < 1:
        raise ConfigError(f"must be an integer >= 1, got {n!r}", f"{where}.points")
    if lo > hi:
        raise ConfigError(f"min {lo} exceeds max {hi}", f"{where}.min")
    if n == 1 and lo != hi:
        raise ConfigError("a single point needs min == max", f"{where}.points")
    _choice(scale, ("linear", "log"), f"{where}.scale")
    if scale == "log":
        if lo <= 0:
            raise ConfigError("log scale needs min > 0", f"{where}.min")
        return np.geomspace(lo, hi, n)
    return np.linspace(lo, hi, n)


# ---------------------------------------------------------------------------
# conversion


def system_spec(cfg: dict) -> SystemSpec:
    s = cfg["system"]
    return SystemSpec(
        scheme=s["scheme"],
        omega_c=mhz(1e3 * s["omega_c_ghz"]),
        delta=mhz(s["delta_mhz"]),
        delta_prime=mhz(s["delta_prime_mhz"]),
        delta_c=mhz(s["delta_c_mhz"]),
        g=mhz(s["g_mhz"]),
        omega_drive=mhz(s["omega_drive_mhz"]),
        omega_dress=mhz(s["omega_dress_mhz"]),
        gamma_s=1.0 / s["tau_s_us"],
        gamma_p=1.0 / s["tau_p_us"],
        gamma_e=mhz(s["gamma_e_mhz"]),
        q_factor=float(s["q_factor"]),
        temperature=float(s["temperature_k"]),
        n_max=cfg["solver"]["n_max"],
        n_atoms=int(s["n_atoms"]),
    )


# axis name -> (SystemSpec field, factor from config units to internal units)
AXIS_UNITS = {
    "g": mhz(1.0),
    "omega_drive": mhz(1.0),
    "delta": mhz(1.0),
    "temperature": 1.0,
    "q_factor": 1.0,
}
