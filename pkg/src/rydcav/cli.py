"""Command-line front end.

``rydcav <experiment> [--config FILE] [--set key=value ...] [--out PATH]
[--format csv|json] [--jobs N]`` runs one experiment and writes the result
plus ``<PATH>.meta.json`` (resolved config and provenance). ``rydcav run
--config FILE`` takes the experiment from the file, so a sidecar can be fed
back in unchanged. ``rydcav list`` prints the experiment table.

Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 dimension
cap exceeded.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import platform
import sys
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import experiments as ex
from .config import EXPERIMENTS, AXIS_UNITS, grid_values, load_file, resolve, system_spec
from .errors import ConfigError, ConvergenceError, DimensionCapError
from .model import build, mhz, to_mhz
from .operators import expect
from .solver import converge_cutoff, steadystate

log = logging.getLogger("rydcav")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_CAP = 0, 2, 3, 4

EXPERIMENT_TABLE = (
    ("spectroscopy", "Fig. 2/3", "pulse transfer out of |g> vs detuning and temperature or Q"),
    ("rabi", "Fig. 6(a)", "vacuum Rabi oscillation with a thermal cavity"),
    ("cool", "Fig. 4(a-b)", "cooling transient and steady state"),
    ("teff-map", "Fig. 4(c-d)", "steady-state T_eff over two parameters"),
    ("optimize", "Fig. 5", "best drive and dressing Rabi frequencies, detuning map"),
    ("cooled-rabi", "Fig. 6(a)", "vacuum Rabi oscillation after active cooling"),
    ("cooled-spectroscopy", "Fig. 6(b)", "lambda spectroscopy after active cooling"),
    ("multiatom", "atom-number scan", "steady-state T_eff vs number of atoms"),
    ("steadystate", "Fig. 4(b)", "single steady state with photon distribution"),
)

CSV_HEADERS = {
    "spectroscopy": ["delta_mhz", "axis2_name", "axis2_value", "transfer"],
    "cooled-spectroscopy": ["delta_mhz", "axis2_name", "axis2_value", "transfer"],
    "cool": ["t_us", "n_mean", "p_vac", "p_g", "p_p", "p_s", "p_e"],
    "rabi": ["t_us", "n_mean", "p_vac", "p_g", "p_p", "p_s", "p_e"],
    "cooled-rabi": ["t_us", "p_s_zero_k", "p_s_thermal", "p_s_cooled", "p_s_cooled_correlated"],
    "teff-map": ["axis1", "axis2", "t_eff_k"],
    "multiatom": ["n_atoms", "t_eff_k"],
}


def list_experiments() -> str:
    width = max(len(name) for name, *_ in EXPERIMENT_TABLE)
    lines = [f"{name.ljust(width)} → {figure}: {what}" for name, figure, what in EXPERIMENT_TABLE]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# formatting


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".9g")
    return str(x)


def round9(obj):
    """Recursively round floats to 9 significant digits; NaN/inf become None."""
    if isinstance(obj, dict):
        return {str(k): round9(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round9(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return round9(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return float(format(x, ".9g")) if math.isfinite(x) else None
    return obj


def render(columns, rows, fmt_name: str) -> str:
    if fmt_name == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
        return buf.getvalue()
    return json.dumps(round9({"columns": list(columns), "rows": [list(r) for r in rows]}), indent=2) + "\n"


def dump_json(obj) -> str:
    return json.dumps(round9(obj), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# experiment runners; each returns (text, summary, provenance)


def _axis(cfg, name):
    grid = cfg["grids"].get(name)
    if grid is None:
        raise ConfigError("this experiment needs the grid", f"grids.{name}")
    return grid_values(grid, f"grids.{name}")


def _internal(axis_name, values):
    return values * AXIS_UNITS[axis_name]


def _converged(cfg, spec, targets=("n_mean",)):
    if not cfg["solver"]["converge_cutoff"] or cfg["solver"]["n_max"] is not None:
        return spec, None
    history: list = []
    dim_cap = cfg["solver"]["dim_cap"]
    method = cfg["solver"]["method"]

    def evaluate(s):
        res = steadystate(build(s, dim_cap), method)
        return {"n_mean": res.n_mean, "p_vac": res.p_vac, "t_eff": ex.t_eff(res.p_vac, s.omega_c)}

    spec = converge_cutoff(spec, targets, cfg["solver"]["rel_tol"], evaluate=evaluate, history=history)
    return spec, history


def _series_rows(ts, labels):
    cols = [ts.times] + [ts[label] for label in labels]
    return list(zip(*cols))


def run_spectroscopy(cfg, spec, jobs):
    deltas = _axis(cfg, "delta")
    axis2 = cfg["grids"]["axis2"]
    name = axis2["name"]
    if name not in ex.SPECTROSCOPY_AXES:
        raise ConfigError(f"spectroscopy axis2 must be one of {ex.SPECTROSCOPY_AXES}", "grids.axis2.name")
    second = _axis(cfg, "axis2")
    res = ex.spectroscopy_map(spec, mhz(deltas), name, _internal(name, second), jobs=jobs)
    rows = [(d, name, v, res.values[i, j]) for i, d in enumerate(deltas) for j, v in enumerate(second)]
    best = np.unravel_index(np.argmax(res.values), res.values.shape)
    summary = (f"max transfer = {fmt(res.values[best])} at delta = {fmt(deltas[best[0]])} MHz, "
               f"{name} = {fmt(second[best[1]])}")
    return rows, summary, {"n_max": res.metadata["n_max"], "method": "time-evolution"}


def run_rabi(cfg, spec, jobs):
    ts = ex.vacuum_rabi(spec, cfg["run"]["t_final_us"], cfg["run"]["n_points"])
    rows = _series_rows(ts, ["n", "p_vac", "p_g", "p_p", "p_s", "p_e"])
    peak, share = ex.spectral_peak(ts.times, ts["p_s"])
    summary = (f"P_s oscillation peak at {fmt(to_mhz(peak))} MHz holding {fmt(share)} of AC power, "
               f"{ex.count_oscillations(ts['p_s'])} resolvable oscillations")
    return rows, summary, {"n_max": spec.resolved_n_max(), "method": "time-evolution",
                           "diagnostics": ts.diagnostics}


def run_cool(cfg, spec, jobs):
    spec, history = _converged(cfg, spec)
    ts = ex.cooling_trace(spec, cfg["run"]["t_final_us"], cfg["run"]["n_points"])
    ss = steadystate(build(spec, cfg["solver"]["dim_cap"]), cfg["solver"]["method"])
    teff = ex.t_eff(ss.p_vac, spec.omega_c)
    tau = ex.relaxation_time(ts.times, ts["n"])
    rows = _series_rows(ts, ["n", "p_vac", "p_g", "p_p", "p_s", "p_e"])
    summary = (f"<n>_ss = {fmt(ss.n_mean)}, P_vac = {fmt(ss.p_vac)}, T_eff = {fmt(teff)} K, "
               f"1/e time = {fmt(tau)} us")
    return rows, summary, {"n_max": ss.converged_cutoff, "method": ss.method,
                           "cutoff_history": history, "steady_state": {
                               "n_mean": ss.n_mean, "p_vac": ss.p_vac, "t_eff_k": teff,
                               "residual": ss.residual}, "diagnostics": ts.diagnostics}


def run_teff_map(cfg, spec, jobs):
    a1, a2 = cfg["grids"].get("axis1"), cfg["grids"].get("axis2")
    v1, v2 = _axis(cfg, "axis1"), _axis(cfg, "axis2")
    n1, n2 = a1["name"], a2["name"]
    if n1 not in ex.TEFF_AXIS1:
        raise ConfigError(f"teff-map axis1 must be one of {ex.TEFF_AXIS1}", "grids.axis1.name")
    if n2 not in ex.TEFF_AXIS2:
        raise ConfigError(f"teff-map axis2 must be one of {ex.TEFF_AXIS2}", "grids.axis2.name")
    res = ex.teff_map(spec, n1, _internal(n1, v1), n2, _internal(n2, v2), jobs=jobs)
    rows = [(x, y, res.values[i, j]) for i, x in enumerate(v1) for j, y in enumerate(v2)]
    finite = res.values[np.isfinite(res.values)]
    low = fmt(finite.min()) if finite.size else "nan"
    summary = f"T_eff range {low}..{fmt(finite.max()) if finite.size else 'nan'} K over {res.values.size} cells"
    if res.metadata["missing"]:
        summary += f", {len(res.metadata['missing'])} failed"
    return rows, summary, {"axes": {"axis1": n1, "axis2": n2}, "missing": res.metadata["missing"],
                           "n_max": [c.get("n_max") for c in res.metadata["cells"]],
                           "method": "linear-solve"}


def run_optimize(cfg, spec, jobs):
    (lo1, hi1), (lo2, hi2) = cfg["run"]["bounds_mhz"]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ex.BoundaryWarning)
        res = ex.optimize_cooling(spec, ((mhz(lo1), mhz(hi1)), (mhz(lo2), mhz(hi2))),
                                  grid_points=cfg["run"]["grid_points"],
                                  objective=cfg["run"]["objective"], jobs=jobs)
    notes = [str(w.message) for w in caught if issubclass(w.category, ex.BoundaryWarning)]
    for note in notes:
        print(f"warning: {note}", file=sys.stderr)
    out = {
        "omega_drive_mhz": to_mhz(res.omega_drive),
        "omega_dress_mhz": to_mhz(res.omega_dress),
        "t_eff_k": res.t_eff,
        "n_mean": res.n_mean,
        "p_vac": res.p_vac,
        "objective": res.objective,
        "at_boundary": res.at_boundary,
        "n_evaluations": res.n_evaluations,
        "grid": {
            "omega_drive_mhz": to_mhz(res.grid.axes["omega_drive"]),
            "omega_dress_mhz": to_mhz(res.grid.axes["omega_dress"]),
            res.objective: res.grid.values,
        },
    }
    if cfg["run"]["detuning_map"]:
        d = _axis(cfg, "detuning")
        tuned = spec.with_(omega_drive=res.omega_drive, omega_dress=res.omega_dress)
        dm = ex.detuning_map(tuned, mhz(d), mhz(d), jobs=jobs)
        i, j = np.unravel_index(np.nanargmin(dm.values), dm.values.shape)
        out["detuning_map"] = {"delta_mhz": d, "delta_c_mhz": d, "t_eff_k": dm.values,
                               "minimum_mhz": [d[i], d[j]]}
    summary = (f"Omega/2pi = {fmt(out['omega_drive_mhz'])} MHz, Omega'/2pi = {fmt(out['omega_dress_mhz'])} MHz, "
               f"T_eff = {fmt(res.t_eff)} K, <n>_ss = {fmt(res.n_mean)}")
    return out, summary, {"n_max": res.diagnostics["n_max"], "method": "linear-solve",
                          "warnings": notes, "diagnostics": res.diagnostics}


def run_cooled_rabi(cfg, spec, jobs):
    res = ex.cooled_rabi(spec, cfg["run"]["t_final_us"], cfg["run"]["n_points"])
    keys = ["zero_k", "thermal", "cooled", "cooled_correlated"]
    rows = list(zip(res.times, *(res.p_s[k] for k in keys)))
    peak, share = res.spectra["cooled"]
    summary = (f"cooled cavity T_eff = {fmt(res.t_eff_cooled)} K, P_s peak at {fmt(to_mhz(peak))} MHz "
               f"({fmt(share)} of AC power), correlation effect {fmt(res.correlation_effect)}")
    return rows, summary, {"n_max": res.diagnostics["n_max"], "method": "linear-solve+time-evolution",
                           "spectra_mhz": {k: [to_mhz(p), s] for k, (p, s) in res.spectra.items()},
                           "oscillations": {k: ex.count_oscillations(v) for k, v in res.p_s.items()},
                           "correlation_effect": res.correlation_effect}


def run_cooled_spectroscopy(cfg, spec, jobs):
    deltas = _axis(cfg, "delta")
    res = ex.cooled_spectroscopy(spec, mhz(deltas), jobs=jobs)
    labels = res.axes["cavity"]
    rows = [(d, "cavity", lab, res.values[i, j]) for i, d in enumerate(deltas) for j, lab in enumerate(labels)]
    peaks = {lab: float(res.values[:, j].max()) for j, lab in enumerate(labels)}
    summary = ("peak transfer " + ", ".join(f"{k} {fmt(v)}" for k, v in peaks.items())
               + f" (cooled T_eff = {fmt(res.metadata['t_eff_cooled'])} K)")
    return rows, summary, {"n_max": res.metadata["n_max"], "method": "linear-solve+time-evolution",
                           "peaks": peaks}


def run_multiatom(cfg, spec, jobs):
    grid = _axis(cfg, "n_atoms")
    if np.any(grid != np.round(grid)) or grid.min() < 1:
        raise ConfigError("atom numbers must be integers >= 1", "grids.n_atoms")
    n_atoms = grid.astype(int)
    converge = cfg["solver"]["converge_cutoff"] and cfg["solver"]["n_max"] is None
    res = ex.multiatom_scan(spec, n_atoms, converge=converge, rel_tol=cfg["solver"]["rel_tol"],
                            dim_cap=cfg["solver"]["dim_cap"], jobs=jobs)
    rows = list(zip(n_atoms, res.values))
    summary = "T_eff = " + ", ".join(f"{fmt(v)} K (N={n})" for n, v in rows)
    extra = {"n_max": res.metadata["n_max"], "method": "linear-solve",
             "cutoff_history": [c["cutoff_history"] for c in res.metadata["cells"]]}
    if n_atoms.size >= 3:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ex.FitWarning)
                fit = ex.fit_exponential(n_atoms, res.values)
            extra["fit"] = {"t_inf_k": fit.t_inf, "alpha_k": fit.alpha, "n_c": fit.n_c,
                            "residual_norm": fit.residual_norm, "rank_deficient": fit.rank_deficient}
        except ConvergenceError as exc:
            extra["fit"] = {"error": str(exc)}
    return rows, summary, extra


def run_steadystate(cfg, spec, jobs):
    spec, history = _converged(cfg, spec)
    model = build(spec, cfg["solver"]["dim_cap"])
    res = steadystate(model, cfg["solver"]["method"])
    teff = ex.t_eff(res.p_vac, spec.omega_c)
    pops = {k: float(expect(op, res.rho_ss))
            for k, op in model.observables.items() if k.startswith("p_") and k != "p_vac"}
    out = {
        "n_mean": res.n_mean,
        "p_vac": res.p_vac,
        "t_eff_k": teff,
        "photon_distribution": res.photon_dist,
        "atomic_populations": pops,
        "residual": res.residual,
        "method": res.method,
        "n_max": res.converged_cutoff,
    }
    summary = f"<n>_ss = {fmt(res.n_mean)}, P_vac = {fmt(res.p_vac)}, T_eff = {fmt(teff)} K"
    return out, summary, {"n_max": res.converged_cutoff, "method": res.method,
                          "cutoff_history": history}


RUNNERS = {
    "spectroscopy": run_spectroscopy,
    "rabi": run_rabi,
    "cool": run_cool,
    "teff-map": run_teff_map,
    "optimize": run_optimize,
    "cooled-rabi": run_cooled_rabi,
    "cooled-spectroscopy": run_cooled_spectroscopy,
    "multiatom": run_multiatom,
    "steadystate": run_steadystate,
}


# ---------------------------------------------------------------------------
# driver


def execute(cfg: dict, out_path: Path, jobs: int | None) -> str:
    """Run a resolved config, write result and sidecar, return the summary line."""
    experiment = cfg["experiment"]
    spec = system_spec(cfg)
    result, summary, extra = RUNNERS[experiment](cfg, spec, jobs)
    fmt_name = cfg["output"]["format"]
    if experiment in CSV_HEADERS:
        text = render(CSV_HEADERS[experiment], result, fmt_name)
    else:
        text = dump_json(result)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(text, newline="")
    provenance = {
        "tool": "rydcav",
        "version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "system_spec": spec.to_dict(),
        "summary": summary,
        **extra,
    }
    meta = {"config": cfg, "provenance": provenance}
    Path(str(out_path) + ".meta.json").write_text(dump_json(meta))
    return summary


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rydcav", description="Rydberg atom / microwave cavity simulations")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("list", help="show the experiments and what they reproduce")

    def common(p):
        p.add_argument("--config", help="JSON config file (or a result .meta.json sidecar)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one value by dotted path, e.g. system.q_factor=1e4")
        p.add_argument("--out", help="result file (default: output.path or <experiment>.<format>)")
        p.add_argument("--format", choices=("csv", "json"), help="result format")
        p.add_argument("--jobs", type=int, help="worker processes for sweeps (default: $RYDCAV_JOBS or 1)")

    common(sub.add_parser("run", help="run the experiment named in the config"))
    for name in EXPERIMENTS:
        common(sub.add_parser(name, help=dict((n, w) for n, _, w in EXPERIMENT_TABLE)[name]))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "list":
        print(list_experiments())
        return EXIT_OK
    try:
        if args.jobs is not None and args.jobs < 1:
            raise ConfigError("must be >= 1", "--jobs")
        user = load_file(args.config) if args.config else {}
        overrides = list(args.set)
        if args.format:
            overrides.append(f"output.format={json.dumps(args.format)}")
        if args.out:
            overrides.append(f"output.path={json.dumps(args.out)}")
        experiment = None if args.command == "run" else args.command
        cfg = resolve(experiment, user, overrides)
        out = cfg["output"]["path"] or f"{cfg['experiment']}.{cfg['output']['format']}"
        summary = execute(cfg, Path(out), args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DimensionCapError as exc:
        print(f"dimension cap exceeded: {exc}", file=sys.stderr)
        return EXIT_CAP
    except ConvergenceError as exc:
        print(f"solver failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(summary)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
