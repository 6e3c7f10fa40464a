"""Reproducible protocols built on the model and solver layers.

Every sweep cell is one deterministic solve. Sweeps fan out over a process
pool when ``jobs > 1``; results are gathered in grid order, so serial and
parallel runs give identical arrays.
"""

from __future__ import annotations

import math
import os
import time as _time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize, signal

from .errors import ConvergenceError
from .model import DIM_CAP, H_OVER_KB, TWO_PI, SystemSpec, build, build_model, mhz, to_mhz
from .operators import DensityMatrix, HilbertDims, basis_projector, partial_trace, tensor, thermal_state
from .solver import TimeSeries, converge_cutoff, default_initial_state, mesolve, steadystate

# cooling optimum at the default configuration, used by the cooled protocols
OPTIMAL_DRIVE = mhz(14.5)
OPTIMAL_DRESS = mhz(17.6)


class BoundaryWarning(UserWarning):
    """An optimum sits on the edge of its search box."""


class FitWarning(UserWarning):
    """A least-squares fit is poorly conditioned."""


@dataclass
class SweepResult:
    axes: dict
    values: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        shape = tuple(len(v) for v in self.axes.values())
        if self.values.shape != shape:
            raise ValueError(f"values shape {self.values.shape} does not match axes {shape}")

    @property
    def axis_names(self) -> list:
        return list(self.axes)

    def cells(self):
        """Yield ``(axis values tuple, value)`` in C order."""
        grids = list(self.axes.values())
        for idx in np.ndindex(self.values.shape):
            yield tuple(g[i] for g, i in zip(grids, idx)), self.values[idx]


@dataclass
class FitResult:
    t_inf: float
    alpha: float
    n_c: float
    covariance: np.ndarray
    residual_norm: float
    rank_deficient: bool = False
    n_points: int = 0

    def predict(self, n_atoms) -> np.ndarray:
        return exp_model(np.asarray(n_atoms, dtype=float), self.t_inf, self.alpha, self.n_c)


@dataclass
class OptimizeResult:
    omega_drive: float
    omega_dress: float
    t_eff: float
    n_mean: float
    p_vac: float
    objective: str
    grid: SweepResult
    n_evaluations: int
    at_boundary: bool
    diagnostics: dict = field(default_factory=dict)


@dataclass
class CooledRabiResult:
    times: np.ndarray
    p_s: dict
    t_eff_cooled: float
    correlation_effect: float
    spectra: dict
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# worker pool


def default_jobs() -> int:
    env = os.environ.get("RYDCAV_JOBS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def pool_map(fn: Callable, items: Sequence, jobs: int | None = None) -> list:
    """``[fn(x) for x in items]``, optionally spread over processes."""
    jobs = default_jobs() if jobs is None else max(1, int(jobs))
    items = list(items)
    if jobs == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# effective temperature


def t_eff(p_vac_ss: float, omega_c: float) -> float:
    """Temperature of the thermal mode that has vacuum population ``p_vac_ss``.

    ``p = 1`` maps to 0 K; ``p = 0`` maps to ``inf`` with a warning. Values
    outside ``[0, 1]`` raise ``ValueError``.
    """
    p = float(p_vac_ss)
    if not 0.0 <= p <= 1.0 or math.isnan(p):
        raise ValueError(f"vacuum population must lie in [0, 1], got {p}")
    if omega_c <= 0:
        raise ValueError("omega_c must be positive")
    if p == 1.0:
        return 0.0
    if p == 0.0:
        warnings.warn("zero vacuum population corresponds to infinite temperature", RuntimeWarning)
        return math.inf
    nu_hz = omega_c / TWO_PI * 1e6
    return H_OVER_KB * nu_hz / -math.log1p(-p)


# ---------------------------------------------------------------------------
# spectroscopy


def _probe_model(spec: SystemSpec, n_max: int | None = None):
    if spec.scheme not in ("lambda", "xi"):
        raise ValueError(f"pulse spectroscopy needs the lambda or xi scheme, got {spec.scheme!r}")
    if n_max is not None:
        spec = spec.with_(n_max=n_max)
    return build_model(spec)


def pulse_transfer(spec: SystemSpec, delta: float, *, cavity_state: DensityMatrix | None = None) -> float:
    """Population removed from ``|g>`` by a pulse of area pi at detuning ``delta``.

    The cavity starts thermal at ``spec.temperature`` unless ``cavity_state``
    is given. Zero drive means nothing moves, so the result is 0.
    """
    if spec.omega_drive == 0:
        if spec.scheme not in ("lambda", "xi"):
            raise ValueError(f"pulse spectroscopy needs the lambda or xi scheme, got {spec.scheme!r}")
        return 0.0
    n_max = None if cavity_state is None else cavity_state.dims.total - 1
    model = _probe_model(spec.with_(delta=delta), n_max)
    if cavity_state is None:
        cavity_state = thermal_state(model.dims.factors[-1] - 1, spec.n_th)
    ground = DensityMatrix(HilbertDims((3,)), basis_projector(3, 0).to_dense())
    rho0 = tensor([ground, cavity_state])
    tau = math.pi / spec.omega_drive
    ts = mesolve(model, rho0, [0.0, tau], {"p_g": model.observables["p_g"]})
    return float(1.0 - ts["p_g"][-1])


def _transfer_cell(args):
    spec, delta, cavity = args
    return pulse_transfer(spec, delta, cavity_state=cavity)


SPECTROSCOPY_AXES = ("temperature", "q_factor")


def spectroscopy_map(spec: SystemSpec, delta_grid, axis2_name: str, axis2_values, *,
                     jobs: int | None = None) -> SweepResult:
    """Pulse transfer over ``delta_grid`` x ``axis2_values`` (temperature or Q)."""
    if axis2_name not in SPECTROSCOPY_AXES:
        raise ValueError(f"second axis must be one of {SPECTROSCOPY_AXES}, got {axis2_name!r}")
    deltas = np.asarray(delta_grid, dtype=float)
    second = np.asarray(axis2_values, dtype=float)
    if deltas.size == 0 or second.size == 0:
        raise ValueError("spectroscopy grids must be non-empty")
    cells, cutoffs = [], []
    for d in deltas:
        for v in second:
            cell_spec = spec.with_(**{axis2_name: float(v)})
            cells.append((cell_spec, float(d), None))
    for v in second:
        cutoffs.append(spec.with_(**{axis2_name: float(v)}).resolved_n_max())
    start = _time.time()
    out = pool_map(_transfer_cell, cells, jobs)
    values = np.array(out, dtype=float).reshape(deltas.size, second.size)
    meta = {"spec": spec.to_dict(), "n_max": cutoffs, "experiment": "spectroscopy",
            "started": start, "elapsed_s": _time.time() - start}
    return SweepResult({"delta": deltas, axis2_name: second}, values, meta)


# ---------------------------------------------------------------------------
# cooling


def cooling_trace(spec: SystemSpec, t_final: float, n_points: int = 201) -> TimeSeries:
    """Relaxation of ``<n>``, ``P_vac`` and the atomic populations from a thermal start."""
    if spec.scheme != "cool":
        raise ValueError("cooling_trace needs the cool scheme")
    if t_final <= 0:
        raise ValueError("t_final must be positive")
    model = build(spec)
    times = np.linspace(0.0, t_final, int(n_points))
    return mesolve(model, default_initial_state(model), times)


def relaxation_time(times, series) -> float:
    """First time the series has covered ``1 - 1/e`` of its total change."""
    times = np.asarray(times, dtype=float)
    y = np.asarray(series, dtype=float)
    change = y[-1] - y[0]
    if change == 0:
        return 0.0
    frac = (y - y[0]) / change
    hit = np.flatnonzero(frac >= 1.0 - math.exp(-1.0))
    if hit.size == 0:
        return math.nan
    k = int(hit[0])
    if k == 0:
        return float(times[0])
    # linear interpolation inside the crossing interval
    f0, f1 = frac[k - 1], frac[k]
    target = 1.0 - math.exp(-1.0)
    return float(times[k - 1] + (target - f0) / (f1 - f0) * (times[k] - times[k - 1]))


def steady_cell(spec: SystemSpec, dim_cap: int = DIM_CAP) -> dict:
    """Steady-state summary of one configuration.

    Solver failures come back as ``{"ok": False, ...}``; a dimension-cap
    violation is a configuration problem and is raised.
    """
    model = build(spec, dim_cap)
    try:
        res = steadystate(model)
    except ConvergenceError as exc:
        return {"ok": False, "error": str(exc), "diagnostics": getattr(exc, "diagnostics", {})}
    return {
        "ok": True,
        "n_mean": res.n_mean,
        "p_vac": res.p_vac,
        "t_eff": t_eff(res.p_vac, spec.omega_c),
        "n_max": res.converged_cutoff,
        "method": res.method,
        "residual": res.residual,
    }


def _grid_sweep(spec, name1, values1, name2, values2, setter, jobs, key="t_eff"):
    v1 = np.asarray(values1, dtype=float)
    v2 = np.asarray(values2, dtype=float)
    if v1.size == 0 or v2.size == 0:
        raise ValueError("sweep grids must be non-empty")
    specs = [setter(spec, a, b) for a in v1 for b in v2]
    start = _time.time()
    cells = pool_map(steady_cell, specs, jobs)
    values = np.full((v1.size, v2.size), np.nan)
    missing = []
    for k, cell in enumerate(cells):
        i, j = divmod(k, v2.size)
        if cell["ok"]:
            values[i, j] = cell[key]
        else:
            missing.append({"index": [i, j], "error": cell["error"]})
    meta = {"spec": spec.to_dict(), "missing": missing, "cells": cells,
            "started": start, "elapsed_s": _time.time() - start}
    return SweepResult({name1: v1, name2: v2}, values, meta)


TEFF_AXIS1 = ("g", "q_factor")
TEFF_AXIS2 = ("omega_drive", "temperature")


def _teff_setter(name1, name2):
    def setter(spec, a, b):
        changes = {name1: float(a)}
        if name2 == "omega_drive":
            changes.update(omega_drive=float(b), omega_dress=float(b))
        else:
            changes[name2] = float(b)
        return spec.with_(**changes)
    return setter


def teff_map(spec: SystemSpec, axis1_name: str, axis1_values, axis2_name: str, axis2_values, *,
             jobs: int | None = None) -> SweepResult:
    """Steady-state T_eff over two parameters.

    ``axis1`` is ``g`` or ``q_factor``; ``axis2`` is ``omega_drive`` (which
    sets both drive and dressing Rabi frequencies) or ``temperature``. Cells
    whose solve fails hold NaN and are listed in ``metadata["missing"]``.
    """
    if axis1_name not in TEFF_AXIS1:
        raise ValueError(f"axis1 must be one of {TEFF_AXIS1}, got {axis1_name!r}")
    if axis2_name not in TEFF_AXIS2:
        raise ValueError(f"axis2 must be one of {TEFF_AXIS2}, got {axis2_name!r}")
    res = _grid_sweep(spec, axis1_name, axis1_values, axis2_name, axis2_values,
                      _teff_setter(axis1_name, axis2_name), jobs)
    res.metadata["experiment"] = "teff-map"
    return res


def detuning_map(spec: SystemSpec, delta_values, delta_c_values, *, jobs: int | None = None) -> SweepResult:
    """Steady-state T_eff over drive detuning and cavity detuning."""
    res = _grid_sweep(spec, "delta", delta_values, "delta_c", delta_c_values,
                      lambda s, a, b: s.with_(delta=float(a), delta_c=float(b)), jobs)
    res.metadata["experiment"] = "detuning-map"
    return res


OBJECTIVES = ("n_mean", "t_eff")


def optimize_cooling(spec: SystemSpec, bounds=((mhz(1.0), mhz(30.0)), (mhz(1.0), mhz(30.0))), *,
                     grid_points: int = 11, objective: str = "n_mean", xatol_mhz: float = 1e-3,
                     jobs: int | None = None) -> OptimizeResult:
    """Best drive and dressing Rabi frequencies for cooling.

    An ``grid_points`` x ``grid_points`` scan over ``bounds`` (rad/us) picks the
    start for a bounded Nelder-Mead refinement. ``objective`` is the steady
    photon number (default) or T_eff. A :class:`BoundaryWarning` is emitted
    when the optimum sits on the box edge.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    (lo1, hi1), (lo2, hi2) = bounds
    if lo1 > hi1 or lo2 > hi2 or min(lo1, lo2) < 0:
        raise ValueError(f"invalid bounds {bounds}")
    n_max = spec.resolved_n_max()
    spec = spec.with_(n_max=n_max)
    axis1 = np.linspace(lo1, hi1, grid_points) if hi1 > lo1 else np.array([lo1])
    axis2 = np.linspace(lo2, hi2, grid_points) if hi2 > lo2 else np.array([lo2])
    grid = _grid_sweep(spec, "omega_drive", axis1, "omega_dress", axis2,
                       lambda s, a, b: s.with_(omega_drive=float(a), omega_dress=float(b)),
                       jobs, key=objective)
    grid.metadata["experiment"] = "optimize-grid"
    if np.all(np.isnan(grid.values)):
        raise ConvergenceError("every cell of the coarse optimization grid failed",
                               {"missing": grid.metadata["missing"]})
    i, j = np.unravel_index(np.nanargmin(grid.values), grid.values.shape)
    best = (float(axis1[i]), float(axis2[j]))
    n_evals = grid.values.size
    cache: dict = {}

    def evaluate(x_mhz):
        key = (round(float(x_mhz[0]), 12), round(float(x_mhz[1]), 12))
        if key not in cache:
            cache[key] = steady_cell(spec.with_(omega_drive=mhz(key[0]), omega_dress=mhz(key[1])))
        return cache[key]

    def cost(x_mhz):
        cell = evaluate(x_mhz)
        return cell[objective] if cell["ok"] else math.inf

    free = hi1 > lo1 or hi2 > lo2
    diag = {"grid_best_mhz": [to_mhz(best[0]), to_mhz(best[1])], "n_max": n_max}
    if free:
        box = [(to_mhz(lo1), to_mhz(hi1)), (to_mhz(lo2), to_mhz(hi2))]
        step = [max((b - a) / (grid_points - 1), 1e-9) if b > a else 0.0 for a, b in box]
        x0 = np.array([to_mhz(best[0]), to_mhz(best[1])])
        simplex = np.array([x0, x0 + [step[0] * 0.5, 0.0], x0 + [0.0, step[1] * 0.5]])
        for row in simplex:
            np.clip(row, [b[0] for b in box], [b[1] for b in box], out=row)
        res = optimize.minimize(cost, x0, method="Nelder-Mead", bounds=box,
                                options={"initial_simplex": simplex, "xatol": xatol_mhz,
                                         "fatol": 1e-9, "maxiter": 400})
        x = res.x
        diag.update(nelder_mead_iterations=int(res.nit), nelder_mead_message=str(res.message))
    else:
        x = np.array([to_mhz(best[0]), to_mhz(best[1])])
    cell = evaluate(x)
    if not cell["ok"]:
        raise ConvergenceError(f"steady state failed at the optimum: {cell['error']}")
    n_evals += len(cache)
    at_boundary = False
    for value, lo, hi in ((mhz(x[0]), lo1, hi1), (mhz(x[1]), lo2, hi2)):
        if hi > lo and min(value - lo, hi - value) <= 1e-3 * (hi - lo):
            at_boundary = True
    if at_boundary:
        warnings.warn(f"optimum ({x[0]:.3f}, {x[1]:.3f}) MHz lies on the search boundary",
                      BoundaryWarning)
    return OptimizeResult(
        omega_drive=mhz(float(x[0])),
        omega_dress=mhz(float(x[1])),
        t_eff=cell["t_eff"],
        n_mean=cell["n_mean"],
        p_vac=cell["p_vac"],
        objective=objective,
        grid=grid,
        n_evaluations=n_evals,
        at_boundary=at_boundary,
        diagnostics=diag,
    )


# ---------------------------------------------------------------------------
# cooled-cavity protocols


def cooled_cavity(spec: SystemSpec):
    """Steady state of the cooling model and its reduced cavity state."""
    if spec.scheme != "cool":
        raise ValueError("cooled-cavity protocols start from the cool scheme")
    res = steadystate(build_model(spec))
    return res, partial_trace(res.rho_ss, [1])


def spectral_peak(times, series, band: float = 0.1, pad: int = 16):
    """Dominant angular frequency of ``series`` and the AC power share near it.

    The mean is removed and a Hann window applied before a zero-padded FFT.
    Returns ``(omega_peak, fraction)`` where ``fraction`` is the power within
    ``+-band * omega_peak`` divided by the total power above DC.
    """
    times = np.asarray(times, dtype=float)
    y = np.asarray(series, dtype=float)
    dt = times[1] - times[0]
    if not np.allclose(np.diff(times), dt, rtol=1e-9, atol=1e-12):
        raise ValueError("spectral analysis needs a uniform time grid")
    y = (y - y.mean()) * np.hanning(y.size)
    n_fft = pad * y.size
    power = np.abs(np.fft.rfft(y, n_fft)) ** 2
    omega = TWO_PI * np.fft.rfftfreq(n_fft, dt)
    # skip the DC lobe of the window (width ~2 bins of the unpadded grid)
    ac = omega > 2.0 * TWO_PI / (times[-1] - times[0])
    if not ac.any() or power[ac].sum() == 0:
        return math.nan, 0.0
    k = np.flatnonzero(ac)[np.argmax(power[ac])]
    peak = float(omega[k])
    near = ac & (np.abs(omega - peak) <= band * peak)
    return peak, float(power[near].sum() / power[ac].sum())


def count_oscillations(series, prominence: float = 0.05) -> int:
    """Number of local maxima standing out by at least ``prominence``."""
    peaks, _ = signal.find_peaks(np.asarray(series, dtype=float), prominence=prominence)
    return int(peaks.size)


def _swap_g_s(n_levels: int) -> np.ndarray:
    u = np.eye(n_levels)
    u[[0, 2]] = u[[2, 0]]
    return u


def _rabi_series(spec, cavity: DensityMatrix, times, bath_temperature, atom_state=None, full=False):
    stage = spec.with_(omega_drive=0.0, omega_dress=0.0, temperature=bath_temperature,
                       n_max=cavity.dims.total - 1)
    model = build_model(stage)
    if atom_state is None:
        n = spec.n_levels
        atom = DensityMatrix(HilbertDims((n,)), basis_projector(n, 2).to_dense())
        rho0 = tensor([atom, cavity])
    else:
        rho0 = atom_state
    return mesolve(model, rho0, times, None if full else {"p_s": model.observables["p_s"]})


def cooled_rabi(spec: SystemSpec, t_final: float = 2.0, n_points: int = 801) -> CooledRabiResult:
    """Vacuum Rabi oscillations of an atom in ``|s>`` with three cavity preparations.

    ``zero_k``: empty cavity, zero-temperature bath. ``thermal``: cavity and
    bath at ``spec.temperature``. ``cooled``: cavity reduced state of the
    cooling steady state (atom-field correlations dropped), same bath,
    drives off. ``cooled_correlated`` applies a g<->s swap to
    the full cooling steady state instead, keeping the correlations; the
    largest pointwise difference between the two is ``correlation_effect``.
    """
    res, cavity = cooled_cavity(spec)
    n_max = cavity.dims.total - 1
    times = np.linspace(0.0, t_final, int(n_points))
    series, diags = {}, {}
    zero = DensityMatrix(cavity.dims, basis_projector(n_max + 1, 0).to_dense())
    thermal = thermal_state(n_max, spec.n_th)
    for label, cav, temp in (("zero_k", zero, 0.0), ("thermal", thermal, spec.temperature),
                             ("cooled", cavity, spec.temperature)):
        ts = _rabi_series(spec, cav, times, temp)
        series[label] = ts["p_s"]
        diags[label] = ts.diagnostics
    u = np.kron(_swap_g_s(spec.n_levels), np.eye(n_max + 1))
    swapped = u @ res.rho_ss.data @ u.T
    ts = _rabi_series(spec, cavity, times, spec.temperature, atom_state=swapped)
    series["cooled_correlated"] = ts["p_s"]
    diags["cooled_correlated"] = ts.diagnostics
    spectra = {k: spectral_peak(times, v) for k, v in series.items()}
    effect = float(np.max(np.abs(series["cooled"] - series["cooled_correlated"])))
    return CooledRabiResult(times, series, t_eff(res.p_vac, spec.omega_c), effect, spectra,
                            {"n_max": n_max, "runs": diags})


def vacuum_rabi(spec: SystemSpec, t_final: float = 2.0, n_points: int = 801) -> TimeSeries:
    """Atom in ``|s>`` with a thermal cavity at ``spec.temperature``, drives off."""
    if t_final <= 0:
        raise ValueError("t_final must be positive")
    n_max = spec.resolved_n_max()
    times = np.linspace(0.0, t_final, int(n_points))
    return _rabi_series(spec, thermal_state(n_max, spec.n_th), times, spec.temperature, full=True)


CAVITY_PREPARATIONS = ("zero_k", "cooled", "thermal")


def cooled_spectroscopy(spec: SystemSpec, delta_grid, *, probe_omega: float | None = None,
                        jobs: int | None = None) -> SweepResult:
    """Lambda pulse transfer with the cavity empty, actively cooled, or thermal.

    ``spec`` describes the cooling stage. The probe uses the lambda scheme
    with drive ``probe_omega`` (default ``g / 2``) and the same bath.
    """
    res, cavity = cooled_cavity(spec)
    n_max = cavity.dims.total - 1
    probe = spec.with_(scheme="lambda", omega_dress=0.0, delta_prime=0.0, n_max=n_max,
                       omega_drive=0.5 * spec.g if probe_omega is None else probe_omega)
    zero = DensityMatrix(cavity.dims, basis_projector(n_max + 1, 0).to_dense())
    preps = {
        "zero_k": (probe.with_(temperature=0.0), zero),
        "cooled": (probe, cavity),
        "thermal": (probe, thermal_state(n_max, spec.n_th)),
    }
    deltas = np.asarray(delta_grid, dtype=float)
    if deltas.size == 0:
        raise ValueError("delta grid must be non-empty")
    cells = [(preps[p][0], float(d), preps[p][1]) for d in deltas for p in CAVITY_PREPARATIONS]
    out = pool_map(_transfer_cell, cells, jobs)
    values = np.array(out, dtype=float).reshape(deltas.size, len(CAVITY_PREPARATIONS))
    meta = {"spec": spec.to_dict(), "probe": probe.to_dict(), "n_max": n_max,
            "t_eff_cooled": t_eff(res.p_vac, spec.omega_c), "experiment": "cooled-spectroscopy"}
    return SweepResult({"delta": deltas, "cavity": np.array(CAVITY_PREPARATIONS)}, values, meta)


# ---------------------------------------------------------------------------
# multi-atom scaling


MULTIATOM_REL_TOL = 5e-3


def _multiatom_cell(args):
    spec, converge, rel_tol, n_start, dim_cap = args
    history: list = []

    def evaluate(s):
        cell = steady_cell(s, dim_cap)
        if not cell["ok"]:
            raise ConvergenceError(cell["error"], cell["diagnostics"])
        return cell

    if converge:
        spec = converge_cutoff(spec, ("t_eff",), rel_tol, n_start=n_start, evaluate=evaluate,
                               history=history)
    cell = evaluate(spec)
    cell["cutoff_history"] = history
    return cell


def multiatom_scan(spec: SystemSpec, n_atoms_grid, *, converge: bool = True,
                   rel_tol: float = MULTIATOM_REL_TOL, n_start: int | None = None,
                   dim_cap: int = DIM_CAP, jobs: int | None = None) -> SweepResult:
    """Steady-state T_eff against atom number.

    With ``converge`` each point picks its own photon cutoff (see
    :func:`converge_cutoff`, target T_eff, tolerance ``rel_tol``) starting
    from ``n_start`` (default 8 for two or more atoms, the thermal heuristic
    for one). Otherwise ``spec.n_max`` (or the heuristic) is used as is.
    """
    grid = np.asarray(n_atoms_grid, dtype=int)
    if grid.size == 0 or grid.min() < 1:
        raise ValueError("atom-number grid must be non-empty with entries >= 1")
    jobs_list = []
    for n in grid:
        start = n_start if n_start is not None else (None if n == 1 else 8)
        jobs_list.append((spec.with_(n_atoms=int(n)), converge, rel_tol, start, dim_cap))
    t0 = _time.time()
    cells = pool_map(_multiatom_cell, jobs_list, jobs)
    values = np.array([c["t_eff"] for c in cells])
    meta = {"spec": spec.to_dict(), "cells": cells, "n_max": [c["n_max"] for c in cells],
            "experiment": "multiatom", "elapsed_s": _time.time() - t0}
    return SweepResult({"n_atoms": grid}, values, meta)


def exp_model(n, t_inf, alpha, n_c):
    return t_inf + alpha * np.exp(-n / n_c)


NC_STARTS = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0)


def fit_exponential(n_atoms, t_eff_values, *, starts: Sequence[float] = NC_STARTS) -> FitResult:
    """Least-squares fit of ``T_inf + alpha exp(-N / N_c)`` (Levenberg-Marquardt).

    Each fixed ``N_c`` start gets its linear parameters by ordinary least
    squares, then all three are refined together. The lowest-cost converged
    run wins. ``covariance`` is ``s^2 (J^T J)^-1`` with ``s^2`` the residual
    variance (zero degrees of freedom give a zero scale).
    """
    x = np.asarray(n_atoms, dtype=float)
    y = np.asarray(t_eff_values, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("n_atoms and t_eff must be 1-D arrays of equal length")
    if x.size < 3:
        raise ValueError("fit needs at least 3 points")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("fit data must be finite")

    def resid(p):
        return exp_model(x, *p) - y

    best = None
    for nc in starts:
        basis = np.column_stack([np.ones_like(x), np.exp(-x / nc)])
        lin, *_ = np.linalg.lstsq(basis, y, rcond=None)
        p0 = np.array([lin[0], lin[1], nc])
        try:
            sol = optimize.least_squares(resid, p0, method="lm", xtol=1e-15, ftol=1e-15,
                                         gtol=1e-15, max_nfev=20_000)
        except (ValueError, np.linalg.LinAlgError):
            continue
        if not np.all(np.isfinite(sol.x)) or sol.status <= 0 or sol.x[2] <= 0:
            continue
        if best is None or sol.cost < best.cost:
            best = sol
    if best is None:
        raise ConvergenceError("exponential fit did not converge from any start",
                               {"starts": list(starts)})
    t_inf, alpha, n_c = (float(v) for v in best.x)
    J = best.jac
    jtj = J.T @ J
    dof = x.size - 3
    s2 = 2.0 * best.cost / dof if dof > 0 else 0.0
    rank = np.linalg.matrix_rank(jtj)
    rank_deficient = rank < 3
    if rank_deficient:
        warnings.warn("exponential fit is rank deficient (alpha or N_c unidentifiable)", FitWarning)
        cov = s2 * np.linalg.pinv(jtj)
    else:
        cov = s2 * np.linalg.inv(jtj)
    return FitResult(t_inf, alpha, n_c, cov, float(np.linalg.norm(best.fun)), rank_deficient, x.size)
