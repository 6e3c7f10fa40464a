"""Dormand-Prince 5(4) integrator with PI step-size control.

Works on complex arrays of any shape. The caller may pass ``project`` to
post-process every accepted state (the solver uses it to re-Hermitize density
matrices) and ``on_output`` to observe the state at each requested time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError

# Butcher tableau (Hairer, Norsett & Wanner, table 5.2)
C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
E = B5 - B4

SAFETY = 0.9
BETA = 0.04
ALPHA = 0.2 - 0.75 * BETA
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0


@dataclass
class IntegratorStats:
    n_steps: int = 0
    n_rejected: int = 0
    n_rhs: int = 0
    last_step: float = 0.0
    min_step: float = np.inf
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {
            "n_steps": self.n_steps,
            "n_rejected": self.n_rejected,
            "n_rhs": self.n_rhs,
            "last_step": self.last_step,
            "min_step": self.min_step if np.isfinite(self.min_step) else None,
        }
        out.update(self.extra)
        return out


def _error_norm(err, y0, y1, rtol, atol):
    scale = atol + rtol * np.maximum(np.abs(y0), np.abs(y1))
    return float(np.sqrt(np.mean(np.abs(err / scale) ** 2)))


def _initial_step(f, t0, y0, f0, rtol, atol, stats):
    scale = atol + rtol * np.abs(y0)
    d0 = np.sqrt(np.mean(np.abs(y0 / scale) ** 2))
    d1 = np.sqrt(np.mean(np.abs(f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    y1 = y0 + h0 * f0
    f1 = f(t0 + h0, y1)
    stats.n_rhs += 1
    d2 = np.sqrt(np.mean(np.abs((f1 - f0) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1)


def fixed_step(f, y, h, t=0.0):
    """One Dormand-Prince step of size ``h`` without error control."""
    k = [None] * 6
    k[0] = f(t, y)
    for s in range(1, 6):
        k[s] = f(t + C[s] * h, y + h * sum(A[s][j] * k[j] for j in range(s) if A[s][j] != 0.0))
    return y + h * sum(B5[j] * k[j] for j in range(6) if B5[j] != 0.0)


def integrate(f, y0, times, *, rtol=1e-8, atol=1e-10, project=None,
              on_output=None, on_step=None, h_init=None, max_steps=10_000_000,
              stats=None):
    """Integrate ``dy/dt = f(t, y)`` hitting every entry of ``times`` exactly.

    Returns the final state. ``on_output(k, t, y)`` is called for every output
    time (including ``times[0]``); ``on_step(t, y)`` after every accepted step.
    Raises :class:`ConvergenceError` on step-size underflow.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0:
        raise ValueError("times must be a non-empty 1-D grid")
    if times.size > 1 and np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    stats = stats if stats is not None else IntegratorStats()
    y = np.array(y0, dtype=complex)
    t = float(times[0])
    if on_output is not None:
        on_output(0, t, y)
    if times.size == 1:
        return y
    k1 = f(t, y)
    stats.n_rhs += 1
    h = h_init if h_init else _initial_step(f, t, y, k1, rtol, atol, stats)
    err_prev = 1e-4
    k = [None] * 7
    for idx in range(1, times.size):
        t_target = float(times[idx])
        while t < t_target:
            if stats.n_steps + stats.n_rejected >= max_steps:
                raise ConvergenceError("maximum number of steps exceeded", stats.as_dict())
            remaining = t_target - t
            h_eff = min(h, remaining)
            if h_eff < 1e-14 * max(1.0, abs(t)):
                raise ConvergenceError(
                    f"step size underflow at t={t:.6g} (h={h_eff:.3e})",
                    {**stats.as_dict(), "t": t},
                )
            k[0] = k1
            for s in range(1, 7):
                acc = y + h_eff * sum(A[s][j] * k[j] for j in range(s) if A[s][j] != 0.0)
                k[s] = f(t + C[s] * h_eff, acc)
            stats.n_rhs += 6
            y_new = acc  # stage 7 argument equals the 5th-order solution
            err = h_eff * sum(E[j] * k[j] for j in range(7) if E[j] != 0.0)
            err_norm = _error_norm(err, y, y_new, rtol, atol)
            if err_norm <= 1.0:
                t = t + h_eff if h_eff < remaining else t_target
                if project is not None:
                    y_new = project(y_new)
                y = y_new
                k1 = k[6]
                stats.n_steps += 1
                stats.last_step = h_eff
                stats.min_step = min(stats.min_step, h_eff)
                if err_norm == 0.0:
                    factor = MAX_FACTOR
                else:
                    factor = SAFETY * err_norm ** -ALPHA * err_prev ** BETA
                    factor = min(MAX_FACTOR, max(MIN_FACTOR, factor))
                err_prev = max(err_norm, 1e-4)
                # a step shortened to land on an output time should not shrink h
                if h_eff == h or factor < 1.0:
                    h = h_eff * factor
                if on_step is not None:
                    on_step(t, y)
            else:
                stats.n_rejected += 1
                factor = max(MIN_FACTOR, SAFETY * err_norm ** -ALPHA)
                h = h_eff * factor
        if on_output is not None:
            on_output(idx, t, y)
    return y
