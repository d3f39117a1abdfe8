"""Reference ODE solutions: Dormand-Prince 5(4) with mandatory breakpoints.

The right-hand sides of interest are only piecewise smooth in time (meal
onsets, infusion switches), so integration restarts at every breakpoint and
steps never cross one. At the right end of a smooth piece the right-hand side
is evaluated as a left limit, which matters for step-function inputs.
"""

from __future__ import annotations

import numpy as np

from .model import InputFunctions, OdeModel

__all__ = ["solve", "closed_form_insulin", "IntegrationError", "DEFAULT_TOL"]

DEFAULT_TOL = 1e-9

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


class IntegrationError(RuntimeError):
    pass


def _stages(f, t, y, h, k1, t_hi):
    k = np.empty((7, y.size))
    k[0] = k1
    for i in range(1, 7):
        ti = t + _C[i] * h
        if ti >= t_hi:
            ti = np.nextafter(t_hi, -np.inf)
        yi = y + h * (np.dot(_A[i], k[:i]) if i else 0.0)
        k[i] = f(ti, yi)
    return k


def _integrate_piece(f, t0, t1, y, stops, rtol, atol, fixed_steps, out, h0):
    """Advance from t0 to t1 (no breakpoint inside), recording at ``stops``."""
    t = t0
    k1 = f(t, y)
    if fixed_steps:
        n = max(1, int(np.ceil(fixed_steps * (t1 - t0))))
        targets = np.union1d(np.linspace(t0, t1, n + 1)[1:], stops)
        for tn in targets:
            k = _stages(f, t, y, tn - t, k1, t1)
            y = y + (tn - t) * (_B5 @ k)
            t = tn
            k1 = k[6] if tn < t1 else f(min(t, np.nextafter(t1, -np.inf)), y)
            if tn in stops:
                out[tn] = y.copy()
        return y, h0
    h = h0 if h0 else min(t1 - t0, 1.0)
    targets = list(stops) + [t1]
    ti = 0
    while t < t1:
        target = targets[ti]
        land = False
        if t + h >= target - 1e-12 * max(1.0, abs(target)):
            h_try = target - t
            land = True
        else:
            h_try = h
        if h_try < 1e-12 * max(1.0, abs(t)):
            raise IntegrationError(f"step size underflow at t={t:.6g}")
        k = _stages(f, t, y, h_try, k1, t1)
        y_new = y + h_try * (_B5 @ k)
        err = h_try * (_E @ k)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        en = float(np.max(np.abs(err) / scale))
        if en <= 1.0:
            t = target if land else t + h_try
            y = y_new
            k1 = k[6]
            if land:
                if ti < len(stops):
                    out[target] = y.copy()
                ti += 1
            fac = 5.0 if en == 0 else min(5.0, max(0.2, 0.9 * en ** -0.2))
            if not land:
                h = h_try * fac
            else:
                h = max(h, h_try * fac) if h_try < h else h_try * fac
        else:
            h = h_try * max(0.2, 0.9 * en ** -0.2)
        if not np.all(np.isfinite(y)):
            raise IntegrationError(f"non-finite state at t={t:.6g}")
    return y, h


def solve(model: OdeModel, theta, x0, grid, t0: float | None = None, rtol: float = DEFAULT_TOL,
          atol: float = DEFAULT_TOL, fixed_step: float | None = None, breakpoints=None) -> np.ndarray:
    """Trajectory of ``model`` at the sorted times ``grid`` (shape ``(len(grid), d)``).

    ``t0`` defaults to ``grid[0]``. Passing ``fixed_step`` switches to a
    non-adaptive scheme with at most that step length (used for order checks).
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0 or np.any(np.diff(grid) < 0):
        raise ValueError("grid must be a non-empty sorted 1-D array")
    t0 = float(grid[0]) if t0 is None else float(t0)
    if grid[0] < t0:
        raise ValueError("grid starts before t0")
    y = np.asarray(x0, dtype=float).copy()
    if y.shape != (model.n_states,) or not np.all(np.isfinite(y)):
        raise ValueError("x0 must be a finite vector with one entry per state")
    theta = np.asarray(theta, dtype=float)

    def f(t, yy):
        return model.rhs(yy[None, :], np.array([t]), theta)[0]

    T = float(grid[-1])
    br = model.breakpoints() if breakpoints is None else np.asarray(breakpoints, dtype=float)
    br = np.asarray(br, dtype=float)
    edges = np.unique(np.concatenate([[t0, T], br[(br > t0) & (br < T)]]))
    out = {}
    uniq = np.unique(grid)
    if uniq[0] == t0:
        out[t0] = y.copy()
    h = None
    per_unit = None if fixed_step is None else 1.0 / fixed_step
    for lo, hi in zip(edges[:-1], edges[1:]):
        stops = uniq[(uniq > lo) & (uniq < hi)]
        y, h = _integrate_piece(f, lo, hi, y, stops, rtol, atol, per_unit, out, h)
        out[hi] = y.copy()
    return np.stack([out[t] for t in grid])


def closed_form_insulin(c1: float, c2: float, schedule: InputFunctions, I0: float, t) -> np.ndarray:
    """Exact solution of ``dI/dt = -c1 I + c2 r(t)``, ``I(0) = I0``, for step-function ``r``."""
    if c1 <= 0:
        raise ValueError("c1 must be positive")
    t = np.asarray(t, dtype=float)
    out = I0 * np.exp(-c1 * t) + c2 * schedule.basal_rate * (1.0 - np.exp(-c1 * t)) / c1
    for b, e, r in schedule.segments:
        lo = np.minimum(t, max(b, 0.0))
        hi = np.minimum(t, e)
        contrib = (np.exp(-c1 * (t - hi)) - np.exp(-c1 * (t - lo))) / c1
        out = out + c2 * (r - schedule.basal_rate) * np.where(t > b, contrib, 0.0)
    return out
