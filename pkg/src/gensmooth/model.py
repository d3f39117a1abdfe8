"""ODE right-hand sides with analytic partials, and the T1DM glucose-insulin model.

Every model evaluates on a batch of points: ``x`` has shape ``(n, d)`` and
``t`` shape ``(n,)``. Partials are returned in a :class:`Partials` record with
the layout

=========  ==============  =====================================
field      shape           meaning
=========  ==============  =====================================
f          (n, d)          f_k
fx         (n, d, d)       df_k/dx_i
ftheta     (n, d, p)       df_k/dtheta_a
fxx        (n, d, d, d)    d2f_k/dx_i dx_j
fxtheta    (n, d, d, p)    d2f_k/dx_i dtheta_a
fxxx       (n, d, d, d, d) d3f_k/dx_i dx_j dx_m
=========  ==============  =====================================

Units follow the clinical convention: minutes, mg/dl for glucose, mU/l for
insulin and mU/min for infusion rates.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "InputFunctions",
    "Partials",
    "OdeModel",
    "FunctionModel",
    "LinearModel",
    "GlucoseInsulinModel",
    "NaturalParams",
    "DerivedQuantities",
    "meal_ramp",
    "infusion_rate",
    "to_natural",
    "derived_quantities",
    "read_schedule_csv",
    "check_partials",
    "U_PER_HR_TO_MU_PER_MIN",
    "EUGLYCEMIC_GLUCOSE",
]

U_PER_HR_TO_MU_PER_MIN = 1000.0 / 60.0
EUGLYCEMIC_GLUCOSE = 80.0


def meal_ramp(t, t_meal):
    """Time since meal start, zero before the meal: ``max(t - t_meal, 0)``."""
    return np.maximum(np.asarray(t, dtype=float) - t_meal, 0.0)


@dataclass(frozen=True)
class InputFunctions:
    """Meal start times and the insulin infusion schedule.

    ``segments`` are half-open ``[start, end)`` intervals with their own rate
    (the total rate during the segment); outside every segment the infusion
    runs at ``basal_rate``.
    """

    meal_times: tuple[float, ...] = ()
    segments: tuple[tuple[float, float, float], ...] = ()
    basal_rate: float = 0.0

    def __post_init__(self):
        segs = tuple((float(s), float(e), float(r)) for s, e, r in self.segments)
        for s, e, r in segs:
            if not e > s:
                raise ValueError(f"infusion segment [{s}, {e}) is empty")
            if r < 0:
                raise ValueError("infusion rates must be nonnegative")
        for (s0, e0, _), (s1, _, _) in zip(segs, segs[1:]):
            if s1 < e0:
                raise ValueError("infusion segments must be sorted and non-overlapping")
        if self.basal_rate < 0:
            raise ValueError("basal rate must be nonnegative")
        object.__setattr__(self, "segments", segs)
        object.__setattr__(self, "meal_times", tuple(float(m) for m in self.meal_times))

    def infusion(self, t) -> np.ndarray:
        return infusion_rate(t, self)

    def meal_inputs(self, t) -> np.ndarray:
        """Array of shape ``(n, n_meals)`` with the ramps ``(t - t_meal)_+``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if not self.meal_times:
            return np.zeros((t.shape[0], 0))
        return np.stack([meal_ramp(t, m) for m in self.meal_times], axis=1)

    def breakpoints(self) -> np.ndarray:
        """Times at which some input is not smooth."""
        pts = list(self.meal_times)
        for s, e, _ in self.segments:
            pts.extend((s, e))
        return np.unique(np.asarray(pts, dtype=float))


def infusion_rate(t, schedule: InputFunctions) -> np.ndarray:
    """Piecewise-constant infusion rate r(t) in mU/min."""
    t = np.asarray(t, dtype=float)
    out = np.full(t.shape, float(schedule.basal_rate))
    for s, e, r in schedule.segments:
        out = np.where((t >= s) & (t < e), r, out)
    return out


def read_schedule_csv(path) -> tuple[tuple[float, float, float], ...]:
    """Read ``start_min,end_min,rate_mU_per_min`` rows."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = ("start_min", "end_min", "rate_mU_per_min")
        missing = [c for c in need if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append(tuple(float(row[c]) for c in need))
            except (TypeError, ValueError):
                raise ValueError(f"{path}: non-numeric value on line {lineno}") from None
    return tuple(rows)


@dataclass
class Partials:
    f: np.ndarray
    fx: np.ndarray
    ftheta: np.ndarray
    fxx: np.ndarray
    fxtheta: np.ndarray
    fxxx: np.ndarray


class OdeModel:
    """Base class for ``dx/dt = f(x, u(t), t, theta)``.

    Subclasses implement :meth:`rhs`; :meth:`partials` defaults to central
    finite differences, which is adequate for prototyping but slower and
    less accurate than analytic partials.
    """

    n_states: int
    n_params: int
    state_names: tuple[str, ...] = ()
    param_names: tuple[str, ...] = ()
    fd_step = 1e-6

    def rhs(self, x, t, theta) -> np.ndarray:
        raise NotImplementedError

    def breakpoints(self) -> np.ndarray:
        return np.empty(0)

    def theta_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Box on the internal parameters used to safeguard the optimizers."""
        return np.full(self.n_params, -np.inf), np.full(self.n_params, np.inf)

    def _prep(self, x, t, theta):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        theta = np.asarray(theta, dtype=float)
        if x.shape[1] != self.n_states:
            raise ValueError(f"expected {self.n_states} states, got {x.shape[1]}")
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {theta.shape}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(theta))):
            raise FloatingPointError("non-finite state or parameter")
        return x, t, theta

    def partials(self, x, t, theta) -> Partials:
        x, t, theta = self._prep(x, t, theta)
        return _fd_partials(self.rhs, x, t, theta, self.fd_step)


def _fd_jac_x(fun, x, t, theta, h):
    base = fun(x, t, theta)
    cols = []
    for i in range(x.shape[1]):
        step = h * np.maximum(1.0, np.abs(x[:, i]))
        xp, xm = x.copy(), x.copy()
        xp[:, i] += step
        xm[:, i] -= step
        diff = fun(xp, t, theta) - fun(xm, t, theta)
        cols.append(diff / (2 * step.reshape((-1,) + (1,) * (base.ndim - 1))))
    return np.stack(cols, axis=-1)


def _fd_jac_theta(fun, x, t, theta, h):
    cols = []
    for a in range(theta.shape[0]):
        step = h * max(1.0, abs(theta[a]))
        tp, tm = theta.copy(), theta.copy()
        tp[a] += step
        tm[a] -= step
        cols.append((fun(x, t, tp) - fun(x, t, tm)) / (2 * step))
    return np.stack(cols, axis=-1)


def _fd_partials(rhs, x, t, theta, h) -> Partials:
    f = rhs(x, t, theta)

    def fx_fun(xx, tt, th):
        return _fd_jac_x(rhs, xx, tt, th, h)

    fx = fx_fun(x, t, theta)
    ftheta = _fd_jac_theta(rhs, x, t, theta, h)
    hh = h ** 0.5 * 1e-1

    def fxx_fun(xx, tt, th):
        return _fd_jac_x(fx_fun, xx, tt, th, hh)

    fxx = fxx_fun(x, t, theta)
    fxtheta = _fd_jac_theta(fx_fun, x, t, theta, hh)
    # third derivatives only feed the outer-criterion gradient; coarse is fine
    fxxx = _fd_jac_x(fxx_fun, x, t, theta, 1e-2)
    return Partials(f, fx, ftheta, fxx, fxtheta, fxxx)


class FunctionModel(OdeModel):
    """Wrap a user callable ``rhs(x, t, theta)`` (batched) as a model.

    ``partials`` may be supplied as a callable returning :class:`Partials`;
    otherwise finite differences are used.
    """

    def __init__(
        self,
        rhs: Callable,
        n_states: int,
        n_params: int,
        partials: Callable | None = None,
        breakpoints: Sequence[float] = (),
        state_names: Sequence[str] = (),
        validate_at: tuple | None = None,
    ):
        self._rhs = rhs
        self._partials = partials
        self.n_states = n_states
        self.n_params = n_params
        self._breaks = np.asarray(breakpoints, dtype=float)
        self.state_names = tuple(state_names) or tuple(f"x{i + 1}" for i in range(n_states))
        if partials is not None and validate_at is not None:
            err = check_partials(self, *validate_at)
            if err > 1e-4:
                raise ValueError(f"supplied partials disagree with finite differences (max rel. error {err:.2e})")

    def rhs(self, x, t, theta):
        x, t, theta = self._prep(x, t, theta)
        return np.asarray(self._rhs(x, t, theta), dtype=float).reshape(x.shape)

    def partials(self, x, t, theta):
        if self._partials is None:
            return super().partials(x, t, theta)
        x, t, theta = self._prep(x, t, theta)
        return self._partials(x, t, theta)

    def breakpoints(self):
        return self._breaks


class LinearModel(OdeModel):
    """``dx/dt = A(theta) x + b(t)`` where ``A`` is linear in ``theta``.

    ``A_terms`` has shape ``(p, d, d)``; ``A(theta) = sum_a theta_a A_terms[a]``.
    ``forcing`` is an optional callable ``t -> (n, d)``. Used mainly as a
    test-bed where the profiled problem has closed-form structure.
    """

    def __init__(self, A_terms, forcing: Callable | None = None, breakpoints: Sequence[float] = ()):
        self.A_terms = np.asarray(A_terms, dtype=float)
        self.n_params, self.n_states, _ = self.A_terms.shape
        self.forcing = forcing
        self._breaks = np.asarray(breakpoints, dtype=float)
        self.state_names = tuple(f"x{i + 1}" for i in range(self.n_states))

    @classmethod
    def decay(cls) -> "LinearModel":
        """Scalar ``dx/dt = -theta x``."""
        return cls(-np.ones((1, 1, 1)))

    def _b(self, t):
        if self.forcing is None:
            return 0.0
        return np.asarray(self.forcing(t), dtype=float).reshape(t.shape[0], self.n_states)

    def rhs(self, x, t, theta):
        x, t, theta = self._prep(x, t, theta)
        A = np.tensordot(theta, self.A_terms, axes=1)
        return x @ A.T + self._b(t)

    def partials(self, x, t, theta):
        x, t, theta = self._prep(x, t, theta)
        n, d = x.shape
        A = np.tensordot(theta, self.A_terms, axes=1)
        f = x @ A.T + self._b(t)
        fx = np.broadcast_to(A, (n, d, d)).copy()
        # df_k/dtheta_a = sum_i A_terms[a, k, i] x_i
        ftheta = np.einsum("aki,ni->nka", self.A_terms, x)
        fxtheta = np.broadcast_to(np.transpose(self.A_terms, (1, 2, 0)), (n, d, d, self.n_params)).copy()
        return Partials(f, fx, ftheta, np.zeros((n, d, d, d)), fxtheta, np.zeros((n, d, d, d, d)))

    def breakpoints(self):
        return self._breaks


@dataclass(frozen=True)
class NaturalParams:
    b0: float
    b1: float
    b2: float
    c1: float
    c2: float
    mu: tuple[float, ...] = ()
    nu: tuple[float, ...] = ()
    meal_times: tuple[float, ...] = field(default=())

    def as_dict(self) -> dict:
        out = {k: getattr(self, k) for k in ("b0", "b1", "b2", "c1", "c2")}
        for i, (m, n) in enumerate(zip(self.mu, self.nu), start=1):
            out[f"mu{i}"] = m
            out[f"nu{i}"] = n
        return out


def _sign(v):
    # subgradient of |v| with sign(0) = 0
    return np.sign(v)


class GlucoseInsulinModel(OdeModel):
    """Glucose-insulin dynamics of a T1DM subject on IV insulin.

    State ``x = (G, I)``; parameter layout ``theta = (theta1..theta5,
    theta6, theta7, ...)`` with one ``(amplitude, rate)`` pair per meal:

        dG/dt = th1 - e^th2 G - e^th3 G I + sum_i |a_i| u_i exp(-|c_i| u_i)
        dI/dt = -e^th4 I + th5 r(t)

    where ``u_i = (t - t_meal_i)_+``. With two meals this is the usual
    9-parameter form.
    """

    state_names = ("glucose", "insulin")

    def __init__(self, inputs: InputFunctions):
        self.inputs = inputs
        self.n_meals = len(inputs.meal_times)
        self.n_states = 2
        self.n_params = 5 + 2 * self.n_meals
        self.param_names = tuple(f"theta{i + 1}" for i in range(self.n_params))

    def breakpoints(self):
        return self.inputs.breakpoints()

    def _meal_terms(self, t, theta):
        u = self.inputs.meal_inputs(t)  # (n, L)
        amp = theta[5::2]
        rate = theta[6::2]
        e = np.exp(-np.abs(rate)[None, :] * u)
        return u, amp, rate, e

    def rhs(self, x, t, theta):
        x, t, theta = self._prep(x, t, theta)
        G, I = x[:, 0], x[:, 1]
        u, amp, rate, e = self._meal_terms(t, theta)
        r = self.inputs.infusion(t)
        f1 = theta[0] - np.exp(theta[1]) * G - np.exp(theta[2]) * G * I + (np.abs(amp)[None, :] * u * e).sum(axis=1)
        f2 = -np.exp(theta[3]) * I + theta[4] * r
        return np.stack([f1, f2], axis=1)

    def partials(self, x, t, theta):
        x, t, theta = self._prep(x, t, theta)
        n = x.shape[0]
        p = self.n_params
        G, I = x[:, 0], x[:, 1]
        e2, e3, e4 = np.exp(theta[1]), np.exp(theta[2]), np.exp(theta[3])
        u, amp, rate, e = self._meal_terms(t, theta)
        r = self.inputs.infusion(t)

        f = np.empty((n, 2))
        f[:, 0] = theta[0] - e2 * G - e3 * G * I + (np.abs(amp)[None, :] * u * e).sum(axis=1)
        f[:, 1] = -e4 * I + theta[4] * r

        fx = np.zeros((n, 2, 2))
        fx[:, 0, 0] = -e2 - e3 * I
        fx[:, 0, 1] = -e3 * G
        fx[:, 1, 1] = -e4

        ft = np.zeros((n, 2, p))
        ft[:, 0, 0] = 1.0
        ft[:, 0, 1] = -e2 * G
        ft[:, 0, 2] = -e3 * G * I
        ft[:, 0, 5::2] = _sign(amp)[None, :] * u * e
        ft[:, 0, 6::2] = -np.abs(amp)[None, :] * _sign(rate)[None, :] * u * u * e
        ft[:, 1, 3] = -e4 * I
        ft[:, 1, 4] = r

        fxx = np.zeros((n, 2, 2, 2))
        fxx[:, 0, 0, 1] = -e3
        fxx[:, 0, 1, 0] = -e3

        fxt = np.zeros((n, 2, 2, p))
        fxt[:, 0, 0, 1] = -e2
        fxt[:, 0, 0, 2] = -e3 * I
        fxt[:, 0, 1, 2] = -e3 * G
        fxt[:, 1, 1, 3] = -e4
        return Partials(f, fx, ft, fxx, fxt, np.zeros((n, 2, 2, 2, 2)))

    def to_natural(self, theta) -> NaturalParams:
        return to_natural(theta, self.inputs.meal_times)

    def theta_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        # log-scale rates stay within physically meaningful orders of magnitude
        lo = [-50.0, -12.0, -18.0, -8.0, -5.0] + [-20.0] * (2 * self.n_meals)
        hi = [50.0, 1.0, 0.0, 1.0, 5.0] + [20.0] * (2 * self.n_meals)
        return np.array(lo), np.array(hi)

    def start_candidates(self) -> list[np.ndarray]:
        """Generic physiological starting points for gradient matching.

        Natural-scale values are typical orders of magnitude for T1DM
        subjects; several meal-absorption rates and clearance rates are tried
        because those enter nonlinearly.
        """
        out = []
        for rate in (0.01, 0.05, 0.2):
            for c1 in (0.02, 0.1):
                meals = [1.0, rate] * self.n_meals
                out.append(from_natural(1.0, 0.01, 1e-4, c1, 0.05, meals[0::2], meals[1::2]))
        return out


def to_natural(theta, meal_times: Sequence[float] = ()) -> NaturalParams:
    """Map the internal parameter vector to physiological parameters."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape[0] < 5 or (theta.shape[0] - 5) % 2:
        raise ValueError("theta must have 5 + 2 * n_meals entries")
    return NaturalParams(
        b0=float(theta[0]),
        b1=float(np.exp(theta[1])),
        b2=float(np.exp(theta[2])),
        c1=float(np.exp(theta[3])),
        c2=float(theta[4]),
        mu=tuple(float(abs(v)) for v in theta[5::2]),
        nu=tuple(float(-abs(v)) for v in theta[6::2]),
        meal_times=tuple(meal_times),
    )


def from_natural(b0, b1, b2, c1, c2, mu=(), nu=()) -> np.ndarray:
    """Inverse of :func:`to_natural` (amplitudes positive, rates negative)."""
    th = [b0, np.log(b1), np.log(b2), np.log(c1), c2]
    for m, v in zip(mu, nu):
        th.extend((abs(m), -abs(v)))
    return np.asarray(th, dtype=float)


@dataclass(frozen=True)
class DerivedQuantities:
    mcr: float
    basal_insulin: float
    basal_rate_mU_per_min: float
    basal_rate_U_per_hr: float
    needs_basal: bool

    def as_dict(self) -> dict:
        return {
            "MCR_ml_per_kg_min": self.mcr,
            "I_b_mU_per_l": self.basal_insulin,
            "r_b_mU_per_min": self.basal_rate_mU_per_min,
            "r_b_U_per_hr": self.basal_rate_U_per_hr,
            "needs_basal": self.needs_basal,
        }


def derived_quantities(params: NaturalParams, weight_kg: float, glucose_basal: float = EUGLYCEMIC_GLUCOSE) -> DerivedQuantities:
    """Metabolic clearance rate and basal insulin requirement.

    MCR is ``c1`` times the distribution volume ``1000 / c2`` (ml) per kg.
    The basal insulin level holds glucose at ``glucose_basal`` in the absence
    of meals; the basal infusion rate then keeps insulin at that level.
    ``needs_basal`` is False when endogenous balance alone already gives
    glucose at or below the target (``b0 <= b1 * G_b``).
    """
    if weight_kg <= 0:
        raise ValueError("weight must be positive")
    if params.c1 <= 0 or params.c2 <= 0 or params.b2 <= 0:
        raise ValueError("c1, c2 and b2 must be positive")
    mcr = 1000.0 * params.c1 / (params.c2 * weight_kg)
    num = params.b0 - params.b1 * glucose_basal
    ib = num / (params.b2 * glucose_basal)
    rb = params.c1 * ib / params.c2
    return DerivedQuantities(mcr, ib, rb, rb * 60.0 / 1000.0, bool(num > 0))


def check_partials(model: OdeModel, x, t, theta, rtol: float = 1e-5, h: float = 1e-6) -> float:
    """Largest relative mismatch between a model's partials and finite differences."""
    x, t, theta = model._prep(x, t, theta)
    ana = model.partials(x, t, theta)
    num = _fd_partials(model.rhs, x, t, theta, h)
    worst = 0.0
    for name in ("f", "fx", "ftheta", "fxx", "fxtheta"):
        a, b = getattr(ana, name), getattr(num, name)
        scale = np.maximum(1.0, np.abs(b))
        worst = max(worst, float(np.max(np.abs(a - b) / scale)))
    return worst
