"""Simulation study: noisy replicates of the glucose-insulin model refitted
under several knot strategies.

Strategies are written as strings:

* ``fixed:K``  equally spaced knots giving ``K`` basis functions per state;
* ``best``     the equal-knot basis in ``omega`` with the smallest outer
  criterion F;
* ``free``     per-state free-knot search on the data (AICc).

Each replicate yields, per strategy, one ``theta_error`` row for every
parameter and one ``rmpe`` row. Replicate randomness comes from
``SeedSequence(seed).spawn(n_replicates)`` so results do not depend on the
number of worker processes.
"""

from __future__ import annotations

import io
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .bspline import equal_knot_vector
from .cascade import ObservationSet, fit_model
from .knots import KnotSearchConfig, search_knots
from .model import U_PER_HR_TO_MU_PER_MIN, GlucoseInsulinModel, InputFunctions
from .odesolve import solve

__all__ = [
    "DEFAULT_THETA",
    "StudyConfig",
    "SimulatedData",
    "StudyReport",
    "generate_protocol",
    "simulate_dataset",
    "run_replicate",
    "run_study",
    "parse_strategy",
    "CSV_COLUMNS",
    "SUMMARY_COLUMNS",
]

log = logging.getLogger(__name__)

DEFAULT_THETA = (2.08, -4.60, -7.99, -2.91, 0.08, 2.15, -0.07, 0.39, -0.03)
DEFAULT_OMEGA = (10, 20, 30, 40, 50, 60)
CSV_COLUMNS = ("replicate", "strategy", "quantity", "state", "value", "status")
SUMMARY_COLUMNS = ("strategy", "quantity", "state", "n_ok", "n_failed", "q1", "median", "q3")


def parse_strategy(text: str) -> tuple[str, int | None]:
    """``"fixed:10"`` -> ``("fixed", 10)``; ``"best"``/``"free"`` -> ``(name, None)``."""
    s = text.strip().lower()
    if s in ("best", "free"):
        return s, None
    if s.startswith("fixed:"):
        try:
            k = int(s[6:])
        except ValueError:
            raise ValueError(f"bad strategy {text!r}: K must be an integer") from None
        if k < 4:
            raise ValueError(f"bad strategy {text!r}: K must be at least 4")
        return "fixed", k
    raise ValueError(f"unknown strategy {text!r} (use fixed:K, best or free)")


@dataclass(frozen=True)
class StudyConfig:
    """Settings of the simulation study.

    The input magnitudes (bolus rates, initial state) are not dictated by the
    model and are chosen so that glucose stays roughly within 60-300 mg/dl.
    """

    theta: tuple = DEFAULT_THETA
    n_replicates: int = 20
    t_end: float = 360.0
    n_grid: int = 61
    variance: float = 25.0
    strategies: tuple = ("fixed:10", "best", "free")
    omega: tuple = DEFAULT_OMEGA
    free_k_min: int = 5
    free_k_max: int = 60
    knot_population: int = 40
    knot_generations: int = 60
    min_gap: float = 5.0
    meal_times: tuple = (30.0, 240.0)
    basal_u_per_hr: float = 0.5
    bolus_rates: tuple = (60.0, 40.0)
    bolus_minutes: float = 120.0
    x0: tuple = (120.0, 12.0)
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        for name in ("theta", "strategies", "omega", "meal_times", "bolus_rates", "x0"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "theta", tuple(float(v) for v in self.theta))
        object.__setattr__(self, "omega", tuple(int(v) for v in self.omega))
        if not self.variance >= 0:
            raise ValueError("variance must be nonnegative")
        if self.n_replicates < 1:
            raise ValueError("n_replicates must be at least 1")
        if self.n_grid < 2 or not self.t_end > 0:
            raise ValueError("grid needs at least two points on a positive horizon")
        if len(self.theta) != 5 + 2 * len(self.meal_times):
            raise ValueError(f"theta needs {5 + 2 * len(self.meal_times)} entries for {len(self.meal_times)} meals")
        if len(self.bolus_rates) not in (0, len(self.meal_times)):
            raise ValueError("give one bolus rate per meal (or none)")
        if len(self.x0) != 2:
            raise ValueError("x0 must hold initial glucose and insulin")
        if not self.strategies:
            raise ValueError("at least one strategy is required")
        for s in self.strategies:
            parse_strategy(s)
        if "best" in self.strategies and not self.omega:
            raise ValueError("strategy 'best' needs a non-empty omega")
        if self.jobs < 1:
            raise ValueError("jobs must be at least 1")

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, self.t_end, self.n_grid)

    def header_lines(self) -> list[str]:
        out = []
        for key, val in asdict(self).items():
            if key == "jobs":
                continue
            if isinstance(val, (tuple, list)):
                val = " ".join(_fmt(v) for v in val)
            else:
                val = _fmt(val)
            out.append(f"# {key}={val}")
        return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def generate_protocol(config: StudyConfig) -> InputFunctions:
    """Meals, basal infusion and one square-wave bolus starting at each meal."""
    basal = config.basal_u_per_hr * U_PER_HR_TO_MU_PER_MIN
    segs = [(m, m + config.bolus_minutes, r) for m, r in zip(config.meal_times, config.bolus_rates)]
    return InputFunctions(config.meal_times, tuple(segs), basal)


@dataclass
class SimulatedData:
    obs: ObservationSet
    truth: np.ndarray
    grid: np.ndarray


def simulate_dataset(theta, inputs: InputFunctions, grid, variance: float, seed, x0=(120.0, 12.0)) -> SimulatedData:
    """Exact (numerical) trajectory plus i.i.d. Gaussian noise on both states."""
    if variance < 0:
        raise ValueError("variance must be nonnegative")
    grid = np.asarray(grid, dtype=float)
    model = GlucoseInsulinModel(inputs)
    truth = solve(model, theta, x0, grid, t0=0.0)
    rng = np.random.default_rng(seed)
    y = truth + rng.normal(0.0, np.sqrt(variance), truth.shape)
    obs = ObservationSet.from_arrays([grid, grid], [y[:, 0], y[:, 1]])
    return SimulatedData(obs, truth, grid)


def _fit_rows(rep, label, fit, theta, truth, grid):
    if isinstance(fit, str):
        reason = "failed:" + fit.replace(",", ";").replace("\n", " ")
        rows = [(rep, label, "theta_error", f"theta{i + 1}", np.nan, reason) for i in range(len(theta))]
        rows.append((rep, label, "rmpe", "all", np.nan, reason))
        return rows
    status = "ok" if fit.converged else "flagged"
    err = fit.theta - np.asarray(theta)
    rows = [(rep, label, "theta_error", f"theta{i + 1}", float(e), status) for i, e in enumerate(err)]
    rmpe = float(np.sqrt(np.mean((fit.curves(grid) - truth) ** 2)))
    rows.append((rep, label, "rmpe", "all", rmpe, status))
    return rows


def _safe_fit(model, bases, obs):
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit, _, _ = fit_model(model, bases, obs)
        return fit
    except (ValueError, FloatingPointError, RuntimeError, np.linalg.LinAlgError) as exc:
        return f"{type(exc).__name__}: {exc}"


def run_replicate(config: StudyConfig, rep: int) -> list[tuple]:
    """All strategy rows for replicate ``rep`` (0-based)."""
    seq = np.random.SeedSequence(config.seed).spawn(config.n_replicates)[rep]
    noise_seed, knot_seed = seq.spawn(2)
    inputs = generate_protocol(config)
    model = GlucoseInsulinModel(inputs)
    data = simulate_dataset(config.theta, inputs, config.grid, config.variance, noise_seed, config.x0)
    domain = (0.0, float(config.t_end))
    strategies = [parse_strategy(s) for s in config.strategies]
    ks = sorted({k for kind, k in strategies if kind == "fixed"}
                | (set(config.omega) if any(kind == "best" for kind, _ in strategies) else set()))
    equal = {}
    for k in ks:
        kv = equal_knot_vector(k, domain)
        equal[k] = _safe_fit(model, [kv, kv], data.obs)
    rows = []
    for (kind, k), label in zip(strategies, config.strategies):
        if kind == "fixed":
            fit = equal[k]
        elif kind == "best":
            ok = {kk: equal[kk] for kk in config.omega if not isinstance(equal[kk], str)}
            fit = ok[min(ok, key=lambda kk: (ok[kk].F, kk))] if ok else "no equal-knot fit succeeded"
        else:
            fit = _free_fit(config, model, data, domain, knot_seed)
        rows.extend(_fit_rows(rep + 1, label.strip().lower(), fit, config.theta, data.truth, data.grid))
    return rows


def _free_fit(config, model, data, domain, knot_seed):
    seeds = knot_seed.generate_state(model.n_states)
    bases = []
    for j in range(model.n_states):
        cfg = KnotSearchConfig(k_min=config.free_k_min, k_max=config.free_k_max, population=config.knot_population,
                               generations=config.knot_generations, seed=int(seeds[j]), min_gap=config.min_gap)
        try:
            bases.append(search_knots(data.obs.times[j], data.obs.values[j], domain, cfg).knots)
        except ValueError as exc:
            return f"knot search: {exc}"
    return _safe_fit(model, bases, data.obs)


@dataclass
class StudyReport:
    config: StudyConfig
    rows: list = field(default_factory=list)

    @property
    def n_failed(self) -> int:
        return len({(r[0], r[1]) for r in self.rows if str(r[5]).startswith("failed")})

    @property
    def n_succeeded(self) -> int:
        return len({(r[0], r[1]) for r in self.rows if not str(r[5]).startswith("failed")})

    def values(self, strategy: str, quantity: str, state: str) -> np.ndarray:
        return np.array([r[4] for r in self.rows if r[1] == strategy and r[2] == quantity and r[3] == state
                         and not str(r[5]).startswith("failed")], dtype=float)

    def summary(self) -> list[tuple]:
        """Quartiles per strategy and quantity over successful replicates."""
        keys = []
        for r in self.rows:
            k = (r[1], r[2], r[3])
            if k not in keys:
                keys.append(k)
        out = []
        for strat, qty, state in keys:
            vals = self.values(strat, qty, state)
            n_all = sum(1 for r in self.rows if (r[1], r[2], r[3]) == (strat, qty, state))
            if qty == "theta_error":
                vals = np.abs(vals)
                qty = "abs_theta_error"
            q = np.quantile(vals, [0.25, 0.5, 0.75]) if vals.size else [np.nan] * 3
            out.append((strat, qty, state, int(vals.size), n_all - int(vals.size), *map(float, q)))
        return out

    def median(self, strategy: str, quantity: str, state: str = "all") -> float:
        vals = self.values(strategy, quantity, state)
        if quantity == "theta_error":
            vals = np.abs(vals)
        return float(np.median(vals)) if vals.size else np.nan

    def to_csv(self) -> str:
        buf = io.StringIO()
        for line in self.config.header_lines():
            buf.write(line + "\n")
        buf.write(",".join(CSV_COLUMNS) + "\n")
        for rep, strat, qty, state, val, status in self.rows:
            buf.write(f"{rep},{strat},{qty},{state},{_num(val)},{status}\n")
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(SUMMARY_COLUMNS) + "\n")
        for strat, qty, state, n_ok, n_fail, q1, med, q3 in self.summary():
            buf.write(f"{strat},{qty},{state},{n_ok},{n_fail},{_num(q1)},{_num(med)},{_num(q3)}\n")
        return buf.getvalue()


def _num(v) -> str:
    v = float(v)
    return "nan" if np.isnan(v) else repr(v)


def _replicate_job(args):
    config, rep = args
    return run_replicate(config, rep)


def run_study(config: StudyConfig) -> StudyReport:
    """Run every replicate (in parallel when ``config.jobs > 1``) and collect rows in replicate order."""
    jobs = [(config, r) for r in range(config.n_replicates)]
    if config.jobs > 1 and config.n_replicates > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(_replicate_job, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_replicate_job(job))
            log.info("replicate %d/%d done", job[1] + 1, config.n_replicates)
    rows = [row for rep_rows in results for row in rep_rows]
    return StudyReport(config, rows)
