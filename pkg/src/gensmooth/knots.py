"""Free-knot selection for least-squares B-spline fits, and knot-set pooling.

Knot sets are scored by AICc (default) or GCV of the least-squares spline
fit on the data alone. The search is a small genetic algorithm over knot
sets of varying size, followed by a Nelder-Mead polish of the positions of
the best set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from .bspline import KnotVector, design_matrix, make_knot_vector

__all__ = [
    "KnotSearchConfig",
    "FixedKnotFit",
    "SearchResult",
    "fit_fixed_knots",
    "search_knots",
    "merge_knot_sets",
    "criterion_value",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class KnotSearchConfig:
    k_min: int = 5
    k_max: int = 60
    criterion: str = "aicc"
    population: int = 40
    generations: int = 60
    seed: int = 0
    min_gap: float = 5.0
    degree: int = 3
    polish: bool = True

    def __post_init__(self):
        if not 1 <= self.k_min <= self.k_max:
            raise ValueError("need 1 <= k_min <= k_max")
        if self.min_gap < 0:
            raise ValueError("min_gap must be nonnegative")
        if self.criterion not in ("aicc", "gcv"):
            raise ValueError("criterion must be 'aicc' or 'gcv'")
        if self.population < 4 or self.generations < 1:
            raise ValueError("population must be >= 4 and generations >= 1")


@dataclass
class FixedKnotFit:
    coefs: np.ndarray
    rss: float
    df: int
    aicc: float
    gcv: float
    rank_deficient: bool = False

    def value(self, criterion: str) -> float:
        return self.aicc if criterion == "aicc" else self.gcv


def _rss_floor(y: np.ndarray) -> float:
    # residuals below rounding level carry no information; keeps log(RSS) finite
    scale = max(1.0, float(np.sqrt(np.mean(y * y))))
    return y.size * (1e-12 * scale) ** 2


def criterion_value(rss: float, n: int, df: int, criterion: str = "aicc") -> float:
    """AICc ``n log(RSS/n) + 2 df n/(n - df - 1)`` or GCV ``n RSS/(n - df)^2``."""
    if criterion == "aicc":
        if n - df - 1 <= 0:
            raise ValueError(f"AICc undefined for n={n}, df={df} (n - df - 1 <= 0)")
        return n * np.log(rss / n) + 2.0 * df * n / (n - df - 1)
    if n - df <= 0:
        raise ValueError(f"GCV undefined for n={n}, df={df}")
    return n * rss / (n - df) ** 2


def fit_fixed_knots(t, y, knots: KnotVector) -> FixedKnotFit:
    """Least-squares spline on fixed knots with its AICc and GCV scores.

    Raises:
        ValueError: if there are more basis functions than data points or the
            AICc denominator is not positive.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    n, K = y.size, knots.n_basis
    if K > n:
        raise ValueError(f"{K} basis functions for {n} data points")
    if n - K - 1 <= 0:
        raise ValueError(f"AICc undefined for n={n}, df={K} (n - df - 1 <= 0)")
    B = design_matrix(knots, t).values
    coefs, _, rank, sv = linalg.lstsq(B, y, lapack_driver="gelsd")
    deficient = rank < K or sv[-1] <= 1e-10 * sv[0]
    if deficient:
        A = B.T @ B
        A = A + 1e-10 * np.trace(A) / K * np.eye(K)
        coefs = linalg.solve(A, B.T @ y, assume_a="pos")
    r = y - B @ coefs
    rss = max(float(r @ r), _rss_floor(y))
    return FixedKnotFit(coefs, rss, K, criterion_value(rss, n, K, "aicc"), criterion_value(rss, n, K, "gcv"),
                        bool(deficient))


@dataclass
class SearchResult:
    knots: KnotVector
    value: float
    fit: FixedKnotFit
    history: list = field(default_factory=list)


class _Scorer:
    def __init__(self, t, y, domain, cfg: KnotSearchConfig):
        self.t, self.y, self.domain, self.cfg = t, y, domain, cfg
        self.cache: dict = {}

    def feasible(self, knots: np.ndarray) -> bool:
        a, b = self.domain
        if knots.size and (knots[0] <= a or knots[-1] >= b):
            return False
        if knots.size > 1 and np.min(np.diff(knots)) < self.cfg.min_gap:
            return False
        return True

    def __call__(self, knots: np.ndarray) -> float:
        key = tuple(np.round(knots, 12))
        if key in self.cache:
            return self.cache[key]
        val = np.inf
        if self.feasible(knots):
            kv = make_knot_vector(self.cfg.degree, knots, self.domain)
            try:
                fit = fit_fixed_knots(self.t, self.y, kv)
                if not fit.rank_deficient:
                    val = fit.value(self.cfg.criterion)
            except ValueError:
                pass
        self.cache[key] = val
        return val


def _repair(knots: np.ndarray, domain, gap: float) -> np.ndarray:
    a, b = domain
    eps = max(gap, 1e-9 * (b - a))
    k = np.sort(np.clip(knots, a + eps, b - eps))
    if k.size == 0:
        return k
    keep = [k[0]]
    for v in k[1:]:
        if v - keep[-1] >= gap and v > keep[-1]:
            keep.append(v)
    return np.asarray(keep)


def _max_knots(n: int, cfg: KnotSearchConfig) -> int:
    # AICc needs n - K - 1 > 0 with K = count + degree + 1
    return min(cfg.k_max, n - cfg.degree - 3)


def _initial(rng, t, count, domain, gap):
    levels = (np.arange(1, count + 1) - 0.5 + rng.uniform(-0.5, 0.5, count)) / count
    knots = np.quantile(t, np.clip(levels, 0.0, 1.0))
    return _repair(knots, domain, gap)


def search_knots(t, y, domain, config: KnotSearchConfig = KnotSearchConfig()) -> SearchResult:
    """Choose the number and location of interior knots by genetic search.

    Selection is by tournament, crossover pools both parents' knots and
    subsamples, mutation jitters knots and adds or removes one. The best set
    seen is returned (elitism keeps the best-so-far score non-increasing).
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    cfg = config
    n = y.size
    if n < cfg.k_min + cfg.degree + 2 or _max_knots(n, cfg) < cfg.k_min:
        raise ValueError(f"{n} data points are too few for at least {cfg.k_min} knots")
    a, b = float(domain[0]), float(domain[1])
    kmax = _max_knots(n, cfg)
    if kmax < cfg.k_max:
        log.info("knot count capped at %d (n=%d)", kmax, n)
    score = _Scorer(t, y, (a, b), cfg)
    root = np.random.SeedSequence(cfg.seed)
    gen_seeds = root.spawn(cfg.generations + 1)

    def in_range(k):
        return cfg.k_min <= k.size <= kmax

    def evaluate(k):
        return score(k) if in_range(k) else np.inf

    # initial population: quantile-spaced knots with jitter, counts spread over the range
    rngs = [np.random.default_rng(s) for s in gen_seeds[0].spawn(cfg.population)]
    counts = np.linspace(cfg.k_min, kmax, cfg.population).round().astype(int)
    pop = [_initial(r, t, int(c), (a, b), cfg.min_gap) for r, c in zip(rngs, counts)]
    vals = np.array([evaluate(k) for k in pop])
    best_i = int(np.argmin(vals))
    best, best_val = pop[best_i], vals[best_i]
    history = [float(best_val)]
    span = b - a

    for g in range(1, cfg.generations + 1):
        rngs = [np.random.default_rng(s) for s in gen_seeds[g].spawn(cfg.population)]
        order = np.argsort(vals, kind="stable")
        new_pop = [pop[order[0]], pop[order[1]]]
        for i in range(2, cfg.population):
            rng = rngs[i]

            def tournament():
                idx = rng.choice(cfg.population, size=3, replace=False)
                return pop[idx[np.argmin(vals[idx])]]

            p1, p2 = tournament(), tournament()
            if rng.random() < 0.7:
                pool = np.union1d(p1, p2)
                lo, hi = sorted((p1.size, p2.size))
                m = int(rng.integers(lo, hi + 1))
                m = min(m, pool.size)
                child = np.sort(rng.choice(pool, size=m, replace=False)) if m else pool[:0]
            else:
                child = p1.copy()
            child = np.array(child, dtype=float)
            u = rng.random()
            if u < 0.25 and child.size:
                i_k = rng.integers(child.size)
                child[i_k] += rng.normal(0.0, span / 200.0)
            elif u < 0.45 and child.size:
                i_k = rng.integers(child.size)
                child[i_k] += rng.normal(0.0, span / (2.0 * (child.size + 1)))
            elif u < 0.60 and child.size < kmax:
                child = np.append(child, rng.uniform(a, b))
            elif u < 0.75 and child.size > cfg.k_min:
                child = np.delete(child, rng.integers(child.size))
            new_pop.append(_repair(child, (a, b), cfg.min_gap))
        pop = new_pop
        vals = np.array([evaluate(k) for k in pop])
        i = int(np.argmin(vals))
        if vals[i] < best_val:
            best, best_val = pop[i], vals[i]
        history.append(float(best_val))

    if cfg.polish and np.isfinite(best_val):
        best, best_val = _local_search(best, best_val, evaluate, cfg.k_min)
        history.append(float(best_val))
    kv = make_knot_vector(cfg.degree, best, (a, b))
    fit = fit_fixed_knots(t, y, kv)
    return SearchResult(kv, float(best_val), fit, history)


def _polish(knots, value, evaluate):
    """Nelder-Mead on positions with the count fixed; keeps the start if no gain."""
    if knots.size == 0:
        return knots, value

    def obj(k):
        k = np.sort(k)
        return evaluate(k) if k.size == np.unique(k).size else np.inf

    res = optimize.minimize(obj, knots, method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 200 * knots.size,
                                     "adaptive": True})
    cand = np.sort(res.x)
    cval = evaluate(cand)
    if cval < value:
        return cand, cval
    return knots, value


def _local_search(knots, value, evaluate, k_min, max_rounds: int = 20):
    """Alternate position polishing with greedy single-knot removal."""
    knots, value = _polish(knots, value, evaluate)
    for _ in range(max_rounds):
        if knots.size <= k_min:
            break
        trials = [(evaluate(np.delete(knots, i)), i) for i in range(knots.size)]
        v, i = min(trials)
        if not v < value:
            cand, cval = _polish(np.delete(knots, i), v, evaluate)
            if not cval < value:
                break
        else:
            cand, cval = _polish(np.delete(knots, i), v, evaluate)
        knots, value = cand, cval
    return knots, value


def merge_knot_sets(knots_a, knots_b, min_gap: float = 5.0) -> np.ndarray:
    """Pool two knot sets, dropping the later knot of any pair closer than ``min_gap``.

    The scan is sequential in time against the last kept knot, so the result
    never contains two knots closer than ``min_gap``.
    """
    pooled = np.sort(np.concatenate([np.asarray(knots_a, float).ravel(), np.asarray(knots_b, float).ravel()]))
    keep: list[float] = []
    for v in pooled:
        if not keep or v - keep[-1] >= min_gap and v != keep[-1]:
            keep.append(float(v))
    return np.asarray(keep)
