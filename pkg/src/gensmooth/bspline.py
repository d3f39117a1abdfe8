"""B-spline bases on an open (clamped) knot sequence.

Basis values come from the Cox-de Boor recursion evaluated on the nonzero
span only; derivatives use the standard difference formula for B-spline
derivatives, so both are exact up to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "KnotVector",
    "BasisMatrix",
    "make_knot_vector",
    "equal_knot_vector",
    "eval_basis",
    "design_matrix",
]

MAX_DEGREE = 5


@dataclass(frozen=True)
class KnotVector:
    """Open knot sequence of a spline of given degree on ``domain``.

    The boundary knots are repeated ``degree + 1`` times; ``interior`` holds
    the remaining (possibly repeated) knots strictly inside the domain.
    """

    degree: int
    interior: tuple[float, ...]
    domain: tuple[float, float]
    full: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        a, b = self.domain
        full = np.concatenate(
            [np.full(self.degree + 1, a), np.asarray(self.interior, float), np.full(self.degree + 1, b)]
        )
        full.setflags(write=False)
        object.__setattr__(self, "full", full)

    @property
    def n_basis(self) -> int:
        return self.degree + 1 + len(self.interior)

    @property
    def breakpoints(self) -> np.ndarray:
        """Distinct knot values including both domain ends."""
        return np.unique(self.full)

    def support(self, k: int) -> tuple[float, float]:
        return float(self.full[k]), float(self.full[k + self.degree + 1])


def make_knot_vector(degree: int, interior_knots, domain) -> KnotVector:
    """Validate inputs and build a :class:`KnotVector`.

    Raises:
        ValueError: if the degree is out of range, the domain is empty, or the
            interior knots are unsorted or not strictly inside the domain.
    """
    degree = int(degree)
    if degree < 1 or degree > MAX_DEGREE:
        raise ValueError(f"degree must be in [1, {MAX_DEGREE}], got {degree}")
    a, b = (float(v) for v in domain)
    if not (np.isfinite(a) and np.isfinite(b) and a < b):
        raise ValueError(f"invalid domain {domain!r}")
    interior = np.asarray(interior_knots, dtype=float).ravel()
    if interior.size:
        if not np.all(np.isfinite(interior)):
            raise ValueError("interior knots must be finite")
        if np.any(np.diff(interior) < 0):
            raise ValueError("interior knots must be sorted in non-decreasing order")
        if interior[0] <= a or interior[-1] >= b:
            raise ValueError(f"interior knots must lie strictly inside ({a}, {b})")
        # more than degree+1 coincident knots would disconnect the basis
        _, counts = np.unique(interior, return_counts=True)
        if counts.max() > degree + 1:
            raise ValueError("interior knot multiplicity exceeds degree + 1")
    return KnotVector(degree, tuple(float(v) for v in interior), (a, b))


def equal_knot_vector(n_basis: int, domain, degree: int = 3) -> KnotVector:
    """Knot vector with equally spaced interior knots and ``n_basis`` functions."""
    n_interior = n_basis - degree - 1
    if n_interior < 0:
        raise ValueError(f"n_basis must be at least degree + 1 = {degree + 1}")
    a, b = domain
    interior = np.linspace(a, b, n_interior + 2)[1:-1]
    return make_knot_vector(degree, interior, domain)


def _find_span(kv: KnotVector, t: np.ndarray) -> np.ndarray:
    # right-continuous inside; the last nonempty span is closed on the right
    n = kv.n_basis
    span = np.searchsorted(kv.full, t, side="right") - 1
    return np.clip(span, kv.degree, n - 1)


def _nonzero_basis(kv: KnotVector, t: np.ndarray, span: np.ndarray, degree: int) -> np.ndarray:
    """Values of the ``degree + 1`` B-splines of the given degree alive on ``span``.

    Column ``r`` corresponds to basis index ``span - degree + r``. The knot
    sequence is always ``kv.full`` (so lower-degree functions are those of the
    same sequence, as needed by the derivative formula).
    """
    U = kv.full
    m = t.shape[0]
    N = np.zeros((m, degree + 1))
    N[:, 0] = 1.0
    left = np.empty((m, degree + 1))
    right = np.empty((m, degree + 1))
    for j in range(1, degree + 1):
        left[:, j] = t - U[span + 1 - j]
        right[:, j] = U[span + j] - t
        saved = np.zeros(m)
        for r in range(j):
            denom = right[:, r + 1] + left[:, j - r]
            with np.errstate(divide="ignore", invalid="ignore"):
                temp = np.where(denom != 0.0, N[:, r] / denom, 0.0)
            N[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        N[:, j] = saved
    return N


def _check_times(kv: KnotVector, t) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    a, b = kv.domain
    if np.any(~np.isfinite(t)) or np.any(t < a) or np.any(t > b):
        raise ValueError(f"evaluation times must lie in [{a}, {b}]")
    return t


def _basis_block(kv: KnotVector, t: np.ndarray, deriv_order: int) -> tuple[np.ndarray, np.ndarray]:
    """Nonzero entries (m x (p+1)) and their spans for the requested derivative."""
    p = kv.degree
    if deriv_order < 0 or deriv_order > p:
        raise ValueError(f"deriv_order must be in [0, {p}]")
    span = _find_span(kv, t)
    U = kv.full
    q = p - deriv_order
    # lower-degree values on the same span; entry r is basis (span - q + r)
    vals = _nonzero_basis(kv, t, span, q)
    # raise the degree back to p applying the derivative recursion
    # B'_{i,k} = k/(u_{i+k}-u_i) B_{i,k-1} - k/(u_{i+k+1}-u_{i+1}) B_{i+1,k-1}
    for k in range(q + 1, p + 1):
        m = t.shape[0]
        new = np.zeros((m, k + 1))
        for r in range(k + 1):
            i = span - k + r
            acc = np.zeros(m)
            if r >= 1:
                d1 = U[i + k] - U[i]
                with np.errstate(divide="ignore", invalid="ignore"):
                    acc += np.where(d1 != 0.0, k * vals[:, r - 1] / d1, 0.0)
            if r <= k - 1:
                d2 = U[i + k + 1] - U[i + 1]
                with np.errstate(divide="ignore", invalid="ignore"):
                    acc -= np.where(d2 != 0.0, k * vals[:, r] / d2, 0.0)
            new[:, r] = acc
        vals = new
    return vals, span


def eval_basis(kv: KnotVector, t: float, deriv_order: int = 0) -> np.ndarray:
    """All ``K`` basis functions (or a derivative) at a single time ``t``."""
    return design_matrix(kv, [t], deriv_order).values[0]


@dataclass(frozen=True)
class BasisMatrix:
    values: np.ndarray
    times: np.ndarray
    knots: KnotVector
    deriv_order: int = 0

    @property
    def shape(self):
        return self.values.shape


def design_matrix(kv: KnotVector, times, deriv_order: int = 0) -> BasisMatrix:
    """Matrix with rows ``psi(t_l)`` (or its derivative) for each time."""
    t = _check_times(kv, times)
    vals, span = _basis_block(kv, t, deriv_order)
    p = kv.degree
    out = np.zeros((t.shape[0], kv.n_basis))
    rows = np.arange(t.shape[0])[:, None]
    cols = span[:, None] - p + np.arange(p + 1)[None, :]
    out[rows, cols] = vals
    out.setflags(write=False)
    return BasisMatrix(out, t, kv, deriv_order)
