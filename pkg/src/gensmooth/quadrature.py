"""Discretized ODE-fidelity penalty and its derivatives.

The penalty for state ``k`` is

    PEN_k(alpha | theta) = int_0^T (dpsi_k(s)' alpha_k - f_k(x(s), u(s), s, theta))^2 ds

with ``x_j(s) = psi_j(s)' alpha_j``. The integral is replaced by a composite
Gauss-Legendre rule whose panels never straddle a knot or an input
discontinuity, so the integrand is a polynomial (or at least smooth) on each
panel. All derivatives are taken of the discretized sum and are therefore
exact for the objective actually being optimized.

Coefficient vectors are concatenated over states: ``alpha = [alpha_1, ...,
alpha_d]`` with block offsets given by :attr:`Collocation.offsets`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .bspline import KnotVector, design_matrix
from .model import OdeModel

__all__ = [
    "QuadratureRule",
    "make_rule",
    "Collocation",
    "PenaltyTerms",
    "pen_value",
    "pen_grad_alpha",
    "pen_second_derivs",
]

DEFAULT_ORDER = 5


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray
    panels: np.ndarray
    order: int

    def integrate(self, values) -> float:
        return float(np.dot(self.weights, values))


def make_rule(breaks: Sequence[float], domain, order: int = DEFAULT_ORDER) -> QuadratureRule:
    """Composite Gauss-Legendre rule with ``order`` nodes on each panel.

    Panel edges are the domain ends plus every break strictly inside it.
    """
    a, b = float(domain[0]), float(domain[1])
    br = np.asarray(breaks, dtype=float)
    br = br[(br > a) & (br < b)]
    edges = np.unique(np.concatenate([[a, b], br]))
    x, w = np.polynomial.legendre.leggauss(order)
    lo, hi = edges[:-1, None], edges[1:, None]
    half = (hi - lo) / 2
    nodes = (lo + hi) / 2 + half * x[None, :]
    weights = half * w[None, :]
    return QuadratureRule(nodes.ravel(), weights.ravel(), edges, order)


def rule_for(bases: Sequence[KnotVector], model: OdeModel, order: int = DEFAULT_ORDER) -> QuadratureRule:
    domain = bases[0].domain
    pts = [kv.breakpoints for kv in bases] + [np.asarray(model.breakpoints(), dtype=float)]
    return make_rule(np.concatenate(pts), domain, order)


@dataclass
class PenaltyTerms:
    """Per-state penalty pieces at one ``(alpha, theta)``.

    ``grad[k]`` is dPEN_k/dalpha, ``hess[k]`` d2PEN_k/dalpha dalpha' and
    ``cross[k]`` d2PEN_k/dalpha dtheta' (shape ``(K, p)``). Entries not
    requested are ``None``.
    """

    pen: np.ndarray
    grad: np.ndarray | None = None
    hess: np.ndarray | None = None
    cross: np.ndarray | None = None


class Collocation:
    """Basis values at quadrature nodes plus evaluation of the penalty terms."""

    def __init__(self, model: OdeModel, bases: Sequence[KnotVector], rule: QuadratureRule | None = None,
                 order: int = DEFAULT_ORDER):
        if len(bases) != model.n_states:
            raise ValueError(f"model has {model.n_states} states but {len(bases)} bases were given")
        domains = {kv.domain for kv in bases}
        if len(domains) != 1:
            raise ValueError("all bases must share the same domain")
        self.model = model
        self.bases = tuple(bases)
        self.rule = rule if rule is not None else rule_for(bases, model, order)
        self.sizes = [kv.n_basis for kv in bases]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        self.n_coef = int(self.offsets[-1])
        s = self.rule.nodes
        self.phi = [design_matrix(kv, s, 0).values for kv in bases]
        self.dphi = [design_matrix(kv, s, 1).values for kv in bases]
        d, n = model.n_states, s.shape[0]
        # block-embedded node matrices: Phi_full[j] is (n, K) with only block j filled
        self._phi_full = np.zeros((d, n, self.n_coef))
        self._dphi_full = np.zeros((d, n, self.n_coef))
        for j in range(d):
            sl = self.block(j)
            self._phi_full[j, :, sl] = self.phi[j]
            self._dphi_full[j, :, sl] = self.dphi[j]

    @property
    def n_states(self) -> int:
        return self.model.n_states

    def block(self, j: int) -> slice:
        return slice(int(self.offsets[j]), int(self.offsets[j + 1]))

    def split(self, alpha) -> list[np.ndarray]:
        alpha = np.asarray(alpha, dtype=float)
        return [alpha[self.block(j)] for j in range(self.n_states)]

    def states_at_nodes(self, alpha) -> tuple[np.ndarray, np.ndarray]:
        parts = self.split(alpha)
        x = np.stack([P @ a for P, a in zip(self.phi, parts)], axis=1)
        dx = np.stack([P @ a for P, a in zip(self.dphi, parts)], axis=1)
        return x, dx

    def evaluate(self, alpha, theta, level: int = 0, cross: bool = False) -> PenaltyTerms:
        """Penalty values (level 0), gradients (1) and Hessians (2).

        ``cross=True`` adds the mixed alpha/theta second derivatives.
        """
        x, dx = self.states_at_nodes(alpha)
        s, v = self.rule.nodes, self.rule.weights
        with np.errstate(over="ignore", invalid="ignore"):
            P = self.model.partials(x, s, theta)
            res = dx - P.f  # (n, d)
            pen = np.einsum("q,qk->k", v, res * res)
        if not np.all(np.isfinite(pen)):
            raise FloatingPointError("non-finite penalty")
        out = PenaltyTerms(pen)
        if level < 1 and not cross:
            return out
        d = self.n_states
        G = self._res_jacobian(P.fx)
        vr = v[:, None] * res  # (n, d)
        out.grad = np.stack([vr[:, k] @ G[k] for k in range(d)]) * 2.0
        if level >= 2:
            hess = np.empty((d, self.n_coef, self.n_coef))
            for k in range(d):
                hess[k] = 2.0 * (G[k].T * v) @ G[k]
                # curvature of f: -2 int res_k fxx[k,i,j] phi_i phi_j'
                for i in range(d):
                    for j in range(d):
                        w = vr[:, k] * P.fxx[:, k, i, j]
                        if np.any(w):
                            hess[k, self.block(i), self.block(j)] -= 2.0 * (self.phi[i].T * w) @ self.phi[j]
            out.hess = hess
        if cross:
            # d/dtheta of 2 int res_k G_k: res_k' = -ftheta, G_k' = -fxtheta phi
            cr = np.empty((d, self.n_coef, P.ftheta.shape[2]))
            for k in range(d):
                cr[k] = -2.0 * G[k].T @ (v[:, None] * P.ftheta[:, k, :])
                for i in range(d):
                    cr[k, self.block(i)] -= 2.0 * self.phi[i].T @ (vr[:, k, None] * P.fxtheta[:, k, i, :])
            out.cross = cr
        return out

    def _res_jacobian(self, fx: np.ndarray) -> np.ndarray:
        """``G[k] = d res_k / d alpha`` at every node, shape ``(d, n, K)``."""
        d = self.n_states
        G = self._dphi_full.copy()
        for k in range(d):
            for i in range(d):
                G[k][:, self.block(i)] -= fx[:, k, i, None] * self.phi[i]
        return G

    def penalty_alpha_third(self, alpha, theta, weights: np.ndarray, lam) -> np.ndarray:
        """Contract the alpha-derivative of the penalty Hessian with ``weights``.

        Returns ``g[c] = sum_k lam_k * trace(weights @ d hess_k / d alpha_c)``
        for a symmetric ``weights`` matrix (K x K). This is the only
        third-derivative quantity the outer criterion gradient needs.
        """
        x, dx = self.states_at_nodes(alpha)
        s, v = self.rule.nodes, self.rule.weights
        P = self.model.partials(x, s, theta)
        res = dx - P.f
        lam = np.asarray(lam, dtype=float)
        G = self._res_jacobian(P.fx)
        Phi = self._phi_full
        # dG_k/dalpha_c = -sum_{i,m} fxx[k,i,m] phi_i (x) dx_m/dalpha_c
        # trace(W dH_k/dc) = 2 sum_q v [2 (dG_k/dc)' W G_k - (dres_k/dc) S_k - res_k T_kc]
        WG = np.einsum("ab,kqb->kqa", weights, G)
        # A[k,i,q] = phi_i(q)' W G_k(q)
        A = np.einsum("iqa,kqa->kiq", Phi, WG)
        # S[k,q] = sum_ij fxx[k,i,j] phi_i' W phi_j
        PWP = np.einsum("iqa,ab,jqb->ijq", Phi, weights, Phi)
        S = np.einsum("qkij,ijq->kq", P.fxx, PWP)
        out = np.zeros(self.n_coef)
        for k in range(self.n_states):
            if lam[k] == 0.0:
                continue
            # term from the Gauss-Newton part G'G
            t_gn = -2.0 * np.einsum("q,qim,iq,mqc->c", v, P.fxx[:, k], A[k], Phi)
            # derivative of residual inside the curvature term
            t_res = -np.einsum("q,q,qc->c", v, S[k], G[k])
            # derivative of fxx itself
            T = np.einsum("qijm,ijq->qm", P.fxxx[:, k], PWP)
            t_3 = -np.einsum("q,q,qm,mqc->c", v, res[:, k], T, Phi)
            out += lam[k] * 2.0 * (t_gn + t_res + t_3)
        return out


def pen_value(alpha, theta, lam, colloc: Collocation) -> tuple[np.ndarray, float]:
    """Per-state penalties and the weighted composite ``sum_k lam_k PEN_k``."""
    pen = colloc.evaluate(alpha, theta).pen
    return pen, float(np.dot(np.asarray(lam, dtype=float), pen))


def pen_grad_alpha(alpha, theta, lam, colloc: Collocation) -> np.ndarray:
    """Gradient of the composite penalty in the concatenated coefficients."""
    terms = colloc.evaluate(alpha, theta, level=1)
    return np.asarray(lam, dtype=float) @ terms.grad


def pen_second_derivs(alpha, theta, lam, colloc: Collocation) -> dict:
    """Second (and the lambda-third) derivatives of the composite penalty.

    Keys: ``"alpha_alpha"`` (K x K), ``"theta_alpha"`` (K x p),
    ``"lambda_alpha"`` (d x K) and ``"lambda_alpha_alpha"`` (d x K x K).
    The data-fit Hessian is not included here.
    """
    lam = np.asarray(lam, dtype=float)
    terms = colloc.evaluate(alpha, theta, level=2, cross=True)
    return {
        "alpha_alpha": np.tensordot(lam, terms.hess, axes=1),
        "theta_alpha": np.tensordot(lam, terms.cross, axes=1),
        "lambda_alpha": terms.grad,
        "lambda_alpha_alpha": terms.hess,
    }
