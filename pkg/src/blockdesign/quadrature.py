"""One-dimensional quadrature: Gauss-Hermite for N(0,1) expectations and a
composite Gauss-Legendre rule for real-line integrals with decaying tails.

The Gauss-Hermite rule uses the probabilists' normalization, so weights sum
to one and ``sum(w * f(x))`` approximates ``E[f(U)]`` for ``U ~ N(0,1)``.
Nodes come from the Golub-Welsch symmetric-tridiagonal eigenproblem, which
is stable up to the supported maximum order of 512.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .errors import QuadratureError

MAX_ORDER = 512

# Composite rule defaults for the asymptotic C-constant integrals: the
# logistic integrands decay like exp(-|t|), so truncation at +/-40 is
# far below double precision.
LINE_HALF_WIDTH = 40.0
LINE_PANELS = 400
_PANEL_ORDER = 16


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray
    kind: str

    def __post_init__(self):
        nodes = np.ascontiguousarray(self.nodes, dtype=float)
        weights = np.ascontiguousarray(self.weights, dtype=float)
        if nodes.shape != weights.shape or nodes.ndim != 1:
            raise QuadratureError("nodes and weights must be equal-length vectors")
        nodes.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @property
    def n(self) -> int:
        return self.nodes.size


@lru_cache(maxsize=64)
def gauss_hermite(n: int) -> QuadratureRule:
    """Probabilists' Gauss-Hermite rule, exact for polynomials of degree
    2n-1 under the N(0,1) weight."""
    if not 1 <= n <= MAX_ORDER:
        raise QuadratureError(f"order must be in [1, {MAX_ORDER}], got {n}")
    if n == 1:
        return QuadratureRule(np.zeros(1), np.ones(1), "gauss_hermite_probabilist")
    # Jacobi matrix of the He_k recurrence: zero diagonal, off-diagonal sqrt(k).
    off = np.sqrt(np.arange(1, n, dtype=float))
    nodes, vecs = eigh_tridiagonal(np.zeros(n), off)
    weights = vecs[0, :] ** 2
    # Enforce exact symmetry about zero; the eigensolver is symmetric only
    # to rounding.
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    weights = weights / weights.sum()
    return QuadratureRule(nodes, weights, "gauss_hermite_probabilist")


def adaptive_order(sigma: float) -> int:
    """Default Gauss-Hermite order for a given random-intercept scale.

    Larger sigma squeezes the integrand features to width O(1/sigma), so
    the order grows linearly with sigma, floored at 32 and capped at 512.
    """
    return int(min(MAX_ORDER, max(32, math.ceil(8.0 * sigma))))


def default_rule(sigma2: float) -> QuadratureRule:
    return gauss_hermite(adaptive_order(math.sqrt(max(sigma2, 0.0))))


def normal_composite_rule(half_width: float = 8.0, n_panels: int = 400) -> QuadratureRule:
    """Composite Gauss-Legendre rule for N(0,1) expectations.

    Unlike Gauss-Hermite, the node spacing is uniform in the integration
    variable, which resolves integrand features much narrower than the
    Gaussian scale (the large-sigma regime of the marginal likelihood).
    Weights absorb the normal density; they sum to the normal mass of
    [-half_width, half_width].
    """
    if half_width <= 0 or n_panels < 1:
        raise QuadratureError("half_width must be > 0 and n_panels >= 1")
    edges = np.linspace(-half_width, half_width, n_panels + 1)
    gx, gw = _panel_rule(_PANEL_ORDER)
    mid = 0.5 * (edges[:-1] + edges[1:])
    half = 0.5 * (edges[1] - edges[0])
    nodes = (mid[:, None] + half * gx[None, :]).ravel()
    dens = np.exp(-0.5 * nodes**2) / math.sqrt(2.0 * math.pi)
    weights = (half * np.tile(gw, n_panels)) * dens
    return QuadratureRule(nodes, weights, "composite_real_line")


def expect_normal(f: Callable[[float], float], rule: QuadratureRule) -> float:
    """E[f(U)] for U ~ N(0,1) via the supplied rule."""
    vals = np.array([f(x) for x in rule.nodes], dtype=float)
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        raise QuadratureError(
            f"integrand not finite at node index {bad[0]} (x={rule.nodes[bad[0]]:.6g})"
        )
    return float(rule.weights @ vals)


@lru_cache(maxsize=8)
def _panel_rule(order: int) -> tuple[np.ndarray, np.ndarray]:
    return np.polynomial.legendre.leggauss(order)


def integrate_line(
    f: Callable[[np.ndarray], np.ndarray],
    half_width: float = LINE_HALF_WIDTH,
    n_panels: int = LINE_PANELS,
) -> float:
    """Integral of f over the real line, truncated to [-half_width, half_width]
    and evaluated by composite 16-point Gauss-Legendre panels.

    Intended for integrands with exponentially decaying tails; ``f`` must
    accept a vector of abscissae.
    """
    if half_width <= 0 or n_panels < 1:
        raise QuadratureError("half_width must be > 0 and n_panels >= 1")
    edges = np.linspace(-half_width, half_width, n_panels + 1)
    gx, gw = _panel_rule(_PANEL_ORDER)
    mid = 0.5 * (edges[:-1] + edges[1:])
    half = 0.5 * (edges[1] - edges[0])
    pts = (mid[:, None] + half * gx[None, :]).ravel()
    vals = np.asarray(f(pts), dtype=float)
    return float(half * (vals.reshape(n_panels, -1) @ gw).sum())
