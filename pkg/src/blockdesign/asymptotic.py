"""Large-variance asymptotic outcome-enumeration for the logit link.

As the random-intercept variance grows, the marginal likelihood of a
binary outcome concentrates on whether the outcome is *increasing*
within the block: zeros below some threshold of the linear predictors
and ones above it.  The approximations here exploit that structure:

* ``approx_likelihood`` evaluates the two-branch normal approximation of
  the likelihood, with a cutoff ``gamma`` deciding when the largest
  zero-predictor and the smallest one-predictor count as coincident.
* ``partition_for_derivative`` runs the greedy augmentation that decides
  which units share the near-tied cluster Z(j) used in the derivative
  expansion, with acceptance conditions on the running coefficient C4.
* ``approx_derivative`` assembles the derivative approximation from the
  partition, clamped at zero, and returns 0 for units whose partition
  shows the outcome cannot contribute non-negligibly.
* ``info_asymptotic`` combines these over all 2^m outcomes into F^T Q F.

The candidate-cluster scan is deterministic: proposal order is by
distance of predictors from eta_j with smallest-index tie-break, and
indices left outside N/Z/P by exact ties (the augmentation can reject a
tied predictor once C4 has shrunk) are assigned to N when eta_l <= eta_j
and to P otherwise, so the three sets always partition the block.

Everything depends on beta only through eta, so the Q-style kernel is
exposed separately for reuse and benchmarking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from numba import njit
from scipy.special import expit, ndtr

from .enumeration import InfoMatrix, UNDERFLOW_MIN, outcome_matrix
from .errors import ValidationError
from .model import Block, ModelSpec, ParameterPoint, model_matrix
from .quadrature import integrate_line

# Cutoff separating the increasing-outcome branch from the coincident
# branch of the likelihood approximation; at a predictor gap of 1 the two
# branch values approximately agree.
GAMMA_DEFAULT = 1.0

# Below this variance the expansion is outside its reliable regime and
# results carry a warning tag.
SIGMA2_REGIME_MIN = 10.0

_SQRT2PI = math.sqrt(2.0 * math.pi)


def _phi(x):
    return np.exp(-0.5 * np.square(x)) / _SQRT2PI


def _phi_diff(lo, hi):
    """Phi(hi) - Phi(lo), evaluated in the tail with better conditioning."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    return np.where(lo > 0.0, ndtr(-lo) - ndtr(-hi), ndtr(hi) - ndtr(lo))


@dataclass(frozen=True)
class CConstantTable:
    """Memoized logistic tail integrals C1, C2, C3 for indices 0..m."""

    m: int
    c1: np.ndarray
    c2: np.ndarray
    c3: np.ndarray

    def __post_init__(self):
        for name in ("c1", "c2", "c3"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=float)
            if arr.shape != (self.m + 1, self.m + 1) or not np.all(np.isfinite(arr)):
                raise ValidationError(f"C-table {name} malformed")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)


def _c_integrand(kind: int, i: int, j: int):
    def f(t):
        h = expit(t)
        hp = h * expit(-t)
        base = hp * h**i * (1.0 - h) ** j
        if kind == 1:
            return base
        if kind == 2:
            return t * base
        return hp * base

    return f


@lru_cache(maxsize=8)
def c_constants(m: int) -> CConstantTable:
    """All three C tables for indices up to m, by composite quadrature."""
    if not 1 <= m <= 12:
        raise ValidationError("C tables supported for 1 <= m <= 12")
    size = m + 1
    c1 = np.empty((size, size))
    c2 = np.empty((size, size))
    c3 = np.empty((size, size))
    for i in range(size):
        for j in range(size):
            c1[i, j] = integrate_line(_c_integrand(1, i, j))
            c2[i, j] = integrate_line(_c_integrand(2, i, j))
            c3[i, j] = integrate_line(_c_integrand(3, i, j))
    return CConstantTable(m, c1, c2, c3)


def c1_analytic(i: int, j: int) -> float:
    """Closed form of C1 via the substitution u = h(t): Beta(i+1, j+1)."""
    from scipy.special import beta

    return float(beta(i + 1.0, j + 1.0))


def quasi_level_integral(n_zero: int, n_one: int) -> float:
    """The coincident-branch integral of (1-h)^{n_zero} h^{n_one} over the
    line; requires at least one factor of each kind to converge.  Equals 1
    when n_zero = n_one = 1."""
    if n_zero < 1 or n_one < 1:
        raise ValidationError("integral diverges unless both exponents are >= 1")

    def f(t):
        h = expit(t)
        return (1.0 - h) ** n_zero * h**n_one

    return integrate_line(f)


class ApproxLikelihood(NamedTuple):
    value: float
    contributing: bool


def approx_likelihood(
    y: np.ndarray, eta: np.ndarray, sigma: float, gamma: float = GAMMA_DEFAULT
) -> ApproxLikelihood:
    """Two-branch likelihood approximation for one binary outcome.

    With lam0 the largest predictor among zeros and lam1 the smallest
    among ones: a gap of at least gamma gives the normal-probability
    branch; a gap within gamma gives the density branch phi(lam1/sigma)/sigma;
    lam1 below lam0 - gamma marks the outcome as non-contributing.
    """
    if sigma <= 0:
        raise ValidationError("asymptotic approximation requires sigma > 0")
    y = np.asarray(y)
    eta = np.asarray(eta, dtype=float)
    lam0 = np.max(eta[y == 0]) if np.any(y == 0) else -np.inf
    lam1 = np.min(eta[y == 1]) if np.any(y == 1) else np.inf
    if abs(lam1 - lam0) <= gamma:
        return ApproxLikelihood(float(_phi(lam1 / sigma) / sigma), True)
    if lam1 >= lam0 + gamma:
        val = float(_phi_diff(np.float64(lam0 / sigma), np.float64(lam1 / sigma)))
        return ApproxLikelihood(max(0.0, val), True)
    return ApproxLikelihood(0.0, False)


def approx_likelihood_general(
    y: np.ndarray, eta: np.ndarray, sigma: float, gamma: float = GAMMA_DEFAULT
) -> ApproxLikelihood:
    """Variant of the coincident branch using the general cluster integral
    instead of the fixed two-element value.  Exposed for testing only; the
    default path follows the two-element recipe."""
    y = np.asarray(y)
    eta = np.asarray(eta, dtype=float)
    if not (np.any(y == 0) and np.any(y == 1)):
        return approx_likelihood(y, eta, sigma, gamma)
    lam0 = np.max(eta[y == 0])
    lam1 = np.min(eta[y == 1])
    if abs(lam1 - lam0) > gamma:
        return approx_likelihood(y, eta, sigma, gamma)
    anchor = eta[np.flatnonzero((y == 0) & (eta == lam0))[0]]
    cluster = np.abs(eta - anchor) <= gamma
    n_zero = int(np.sum(cluster & (y == 0)))
    n_one = int(np.sum(cluster & (y == 1)))
    val = _phi(lam1 / sigma) / sigma * quasi_level_integral(n_zero, n_one)
    return ApproxLikelihood(float(val), True)


@dataclass(frozen=True)
class Partition:
    """Index sets around unit j with the accepted cluster's coefficient."""

    j: int
    n_set: frozenset[int]
    z_set: frozenset[int]
    p_set: frozenset[int]
    c4: float
    i_count: int
    j_count: int

    def __post_init__(self):
        m = len(self.n_set) + len(self.z_set) + len(self.p_set)
        union = self.n_set | self.z_set | self.p_set
        if len(union) != m or union != set(range(m)) or self.j not in self.z_set:
            raise ValidationError("N/Z/P must partition the block with j in Z")


def _proposal_order(eta: np.ndarray, j: int) -> np.ndarray:
    """Indices l != j sorted by |eta_l - eta_j|, smallest index first on ties."""
    m = eta.size
    dist = np.abs(eta - eta[j])
    order = np.lexsort((np.arange(m), dist))
    return order[order != j]


def partition_for_derivative(
    y: np.ndarray, eta: np.ndarray, j: int, table: CConstantTable
) -> Partition:
    """Greedy cluster construction around unit j for the derivative.

    Starting from Z = {j} with C4 = 1, the nearest remaining predictor is
    proposed for inclusion; the proposal is accepted while (A) the updated
    coefficient stays in [0, C4] and (B) it does not move further from the
    pure C1 value than the current C4.  N and P collect the predictors
    below and above the accepted cluster.
    """
    y = np.asarray(y)
    eta = np.asarray(eta, dtype=float)
    m = eta.size
    order = _proposal_order(eta, j)

    z = [j]
    c4 = 1.0
    i_cnt = j_cnt = 0
    s1_sum = s0_sum = 0.0
    for l in order:
        delta = eta[l] - eta[j]
        if y[l] == 1:
            i_new, j_new = i_cnt + 1, j_cnt
            s1_new, s0_new = s1_sum + delta, s0_sum
        else:
            i_new, j_new = i_cnt, j_cnt + 1
            s1_new, s0_new = s1_sum, s0_sum + delta
        c1_val = table.c1[i_new, j_new]
        c4_new = c1_val
        if i_new >= 1:
            c4_new += table.c3[i_new - 1, j_new] * s1_new
        if j_new >= 1:
            c4_new -= table.c3[i_new, j_new - 1] * s0_new
        if 0.0 <= c4_new <= c4 and abs(c4_new - c1_val) <= abs(c4 - c1_val):
            z.append(int(l))
            c4 = c4_new
            i_cnt, j_cnt = i_new, j_new
            s1_sum, s0_sum = s1_new, s0_new
        else:
            break

    z_eta_min = eta[z].min()
    z_eta_max = eta[z].max()
    n_set, p_set = set(), set()
    for l in range(m):
        if l in z:
            continue
        if eta[l] < z_eta_min:
            n_set.add(l)
        elif eta[l] > z_eta_max:
            p_set.add(l)
        elif eta[l] <= eta[j]:
            n_set.add(l)
        else:
            p_set.add(l)
    return Partition(j, frozenset(n_set), frozenset(z_set := set(z)), frozenset(p_set), c4, i_cnt, j_cnt)


def approx_derivative(
    y: np.ndarray,
    eta: np.ndarray,
    sigma: float,
    j: int,
    partition: Partition,
    table: CConstantTable,
) -> float:
    """Signed derivative approximation dP/d eta_j from a partition.

    Returns 0 when the partition shows a one below the cluster or a zero
    above it, in which case the true derivative decays exponentially.
    """
    y = np.asarray(y)
    eta = np.asarray(eta, dtype=float)
    for l in partition.n_set:
        if y[l] == 1:
            return 0.0
    for l in partition.p_set:
        if y[l] == 0:
            return 0.0
    x = -eta[j] / sigma
    phi_val = _phi(x)
    dphi_val = -x * phi_val
    core = phi_val * partition.c4 / sigma + dphi_val * table.c2[
        partition.i_count, partition.j_count
    ] / sigma**2
    return float((2.0 * y[j] - 1.0) * max(0.0, core))


@njit(cache=True)
def _q_asym_kernel(etas, sigma, c1, c2, c3, bout, gamma, counts):  # pragma: no cover
    nb, m = etas.shape
    n_out = bout.shape[0]
    sqrt2 = math.sqrt(2.0)
    sqrt2pi = math.sqrt(2.0 * math.pi)
    qout = np.zeros((nb, m, m))
    g = np.empty(m)
    used = np.empty(m, dtype=np.bool_)
    for b in range(nb):
        eta = etas[b]
        for yi in range(n_out):
            lam0 = -np.inf
            lam1 = np.inf
            for l in range(m):
                if bout[yi, l] == 0:
                    if eta[l] > lam0:
                        lam0 = eta[l]
                elif eta[l] < lam1:
                    lam1 = eta[l]
            if abs(lam1 - lam0) <= gamma:
                p = math.exp(-0.5 * (lam1 / sigma) ** 2) / (sqrt2pi * sigma)
            elif lam1 >= lam0 + gamma:
                if lam0 > 0.0:
                    p = 0.5 * (
                        math.erfc(lam0 / (sigma * sqrt2))
                        - math.erfc(lam1 / (sigma * sqrt2))
                    )
                else:
                    p = 0.5 * (
                        math.erf(lam1 / (sigma * sqrt2))
                        - math.erf(lam0 / (sigma * sqrt2))
                    )
                if p < 0.0:
                    p = 0.0
            else:
                continue  # non-contributing outcome
            counts[b, 0] += 1
            if p < 1e-300:
                counts[b, 1] += 1
                continue

            for j in range(m):
                g[j] = 0.0
                for l in range(m):
                    used[l] = False
                used[j] = True
                zmin = eta[j]
                zmax = eta[j]
                c4 = 1.0
                i_cnt = 0
                j_cnt = 0
                s1 = 0.0
                s0 = 0.0
                for _step in range(m - 1):
                    best = -1
                    bestd = np.inf
                    for l in range(m):
                        if not used[l]:
                            d = abs(eta[l] - eta[j])
                            if d < bestd:
                                bestd = d
                                best = l
                    delta = eta[best] - eta[j]
                    if bout[yi, best] == 1:
                        i_new = i_cnt + 1
                        j_new = j_cnt
                        s1_new = s1 + delta
                        s0_new = s0
                    else:
                        i_new = i_cnt
                        j_new = j_cnt + 1
                        s1_new = s1
                        s0_new = s0 + delta
                    c1v = c1[i_new, j_new]
                    c4n = c1v
                    if i_new >= 1:
                        c4n += c3[i_new - 1, j_new] * s1_new
                    if j_new >= 1:
                        c4n -= c3[i_new, j_new - 1] * s0_new
                    if 0.0 <= c4n <= c4 and abs(c4n - c1v) <= abs(c4 - c1v):
                        used[best] = True
                        c4 = c4n
                        i_cnt, j_cnt, s1, s0 = i_new, j_new, s1_new, s0_new
                        if eta[best] < zmin:
                            zmin = eta[best]
                        if eta[best] > zmax:
                            zmax = eta[best]
                    else:
                        break
                ok = True
                for l in range(m):
                    if used[l]:
                        continue
                    if eta[l] < zmin or (eta[l] <= zmax and eta[l] <= eta[j]):
                        if bout[yi, l] == 1:  # a one below the cluster
                            ok = False
                            break
                    elif bout[yi, l] == 0:  # a zero above the cluster
                        ok = False
                        break
                if not ok:
                    continue
                x = -eta[j] / sigma
                phi_x = math.exp(-0.5 * x * x) / sqrt2pi
                core = phi_x * c4 / sigma - x * phi_x * c2[i_cnt, j_cnt] / (sigma * sigma)
                if core > 0.0:
                    g[j] = (2.0 * bout[yi, j] - 1.0) * core

            for a in range(m):
                if g[a] != 0.0:
                    for bq in range(m):
                        qout[b, a, bq] += g[a] * g[bq] / p
    return qout


def q_matrix_asymptotic_batch(
    etas: np.ndarray,
    sigma: float,
    table: CConstantTable | None = None,
    gamma: float = GAMMA_DEFAULT,
) -> tuple[np.ndarray, dict]:
    """Asymptotic analogue of the enumeration kernel Q for a batch of
    linear-predictor vectors.  Returns ``(Q, diagnostics)`` with Q of
    shape (batch, m, m).

    The compiled kernel runs the greedy cluster scan per (eta, outcome,
    unit); its semantics match the scalar partition functions, which the
    tests use as the reference implementation.
    """
    etas = np.atleast_2d(np.asarray(etas, dtype=float))
    nb, m = etas.shape
    if table is None:
        table = c_constants(m)
    if table.m < m:
        raise ValidationError(f"C table built for m={table.m}, need {m}")
    if sigma <= 0:
        raise ValidationError("asymptotic approximation requires sigma > 0")
    bout_int = (outcome_matrix(m) > 0.5).astype(np.int64)
    counts = np.zeros((nb, 2), dtype=np.int64)
    q = _q_asym_kernel(
        etas, float(sigma), table.c1, table.c2, table.c3, bout_int, float(gamma), counts
    )
    q = 0.5 * (q + np.transpose(q, (0, 2, 1)))
    diag = {
        "n_contributing": int(counts[:, 0].max(initial=0)),
        "underflow_outcomes": int(counts[:, 1].sum()),
    }
    return q, diag


def q_matrix_asymptotic(
    eta: np.ndarray,
    sigma: float,
    table: CConstantTable | None = None,
    gamma: float = GAMMA_DEFAULT,
) -> tuple[np.ndarray, dict]:
    """Asymptotic analogue of the enumeration kernel Q for one eta vector."""
    q, diag = q_matrix_asymptotic_batch(
        np.asarray(eta, dtype=float)[None, :], sigma, table, gamma
    )
    return q[0], diag


def q_matrix_asymptotic(
    eta: np.ndarray,
    sigma: float,
    table: CConstantTable | None = None,
    gamma: float = GAMMA_DEFAULT,
) -> tuple[np.ndarray, dict]:
    """Asymptotic analogue of the enumeration kernel Q for one eta vector."""
    q, diag = q_matrix_asymptotic_batch(
        np.asarray(eta, dtype=float)[None, :], sigma, table, gamma
    )
    return q[0], diag


def info_asymptotic(
    spec: ModelSpec,
    block: Block,
    theta: ParameterPoint,
    gamma: float = GAMMA_DEFAULT,
) -> InfoMatrix:
    """Asymptotic outcome-enumeration information matrix F^T Q F."""
    if spec.link != "logit":
        raise ValidationError("asymptotic enumeration requires the logit link")
    F = model_matrix(spec, block)
    table = c_constants(spec.m)
    q, diag = q_matrix_asymptotic(F @ theta.beta, theta.sigma, table, gamma)
    mat = F.T @ q @ F
    meta = dict(diag)
    meta["gamma"] = gamma
    meta["regime_warning"] = theta.sigma2 < SIGMA2_REGIME_MIN
    return InfoMatrix(0.5 * (mat + mat.T), "asymptotic", meta)
