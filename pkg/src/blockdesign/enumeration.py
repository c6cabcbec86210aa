"""Marginal likelihoods and gold-standard information matrices.

For binary (logit) responses the information matrix of a block is
assembled by complete enumeration of the 2^m outcomes:

    M(zeta, theta) = F^T Q F,
    Q = sum_Y (1/P_Y) (dP_Y/d eta)(dP_Y/d eta)^T,

with P_Y and its eta-gradient evaluated by Gauss-Hermite quadrature over
the random intercept.  Q depends on beta only through eta, which is what
the surrogate module exploits.  For Poisson (log) responses the outcome
space is infinite and the expectation is estimated by Monte Carlo over
simulated response vectors.

Outcomes whose likelihood underflows below ``UNDERFLOW_MIN`` are excluded
from Q with a counter in the result metadata.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.special import expit, gammaln, log_expit

from .errors import InfeasibleError, ValidationError
from .model import Block, Design, ModelSpec, ParameterPoint, model_matrix
from .quadrature import QuadratureRule, default_rule

MAX_ENUM_M = 12
UNDERFLOW_MIN = 1e-300

METHODS = (
    "naive",
    "monte_carlo",
    "mql",
    "gee",
    "adj_mql",
    "adj_gee",
    "asymptotic",
    "interpolated",
    "quasi_direct",
)


@dataclass(frozen=True)
class InfoMatrix:
    """A p x p information matrix tagged with the approximation that
    produced it and any method-specific metadata."""

    matrix: np.ndarray
    method: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        m = np.ascontiguousarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValidationError("information matrix must be square")
        if self.method not in METHODS:
            raise ValidationError(f"unknown method tag {self.method!r}")
        scale = max(1.0, float(np.max(np.abs(m))))
        if np.max(np.abs(m - m.T)) > 1e-10 * scale:
            raise ValidationError("information matrix not symmetric")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @property
    def p(self) -> int:
        return self.matrix.shape[0]


@lru_cache(maxsize=16)
def outcome_matrix(m: int) -> np.ndarray:
    """All binary outcomes of length m as a (2^m, m) 0/1 array."""
    if m > MAX_ENUM_M:
        raise ValidationError(f"outcome enumeration capped at m={MAX_ENUM_M}")
    codes = np.arange(2**m, dtype=np.int64)
    out = (codes[:, None] >> np.arange(m - 1, -1, -1)[None, :]) & 1
    out = out.astype(float)
    out.flags.writeable = False
    return out


def _check_outcome(spec: ModelSpec, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (spec.m,):
        raise ValidationError(f"outcome must have length m={spec.m}")
    if np.any(y < 0):
        raise ValidationError("outcome entries must be non-negative")
    if spec.link == "logit" and np.any(y > 1):
        raise ValidationError("binary outcomes must be 0/1")
    return y


def _log_conditional(
    spec: ModelSpec, eta: np.ndarray, sigma: float, y: np.ndarray, rule: QuadratureRule
) -> tuple[np.ndarray, np.ndarray]:
    """Per-node log conditional probability of outcome y, plus the per-node
    conditional means (used by gradient factors).  Shapes: (n,), (n, m)."""
    nu = eta[None, :] + sigma * rule.nodes[:, None]
    if spec.link == "logit":
        logp = y[None, :] * log_expit(nu) + (1 - y)[None, :] * log_expit(-nu)
        mean = expit(nu)
    else:
        lam = np.exp(nu)
        if not np.all(np.isfinite(lam)):
            raise InfeasibleError("Poisson rate overflow inside quadrature")
        logp = y[None, :] * nu - lam - gammaln(y + 1.0)[None, :]
        mean = lam
    return logp.sum(axis=1), mean


def marginal_likelihood(
    spec: ModelSpec,
    block: Block,
    theta: ParameterPoint,
    y: np.ndarray,
    rule: QuadratureRule | None = None,
) -> float:
    """P(Y | theta, zeta) by Gauss-Hermite quadrature over the intercept.

    Returns exactly 0.0 when the quadrature sum underflows; callers that
    need to distinguish underflow test for that value.
    """
    y = _check_outcome(spec, y)
    rule = rule or default_rule(theta.sigma2)
    eta = model_matrix(spec, block) @ theta.beta
    logc, _ = _log_conditional(spec, eta, theta.sigma, y, rule)
    return float(rule.weights @ np.exp(logc))


def likelihood_grad_eta(
    spec: ModelSpec,
    block: Block,
    theta: ParameterPoint,
    y: np.ndarray,
    rule: QuadratureRule | None = None,
) -> np.ndarray:
    """Gradient of the marginal likelihood with respect to eta."""
    y = _check_outcome(spec, y)
    rule = rule or default_rule(theta.sigma2)
    eta = model_matrix(spec, block) @ theta.beta
    logc, mean = _log_conditional(spec, eta, theta.sigma, y, rule)
    c = np.exp(logc)
    return (rule.weights * c) @ (y[None, :] - mean)


def q_matrix_multi(
    etas: np.ndarray, sigma2: float, rule: QuadratureRule
) -> tuple[np.ndarray, np.ndarray]:
    """Outcome-enumeration Q for a batch of linear-predictor vectors.

    Returns ``(Q, underflow_counts)`` with shapes (k, m, m) and (k,).
    Logit link only; the conditional response is Bernoulli.
    """
    etas = np.atleast_2d(np.asarray(etas, dtype=float))
    k, m = etas.shape
    if m > MAX_ENUM_M:
        raise ValidationError(f"outcome enumeration capped at m={MAX_ENUM_M}")
    sigma = np.sqrt(sigma2)
    B = outcome_matrix(m)

    nu = etas[:, None, :] + sigma * rule.nodes[None, :, None]  # (k, n, m)
    logh = log_expit(nu)
    log1mh = log_expit(-nu)
    # (k, 2^m, n): log conditional probability of each outcome at each node
    logc = np.einsum("ym,knm->kyn", B, logh) + np.einsum("ym,knm->kyn", 1.0 - B, log1mh)
    c = np.exp(logc)
    p_y = c @ rule.weights  # (k, 2^m)
    h = expit(nu)
    grad = B[None, :, :] * p_y[:, :, None] - np.einsum(
        "kyn,n,knj->kyj", c, rule.weights, h
    )  # (k, 2^m, m)

    keep = p_y >= UNDERFLOW_MIN
    inv_p = np.where(keep, 1.0 / np.where(keep, p_y, 1.0), 0.0)
    q = np.einsum("kyi,ky,kyj->kij", grad, inv_p, grad)
    q = 0.5 * (q + np.transpose(q, (0, 2, 1)))
    return q, (~keep).sum(axis=1)


def q_matrix(
    spec: ModelSpec,
    eta: np.ndarray,
    sigma2: float,
    rule: QuadratureRule | None = None,
) -> np.ndarray:
    """The m x m enumeration kernel Q(eta, sigma2) for the logit link."""
    if spec.link != "logit":
        raise ValidationError("Q-matrix enumeration requires the logit link")
    rule = rule or default_rule(sigma2)
    q, _ = q_matrix_multi(np.asarray(eta, dtype=float)[None, :], sigma2, rule)
    return q[0]


def info_naive_binary(
    spec: ModelSpec,
    block: Block,
    theta: ParameterPoint,
    rule: QuadratureRule | None = None,
) -> InfoMatrix:
    """Naive outcome-enumeration information matrix F^T Q F."""
    if spec.link != "logit":
        raise ValidationError("naive enumeration requires the logit link")
    rule = rule or default_rule(theta.sigma2)
    F = model_matrix(spec, block)
    q, under = q_matrix_multi((F @ theta.beta)[None, :], theta.sigma2, rule)
    mat = F.T @ q[0] @ F
    return InfoMatrix(
        0.5 * (mat + mat.T),
        "naive",
        {"quad_order": rule.n, "underflow_outcomes": int(under[0])},
    )


def info_mc(
    spec: ModelSpec,
    block: Block,
    theta: ParameterPoint,
    n_samples: int,
    rng: np.random.Generator,
    rule: QuadratureRule | None = None,
) -> InfoMatrix:
    """Monte Carlo information matrix from simulated response vectors.

    Each sampled Y contributes the outer product of the eta-score
    (dP/d eta)/P, evaluated by quadrature; the score form avoids explicit
    division by tiny likelihoods.  Entrywise standard errors of the
    estimate are recorded in ``meta['se']``.
    """
    if n_samples < 1000:
        raise ValidationError("info_mc needs n_samples >= 1000")
    rule = rule or default_rule(theta.sigma2)
    F = model_matrix(spec, block)
    eta = F @ theta.beta
    sigma = theta.sigma

    nu = eta[None, :] + sigma * rule.nodes[:, None]  # (n, m)
    if spec.link == "logit":
        mean = expit(nu)
        u = rng.normal(0.0, sigma, size=n_samples)
        ys = (rng.random((n_samples, spec.m)) < expit(eta[None, :] + u[:, None])).astype(
            float
        )
        logc = ys @ log_expit(nu).T + (1.0 - ys) @ log_expit(-nu).T
    else:
        lam = np.exp(nu)
        if not np.all(np.isfinite(lam)):
            raise InfeasibleError("Poisson rate overflow inside quadrature")
        u = rng.normal(0.0, sigma, size=n_samples)
        rates = np.exp(eta[None, :] + u[:, None])
        if np.any(rates > 1e15):
            raise InfeasibleError("Poisson rate overflow while simulating responses")
        ys = rng.poisson(rates).astype(float)
        mean = lam
        logc = ys @ nu.T - lam.sum(axis=1)[None, :] - gammaln(ys + 1.0).sum(axis=1)[:, None]

    logw = np.log(rule.weights)
    logpost = logc + logw[None, :]
    peak = logpost.max(axis=1)
    kept = np.isfinite(peak)
    n_dropped = int(n_samples - kept.sum())
    if kept.sum() == 0:
        raise InfeasibleError("all Monte Carlo samples underflowed")
    post = np.exp(logpost[kept] - peak[kept, None])
    post /= post.sum(axis=1, keepdims=True)
    scores = (ys[kept] - post @ mean) @ F  # (s, p) eta-score mapped through F

    outer = scores[:, :, None] * scores[:, None, :]
    mat = outer.mean(axis=0)
    se = outer.std(axis=0, ddof=1) / np.sqrt(outer.shape[0])
    return InfoMatrix(
        0.5 * (mat + mat.T),
        "monte_carlo",
        {
            "quad_order": rule.n,
            "n_samples": int(n_samples),
            "n_dropped": n_dropped,
            "se": se,
        },
    )


def info_design(
    per_block_info: Callable[[Block], InfoMatrix], design: Design
) -> InfoMatrix:
    """Weighted sum of per-block information matrices."""
    infos = [per_block_info(b) for b in design.blocks]
    methods = {im.method for im in infos}
    if len(methods) != 1:
        raise ValidationError(f"mixed information methods in one design: {methods}")
    mat = sum(w * im.matrix for w, im in zip(design.weights, infos))
    meta = dict(infos[0].meta)
    meta["n_blocks"] = design.b
    return InfoMatrix(0.5 * (mat + mat.T), infos[0].method, meta)
