"""Moment-based information approximations from marginal models.

These are the cheap alternatives to outcome enumeration: marginal
quasi-likelihood (a linearization about zero random effects), generalized
estimating equations with an exchangeable working correlation, their
attenuation-adjusted counterparts for the logit link, and the direct
quasi-likelihood information for the Poisson random intercept model,
whose marginal moments are available in closed form.

Covariance matrices here are positive definite by construction, so they
are factorized by Cholesky without jitter; a factorization failure
signals invalid inputs and is raised as an error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import expit

from .errors import InfeasibleError, SingularVError, ValidationError
from .enumeration import InfoMatrix
from .model import Block, Design, ModelSpec, ParameterPoint, attenuate, model_matrix


@dataclass(frozen=True)
class WorkingCorrelation:
    """Exchangeable working correlation R = (1-rho) I + rho 1 1^T."""

    rho: float
    m: int

    def __post_init__(self):
        if self.m < 1:
            raise ValidationError("m must be >= 1")
        lo = -1.0 / (self.m - 1) if self.m > 1 else -np.inf
        if not (lo < self.rho < 1.0):
            raise ValidationError(
                f"rho={self.rho} outside the positive-definite range ({lo}, 1) for m={self.m}"
            )

    def matrix(self) -> np.ndarray:
        return (1.0 - self.rho) * np.eye(self.m) + self.rho * np.ones((self.m, self.m))

    def inverse(self) -> np.ndarray:
        # Sherman-Morrison on (1-rho) I + rho 1 1^T.
        a = 1.0 / (1.0 - self.rho)
        b = self.rho / ((1.0 - self.rho) * (1.0 - self.rho + self.m * self.rho))
        return a * np.eye(self.m) - b * np.ones((self.m, self.m))


def _variance_function(spec: ModelSpec, eta: np.ndarray) -> np.ndarray:
    """Conditional GLM variance v(x; 0, beta) as a function of eta."""
    if spec.link == "logit":
        return expit(eta) * expit(-eta)
    return np.exp(eta)


def _check_w(v: np.ndarray) -> None:
    bad = np.argwhere(~np.isfinite(v) | (v <= 0.0))
    if bad.size:
        raise SingularVError(int(bad[0][-1]), "conditional variance underflow or overflow")


def mql_design_matrix(
    spec: ModelSpec, F: np.ndarray, weights, beta: np.ndarray, sigma2: float
) -> np.ndarray:
    """Weighted MQL information over stacked model matrices (b, m, p).

    V = diag(1/v) + sigma2 1 1^T is diagonal plus rank one, so each block's
    F^T V^{-1} F collapses by Sherman-Morrison to
    F^T diag(v) F - sigma2 (F^T v)(F^T v)^T / (1 + sigma2 sum(v)),
    which the block-level Cholesky route cross-checks in the tests.
    """
    w = np.asarray(weights, dtype=float)
    eta = F @ beta
    v = _variance_function(spec, eta)
    _check_w(v)
    fv = np.einsum("bmi,bm->bi", F, v)  # (b, p) = F^T v
    base = np.einsum("b,bm,bmi,bmj->ij", w, v, F, F)
    shrink = w * sigma2 / (1.0 + sigma2 * v.sum(axis=1))
    return base - np.einsum("b,bi,bj->ij", shrink, fv, fv)


def gee_design_matrix(
    spec: ModelSpec, F: np.ndarray, weights, beta_star: np.ndarray, rho: float
) -> np.ndarray:
    """Weighted GEE information over stacked model matrices (b, m, p).

    For the canonical links used here D = V*, and the exchangeable
    R(rho)^{-1} = a I - b 1 1^T is explicit, so each block contributes
    a F^T diag(v) F - b (F^T sqrt(v))(F^T sqrt(v))^T.
    """
    m = F.shape[1]
    corr = WorkingCorrelation(rho, m)  # validates the PD range of rho
    a = 1.0 / (1.0 - rho)
    b = rho / ((1.0 - rho) * (1.0 - rho + m * rho))
    del corr
    w = np.asarray(weights, dtype=float)
    eta = F @ beta_star
    v = _variance_function(spec, eta)
    _check_w(v)
    fs = np.einsum("bmi,bm->bi", F, np.sqrt(v))  # (b, p) = F^T sqrt(v)
    base = np.einsum("b,bm,bmi,bmj->ij", w, v, F, F)
    return a * base - np.einsum("b,bi,bj->ij", b * w, fs, fs)


def mql_block_matrix(spec: ModelSpec, F: np.ndarray, beta: np.ndarray, sigma2: float) -> np.ndarray:
    """Single-block marginal quasi-likelihood information F^T V^{-1} F."""
    eta = F @ beta
    v = _variance_function(spec, eta)
    _check_w(v)
    m = F.shape[0]
    V = np.diag(1.0 / v) + sigma2 * np.ones((m, m))
    try:
        cf = cho_factor(V, lower=True)
    except LinAlgError as e:
        raise InfeasibleError(f"marginal covariance not positive definite: {e}") from e
    return F.T @ cho_solve(cf, F)


def gee_block_matrix(
    spec: ModelSpec, F: np.ndarray, beta_star: np.ndarray, rho: float
) -> np.ndarray:
    """Single-block GEE information with exchangeable working correlation."""
    eta = F @ beta_star
    v = _variance_function(spec, eta)
    _check_w(v)
    m = F.shape[0]
    corr = WorkingCorrelation(rho, m)
    s = np.sqrt(v)
    A = corr.matrix() * np.outer(s, s)
    try:
        cf = cho_factor(A, lower=True)
    except LinAlgError as e:
        raise InfeasibleError(f"working covariance not positive definite: {e}") from e
    DF = v[:, None] * F
    return DF.T @ cho_solve(cf, DF)


def _design_stack(spec: ModelSpec, design: Design) -> tuple[np.ndarray, np.ndarray]:
    F = np.stack([model_matrix(spec, blk) for blk in design.blocks])
    return F, np.asarray(design.weights, dtype=float)


def info_mql(spec: ModelSpec, design: Design, theta: ParameterPoint) -> InfoMatrix:
    """Marginal quasi-likelihood information for a design."""
    F, w = _design_stack(spec, design)
    mat = mql_design_matrix(spec, F, w, theta.beta, theta.sigma2)
    return InfoMatrix(0.5 * (mat + mat.T), "mql", {"sigma2": theta.sigma2})


def info_gee(
    spec: ModelSpec, design: Design, beta_star: np.ndarray, rho: float
) -> InfoMatrix:
    """GEE information for a design at marginal parameters beta_star."""
    beta_star = np.asarray(beta_star, dtype=float)
    F, w = _design_stack(spec, design)
    mat = gee_design_matrix(spec, F, w, beta_star, rho)
    return InfoMatrix(0.5 * (mat + mat.T), "gee", {"rho": rho})


def info_adj_mql(spec: ModelSpec, design: Design, theta: ParameterPoint) -> InfoMatrix:
    """Marginal quasi-likelihood evaluated at the attenuated coefficients."""
    theta_adj = ParameterPoint(attenuate(theta.beta, theta.sigma2), theta.sigma2)
    inner = info_mql(spec, design, theta_adj)
    return InfoMatrix(inner.matrix, "adj_mql", dict(inner.meta))


def info_adj_gee(
    spec: ModelSpec, design: Design, theta: ParameterPoint, rho: float
) -> InfoMatrix:
    """GEE information evaluated at the attenuated coefficients."""
    inner = info_gee(spec, design, attenuate(theta.beta, theta.sigma2), rho)
    meta = dict(inner.meta)
    meta["sigma2"] = theta.sigma2
    return InfoMatrix(inner.matrix, "adj_gee", meta)


def poisson_marginal_moments(
    spec: ModelSpec, block: Block, theta: ParameterPoint
) -> tuple[np.ndarray, np.ndarray]:
    """Exact marginal mean and covariance of the Poisson random intercept
    model (lognormal mixture moments)."""
    if spec.link != "log":
        raise ValidationError("Poisson moments require the log link")
    eta = model_matrix(spec, block) @ theta.beta
    mu = np.exp(eta + 0.5 * theta.sigma2)
    if not np.all(np.isfinite(mu)):
        bad = int(np.flatnonzero(~np.isfinite(mu))[0])
        raise InfeasibleError(f"marginal mean overflow at unit {bad}")
    a = np.expm1(theta.sigma2)
    cov = a * np.outer(mu, mu) + np.diag(mu)
    if not np.all(np.isfinite(cov)):
        bad = int(np.flatnonzero(~np.isfinite(cov))[0] // cov.shape[0])
        raise InfeasibleError(f"marginal covariance overflow at unit {bad}")
    return mu, cov


def quasi_poisson_design_matrix(
    spec: ModelSpec, F: np.ndarray, weights, beta: np.ndarray, sigma2: float
) -> np.ndarray:
    """Weighted direct quasi-likelihood information over stacked blocks.

    With D = diag(mu) F and Sigma = diag(mu) + a mu mu^T (a = e^{sigma2}-1),
    Sherman-Morrison collapses each block's D^T Sigma^{-1} D to
    F^T [diag(mu) - a mu mu^T / (1 + a sum(mu))] F.
    """
    eta = F @ beta  # (b, m)
    mu = np.exp(eta + 0.5 * sigma2)
    if not np.all(np.isfinite(mu)):
        bad = int(np.argwhere(~np.isfinite(mu))[0][-1])
        raise InfeasibleError(f"marginal mean overflow at unit {bad}")
    a = np.expm1(sigma2)
    denom = 1.0 + a * mu.sum(axis=1)  # (b,)
    if not np.all(np.isfinite(denom) & (denom > 0)):
        raise InfeasibleError("singular marginal covariance in quasi-likelihood")
    m = F.shape[1]
    kernel = np.eye(m) * mu[:, :, None] - (a / denom)[:, None, None] * (
        mu[:, :, None] * mu[:, None, :]
    )
    return np.einsum("b,bmi,bmn,bnj->ij", np.asarray(weights, dtype=float), F, kernel, F)


def quasi_poisson_block_matrix(
    spec: ModelSpec, F: np.ndarray, beta: np.ndarray, sigma2: float
) -> np.ndarray:
    """Single-block direct quasi-likelihood information D^T Sigma^{-1} D."""
    return quasi_poisson_design_matrix(spec, F[None, :, :], np.ones(1), beta, sigma2)


def info_quasi_poisson(spec: ModelSpec, design: Design, theta: ParameterPoint) -> InfoMatrix:
    """Direct quasi-likelihood information for the Poisson model."""
    if spec.link != "log":
        raise ValidationError("direct quasi-likelihood requires the log link")
    F, w = _design_stack(spec, design)
    mat = quasi_poisson_design_matrix(spec, F, w, theta.beta, theta.sigma2)
    return InfoMatrix(0.5 * (mat + mat.T), "quasi_direct", {"sigma2": theta.sigma2})
