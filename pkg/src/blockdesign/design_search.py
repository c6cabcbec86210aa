"""D-optimality criteria, the multistart design search, and diagnostics.

The local criterion is the log-determinant of the chosen information
approximation; the pseudo-Bayesian criterion averages it over a sample
from the parameter prior.  The search runs several random starts of an
unconstrained quasi-Newton optimization: treatments are mapped into the
variable box through a sigmoidal bijection and weights live on the
simplex through pinned log-ratios, so no explicit constraints are
needed.  The asymptotic method's objective is discontinuous, so those
searches use restarted Nelder-Mead instead of BFGS.

After each start the design is cleaned up: weights below a threshold
are pruned, equivalent blocks merged, and near-duplicate support blocks
consolidated greedily whenever merging does not reduce the objective.
The best start wins, ties broken by start index.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cholesky
from scipy.optimize import minimize
from scipy.special import expit, logit

from . import closed_form
from .asymptotic import GAMMA_DEFAULT, c_constants, q_matrix_asymptotic_batch
from .enumeration import info_mc, q_matrix_multi
from .errors import InfeasibleError, ValidationError
from .model import (
    Block,
    Design,
    ModelSpec,
    ParameterPoint,
    PriorSpec,
    attenuate,
    canonicalize,
    regressor_tensor,
)
from .quadrature import QuadratureRule, default_rule

NEG_INF = -math.inf


@dataclass(frozen=True)
class MethodSpec:
    """Which information approximation drives the criterion."""

    name: str
    rho: float | None = None
    bundle: object | None = None
    n_samples: int = 10_000
    gamma: float = GAMMA_DEFAULT
    mc_seed: int = 0

    def __post_init__(self):
        known = (
            "naive",
            "mc",
            "mql",
            "gee",
            "adj_mql",
            "adj_gee",
            "asymptotic",
            "interpolated",
            "quasi_direct",
        )
        if self.name not in known:
            raise ValidationError(f"unknown method {self.name!r}")
        if self.name in ("gee", "adj_gee") and self.rho is None:
            raise ValidationError(f"method {self.name!r} requires rho")
        if self.name == "interpolated" and self.bundle is None:
            raise ValidationError("interpolated method requires a fitted bundle")


@dataclass(frozen=True)
class OptimizerConfig:
    """Search budget and numerical knobs for optimize_design."""

    n_starts: int = 20
    max_iterations: int = 200
    fd_rel_step: float = 1e-6
    gtol: float = 1e-6
    obj_tol: float = 1e-9
    seed: int = 0
    support_cap: int | None = None
    prune_weight: float = 1e-4
    merge_obj_tol: float = 1e-8
    nm_restarts: int = 1

    def cap_for(self, spec: ModelSpec) -> int:
        cap = self.support_cap
        if cap is None:
            cap = spec.p * (spec.p + 1) // 2 + 1
        if cap < 1:
            raise ValidationError("support cap must be >= 1")
        return cap


@dataclass(frozen=True)
class DesignSearchResult:
    design: Design
    objective: float
    method: MethodSpec
    start_objectives: tuple[float, ...]
    traces: tuple[tuple[float, ...], ...]
    wall_time: float
    meta: dict = field(default_factory=dict)


def logdet_psd(mat) -> float:
    """log det of a PSD matrix via Cholesky; -inf when singular.

    One retry with a trace-scaled jitter absorbs rounding-level
    indefiniteness; a second failure marks the matrix infeasible.
    """
    m = np.asarray(getattr(mat, "matrix", mat), dtype=float)
    try:
        c = cholesky(m, lower=True)
        return float(2.0 * np.sum(np.log(np.diag(c))))
    except LinAlgError:
        pass
    jitter = 1e-10 * np.trace(m) / m.shape[0]
    if not np.isfinite(jitter) or jitter <= 0:
        return NEG_INF
    try:
        c = cholesky(m + jitter * np.eye(m.shape[0]), lower=True)
        return float(2.0 * np.sum(np.log(np.diag(c))))
    except LinAlgError:
        return NEG_INF


class _Evaluator:
    """Computes per-theta design information matrices for one method.

    Works on raw treatment arrays so the optimizer's inner loop does not
    build Design objects.  Pure given its inputs; the Monte Carlo method
    re-seeds per evaluation so the objective is deterministic.
    """

    def __init__(self, spec: ModelSpec, thetas: list[ParameterPoint], method: MethodSpec):
        self.spec = spec
        self.thetas = thetas
        self.method = method
        self._rules: dict[float, QuadratureRule] = {}
        if method.name in ("adj_mql", "adj_gee"):
            self._betas = [attenuate(t.beta, t.sigma2) for t in thetas]
        else:
            self._betas = [t.beta for t in thetas]
        if method.name == "asymptotic":
            self._ctable = c_constants(spec.m)
        if method.name == "interpolated":
            bundle = method.bundle
            if bundle.m != spec.m:
                raise ValidationError("bundle block size does not match the model")
            for t in thetas:
                if not math.isclose(bundle.sigma2, t.sigma2, rel_tol=1e-12, abs_tol=1e-12):
                    raise ValidationError(
                        "interpolated method requires the bundle's sigma2"
                    )

    def _rule(self, sigma2: float) -> QuadratureRule:
        if sigma2 not in self._rules:
            self._rules[sigma2] = default_rule(sigma2)
        return self._rules[sigma2]

    def info_stack(self, treatments: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """(k, p, p) design information for every theta."""
        spec, method = self.spec, self.method
        X = np.asarray(treatments, dtype=float)
        F = regressor_tensor(spec, X)  # (b, m, p)
        k = len(self.thetas)
        p = spec.p
        out = np.zeros((k, p, p))
        name = method.name

        if name in ("naive", "interpolated"):
            betas = np.stack([t.beta for t in self.thetas], axis=1)  # (p, k)
            etas = np.einsum("bmi,ik->bkm", F, betas).reshape(-1, spec.m)  # (b*k, m)
            if name == "naive":
                q = np.empty((etas.shape[0], spec.m, spec.m))
                groups: dict[float, list[int]] = {}
                for i, t in enumerate(self.thetas):
                    groups.setdefault(t.sigma2, []).append(i)
                if len(groups) == 1:
                    sigma2 = self.thetas[0].sigma2
                    q, _ = q_matrix_multi(etas, sigma2, self._rule(sigma2))
                else:
                    for sigma2, idx in groups.items():
                        sel = np.add.outer(
                            np.arange(F.shape[0]) * k, np.asarray(idx)
                        ).ravel()
                        q[sel], _ = q_matrix_multi(etas[sel], sigma2, self._rule(sigma2))
            else:
                q = method.bundle.predict_batch(etas)
            q = q.reshape(F.shape[0], k, spec.m, spec.m)
            return np.einsum("b,bmi,bkmn,bnj->kij", weights, F, q, F)

        if name == "asymptotic":
            for i, theta in enumerate(self.thetas):
                etas = F @ self._betas[i]  # (b, m)
                q, _ = q_matrix_asymptotic_batch(
                    etas, theta.sigma, self._ctable, method.gamma
                )
                out[i] = np.einsum("b,bmi,bmn,bnj->ij", weights, F, q, F)
            return out

        for i, theta in enumerate(self.thetas):
            beta = self._betas[i]
            if name in ("mql", "adj_mql"):
                out[i] = closed_form.mql_design_matrix(
                    spec, F, weights, beta, theta.sigma2
                )
            elif name in ("gee", "adj_gee"):
                out[i] = closed_form.gee_design_matrix(spec, F, weights, beta, method.rho)
            elif name == "quasi_direct":
                out[i] = closed_form.quasi_poisson_design_matrix(
                    spec, F, weights, beta, theta.sigma2
                )
            elif name == "mc":
                mat = np.zeros((p, p))
                for b, w in enumerate(np.asarray(weights, dtype=float)):
                    rng = np.random.default_rng(
                        np.random.SeedSequence((method.mc_seed, i, b))
                    )
                    info = info_mc(spec, Block(X[b]), theta, method.n_samples, rng)
                    mat += w * info.matrix
                out[i] = mat
            else:  # pragma: no cover
                raise ValidationError(f"unhandled method {name!r}")
        return out

    def objective(self, treatments: np.ndarray, weights: np.ndarray) -> float:
        """Mean log-determinant over thetas; -inf if any theta is singular."""
        infos = self.info_stack(treatments, weights)
        total = 0.0
        for mat in infos:
            ld = logdet_psd(mat)
            if ld == NEG_INF:
                return NEG_INF
            total += ld
        return total / len(self.thetas)


def _as_theta_list(theta_or_prior) -> list[ParameterPoint]:
    if isinstance(theta_or_prior, ParameterPoint):
        return [theta_or_prior]
    return list(theta_or_prior)


def objective_local(
    spec: ModelSpec, design: Design, theta: ParameterPoint, method: MethodSpec
) -> float:
    """log |M(design, theta)| under the selected approximation."""
    ev = _Evaluator(spec, [theta], method)
    X = np.stack([b.treatments for b in design.blocks])
    return ev.objective(X, np.asarray(design.weights))


def objective_bayes(
    spec: ModelSpec,
    design: Design,
    prior_sample: list[ParameterPoint],
    method: MethodSpec,
) -> float:
    """Mean of the local objective over a prior sample."""
    if len(prior_sample) == 0:
        raise ValidationError("prior sample must be nonempty")
    ev = _Evaluator(spec, list(prior_sample), method)
    X = np.stack([b.treatments for b in design.blocks])
    return ev.objective(X, np.asarray(design.weights))


def draw_prior_sample(
    prior: PriorSpec, n: int, rng: np.random.Generator
) -> list[ParameterPoint]:
    """LHS sample from a box prior, or the scenario list as-is."""
    if not prior.is_box:
        return list(prior.scenarios)
    from .surrogate import lhs_sample

    box = np.column_stack([prior.lower, prior.upper])
    pts = lhs_sample(box, n, rng)
    return [ParameterPoint(b, prior.sigma2) for b in pts]


def _unpack(vec: np.ndarray, b: int, m: int, q: int, lo: np.ndarray, hi: np.ndarray):
    s = vec[: b - 1]
    z = vec[b - 1 :].reshape(b, m, q)
    logits = np.concatenate(([0.0], s))
    logits = logits - logits.max()
    w = np.exp(logits)
    w /= w.sum()
    x = lo + (hi - lo) * expit(z)
    return x, w


def _initial_vector(
    b: int, m: int, q: int, rng: np.random.Generator
) -> np.ndarray:
    u = rng.uniform(1e-9, 1.0 - 1e-9, size=(b, m, q))
    return np.concatenate([np.zeros(b - 1), logit(u).ravel()])


def _prune_and_merge(
    treatments: np.ndarray,
    weights: np.ndarray,
    ev: _Evaluator,
    config: OptimizerConfig,
) -> tuple[Design, float]:
    """Post-process one start: prune tiny weights, canonicalize, then
    greedily consolidate near-duplicate blocks while the objective holds."""
    keep = weights >= config.prune_weight
    if not np.any(keep):
        keep = weights == weights.max()
    blocks = [Block(t) for t, k in zip(treatments, keep) if k]
    design = canonicalize(Design(tuple(blocks), weights[keep] / weights[keep].sum()))

    def evaluate(d: Design) -> float:
        return ev.objective(np.stack([b.treatments for b in d.blocks]), np.asarray(d.weights))

    current = evaluate(design)
    while design.b > 1 and current > NEG_INF:
        X = np.stack([b.treatments for b in design.blocks])
        w = np.asarray(design.weights)
        # nearest pair by max-norm distance of sorted treatments
        best_pair, best_dist = None, np.inf
        for i in range(design.b):
            for j in range(i + 1, design.b):
                d = np.max(np.abs(X[i] - X[j]))
                if d < best_dist:
                    best_pair, best_dist = (i, j), d
        i, j = best_pair
        merged_t = (w[i] * X[i] + w[j] * X[j]) / (w[i] + w[j])
        rest = [k for k in range(design.b) if k not in (i, j)]
        new_blocks = [Block(X[k]) for k in rest] + [Block(merged_t)]
        new_w = np.concatenate([w[rest], [w[i] + w[j]]])
        trial = canonicalize(Design(tuple(new_blocks), new_w))
        trial_obj = evaluate(trial)
        if trial_obj >= current - config.merge_obj_tol * max(1.0, abs(current)):
            design, current = trial, trial_obj
        else:
            break
    return design, current


def optimize_design(
    spec: ModelSpec,
    theta_or_prior,
    method: MethodSpec,
    config: OptimizerConfig,
) -> DesignSearchResult:
    """Multistart search for a locally or pseudo-Bayesian D-optimal design.

    ``theta_or_prior`` is a single ParameterPoint or a list of them (a
    prior sample).  Each start draws a random design with the full
    support cap, optimizes it in the unconstrained parameterization, and
    is post-processed; the best start wins.
    """
    t0 = time.perf_counter()
    thetas = _as_theta_list(theta_or_prior)
    ev = _Evaluator(spec, thetas, method)
    b = config.cap_for(spec)
    m, q = spec.m, spec.q
    lo = np.array([iv[0] for iv in spec.box])
    hi = np.array([iv[1] for iv in spec.box])

    seeds = np.random.SeedSequence(config.seed).spawn(config.n_starts)
    results: list[tuple[float, int, Design, tuple[float, ...]]] = []

    for start, seed in enumerate(seeds):
        rng = np.random.default_rng(seed)
        x0 = _initial_vector(b, m, q, rng)
        best_seen = [NEG_INF]
        trace: list[float] = []

        def neg_obj(vec):
            x, w = _unpack(vec, b, m, q, lo, hi)
            val = ev.objective(x, w)
            if val > best_seen[0]:
                best_seen[0] = val
            if val == NEG_INF:
                return 1e12
            return -val

        def record(_xk, *_args):
            trace.append(best_seen[0])

        if method.name == "asymptotic":
            res = None
            xk = x0
            for _ in range(1 + config.nm_restarts):
                res = minimize(
                    neg_obj,
                    xk,
                    method="Nelder-Mead",
                    callback=record,
                    options={
                        "maxiter": config.max_iterations * xk.size,
                        "maxfev": config.max_iterations * xk.size,
                        "fatol": config.obj_tol,
                        "xatol": 1e-6,
                        "adaptive": True,
                    },
                )
                xk = res.x
        else:
            res = minimize(
                neg_obj,
                x0,
                method="BFGS",
                jac="3-point",
                callback=record,
                options={
                    "maxiter": config.max_iterations,
                    "gtol": config.gtol,
                    "finite_diff_rel_step": config.fd_rel_step,
                },
            )

        x, w = _unpack(res.x, b, m, q, lo, hi)
        if ev.objective(x, w) == NEG_INF:
            results.append((NEG_INF, start, None, tuple(trace)))
            continue
        design, obj = _prune_and_merge(x, w, ev, config)
        results.append((obj, start, design, tuple(trace)))

    feasible = [r for r in results if r[0] > NEG_INF]
    if not feasible:
        raise InfeasibleError("no start produced a nonsingular design")
    best = max(feasible, key=lambda r: (r[0], -r[1]))
    return DesignSearchResult(
        design=best[2],
        objective=best[0],
        method=method,
        start_objectives=tuple(r[0] for r in results),
        traces=tuple(r[3] for r in results),
        wall_time=time.perf_counter() - t0,
        meta={"n_starts": config.n_starts, "support_cap": b, "seed": config.seed},
    )


def efficiency_local(
    spec: ModelSpec,
    design: Design,
    theta: ParameterPoint,
    reference_design: Design,
    method: MethodSpec | None = None,
) -> float:
    """{|M(design)| / |M(reference)|}^{1/p} under the scoring method
    (naive enumeration by default)."""
    method = method or MethodSpec("naive")
    ld = objective_local(spec, design, theta, method)
    ld_ref = objective_local(spec, reference_design, theta, method)
    if ld_ref == NEG_INF:
        raise InfeasibleError("reference design is singular under the scoring method")
    if ld == NEG_INF:
        return 0.0
    return math.exp((ld - ld_ref) / spec.p)


def efficiency_bayes(
    spec: ModelSpec,
    design: Design,
    prior_sample: list[ParameterPoint],
    reference_design: Design,
    method: MethodSpec | None = None,
) -> float:
    """exp[{psi(design) - psi(reference)} / p] under the scoring method."""
    method = method or MethodSpec("naive")
    val = objective_bayes(spec, design, prior_sample, method)
    ref = objective_bayes(spec, reference_design, prior_sample, method)
    if ref == NEG_INF:
        raise InfeasibleError("reference design is singular under the scoring method")
    if val == NEG_INF:
        return 0.0
    return math.exp((val - ref) / spec.p)


@dataclass(frozen=True)
class RhoSweepEntry:
    rho: float
    result: DesignSearchResult
    efficiency: float


@dataclass(frozen=True)
class RhoSweepResult:
    entries: tuple[RhoSweepEntry, ...]
    best_index: int
    reference: DesignSearchResult


def rho_tuning_sweep(
    spec: ModelSpec,
    theta: ParameterPoint,
    rho_grid,
    config: OptimizerConfig,
    reference: DesignSearchResult | None = None,
    adjusted: bool = True,
) -> RhoSweepResult:
    """One GEE optimization per rho, each scored by naive efficiency.

    The reference optimum is computed with the naive method under the
    same budget when not supplied.
    """
    rho_grid = list(rho_grid)
    if not rho_grid:
        raise ValidationError("rho grid must be nonempty")
    if reference is None:
        reference = optimize_design(spec, theta, MethodSpec("naive"), config)
    name = "adj_gee" if adjusted else "gee"
    entries = []
    for rho in rho_grid:
        res = optimize_design(spec, theta, MethodSpec(name, rho=rho), config)
        eff = efficiency_local(spec, res.design, theta, reference.design)
        entries.append(RhoSweepEntry(rho, res, eff))
    best = max(range(len(entries)), key=lambda i: entries[i].efficiency)
    return RhoSweepResult(tuple(entries), best, reference)


def relative_estimation_error(
    spec: ModelSpec,
    design: Design,
    theta: ParameterPoint,
    n_blocks: int,
    method: MethodSpec | None = None,
) -> np.ndarray:
    """Per-coefficient sd(beta_hat_i) relative to |beta_i| for an n-block
    experiment; zero coefficients are scaled by the smallest nonzero one."""
    if n_blocks < 1:
        raise ValidationError("n_blocks must be >= 1")
    beta = np.asarray(theta.beta, dtype=float)
    nonzero = np.abs(beta) > 0
    if not np.any(nonzero):
        raise ValidationError("relative error undefined when all coefficients are zero")
    method = method or MethodSpec("naive")
    ev = _Evaluator(spec, [theta], method)
    X = np.stack([b.treatments for b in design.blocks])
    mat = ev.info_stack(X, np.asarray(design.weights))[0]
    try:
        minv = np.linalg.inv(mat)
    except np.linalg.LinAlgError as e:
        raise InfeasibleError("information matrix singular") from e
    sd = np.sqrt(np.diag(minv) / n_blocks)
    denom = np.where(nonzero, np.abs(beta), np.min(np.abs(beta[nonzero])))
    return sd / denom


def equivalence_diagnostic(
    spec: ModelSpec,
    design: Design,
    theta: ParameterPoint,
    method: MethodSpec,
    n_probe_blocks: int,
    rng: np.random.Generator,
) -> float:
    """Directional-derivative probe of local D-optimality.

    Samples random candidate blocks and returns the maximum of
    trace(M(design)^{-1} M(block)) - p; values <= a small tolerance mean
    no probed block improves the design.
    """
    ev = _Evaluator(spec, [theta], method)
    X = np.stack([b.treatments for b in design.blocks])
    mat = ev.info_stack(X, np.asarray(design.weights))[0]
    try:
        minv = np.linalg.inv(mat)
    except np.linalg.LinAlgError as e:
        raise InfeasibleError("design information singular") from e
    lo = np.array([iv[0] for iv in spec.box])
    hi = np.array([iv[1] for iv in spec.box])
    probes = rng.uniform(lo, hi, size=(n_probe_blocks, spec.m, spec.q))
    worst = -np.inf
    for t in probes:
        m_b = ev.info_stack(t[None, :, :], np.ones(1))[0]
        worst = max(worst, float(np.trace(minv @ m_b)) - spec.p)
    return worst
