"""Model, block, and design value types plus the operations on them.

A model couples a link function (logit for Bernoulli, log for Poisson
conditional responses) with a regressor basis built from an intercept,
linear terms, and two-way products of the controllable variables.  A
block groups ``m`` units that share one random-intercept draw; a design
is a weighted set of support blocks with weights on the simplex.

All types are immutable after construction; operations are pure given an
explicit RNG.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import InfeasibleError, InvalidBlockError, ValidationError

# Marginal attenuation constant for the logistic random intercept model,
# c = 16*sqrt(3) / (15*pi).
ATTENUATION_C = 16.0 * math.sqrt(3.0) / (15.0 * math.pi)

# Coordinates closer than this are treated as tied when sorting treatments.
_SORT_TOL = 1e-9
# Blocks whose sorted treatments differ by less than this (max-norm) merge.
_BLOCK_EQ_TOL = 1e-7


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ModelSpec:
    """Link, regressor basis, block size, and variable box.

    ``terms`` lists the regressor basis: ``()`` is the intercept,
    ``(i,)`` the i-th variable, and ``(i, j)`` the product of variables
    i and j (0-based).  ``box`` holds one ``(low, high)`` interval per
    variable; the default is ``[-1, 1]`` for each.
    """

    link: str
    terms: tuple[tuple[int, ...], ...]
    q: int
    m: int
    box: tuple[tuple[float, float], ...] | None = None
    random_intercept: bool = True

    def __post_init__(self):
        if self.link not in ("logit", "log"):
            raise ValidationError(f"unsupported link {self.link!r}")
        if self.q < 1 or self.m < 1:
            raise ValidationError("q and m must be >= 1")
        terms = tuple(tuple(int(i) for i in t) for t in self.terms)
        if len(terms) < 1:
            raise ValidationError("at least one regressor term required")
        for t in terms:
            if len(t) > 2:
                raise ValidationError(f"term {t} has more than two factors")
            if any(i < 0 or i >= self.q for i in t):
                raise ValidationError(f"term {t} references a variable >= q={self.q}")
        object.__setattr__(self, "terms", terms)
        box = self.box if self.box is not None else tuple((-1.0, 1.0) for _ in range(self.q))
        box = tuple((float(lo), float(hi)) for lo, hi in box)
        if len(box) != self.q:
            raise ValidationError("box must have one interval per variable")
        for lo, hi in box:
            if not (lo < hi) or not (math.isfinite(lo) and math.isfinite(hi)):
                raise ValidationError(f"invalid box interval ({lo}, {hi})")
        object.__setattr__(self, "box", box)
        if not self.random_intercept:
            raise ValidationError("only random-intercept models are supported")

    @property
    def p(self) -> int:
        return len(self.terms)

    def regressor(self, x: np.ndarray) -> np.ndarray:
        """Evaluate f(x) for a single treatment vector."""
        x = np.asarray(x, dtype=float)
        out = np.empty(self.p)
        for k, t in enumerate(self.terms):
            if len(t) == 0:
                out[k] = 1.0
            elif len(t) == 1:
                out[k] = x[t[0]]
            else:
                out[k] = x[t[0]] * x[t[1]]
        return out

    def term_names(self) -> list[str]:
        names = []
        for t in self.terms:
            if len(t) == 0:
                names.append("1")
            elif len(t) == 1:
                names.append(f"x{t[0] + 1}")
            else:
                names.append(f"x{t[0] + 1}*x{t[1] + 1}")
        return names


@dataclass(frozen=True)
class ParameterPoint:
    """Fixed effects plus the random-intercept variance."""

    beta: np.ndarray
    sigma2: float

    def __post_init__(self):
        beta = _readonly(np.atleast_1d(self.beta))
        if beta.ndim != 1 or not np.all(np.isfinite(beta)):
            raise ValidationError("beta must be a finite vector")
        object.__setattr__(self, "beta", beta)
        s2 = float(self.sigma2)
        if not math.isfinite(s2) or s2 < 0:
            raise ValidationError("sigma2 must be finite and >= 0")
        object.__setattr__(self, "sigma2", s2)

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)


@dataclass(frozen=True)
class Block:
    """The m treatment vectors applied to one block of units."""

    treatments: np.ndarray

    def __post_init__(self):
        t = np.atleast_2d(np.asarray(self.treatments, dtype=float))
        if t.ndim != 2 or not np.all(np.isfinite(t)):
            raise InvalidBlockError("treatments must be a finite m x q array")
        object.__setattr__(self, "treatments", _readonly(t))

    @property
    def m(self) -> int:
        return self.treatments.shape[0]

    @property
    def q(self) -> int:
        return self.treatments.shape[1]

    def validate_for(self, spec: ModelSpec) -> None:
        if self.m != spec.m or self.q != spec.q:
            raise InvalidBlockError(
                f"block is {self.m}x{self.q}, model expects {spec.m}x{spec.q}"
            )
        lo = np.array([iv[0] for iv in spec.box])
        hi = np.array([iv[1] for iv in spec.box])
        if np.any(self.treatments < lo - 1e-12) or np.any(self.treatments > hi + 1e-12):
            raise InvalidBlockError("treatment coordinates outside the variable box")

    def sorted(self) -> "Block":
        """Treatments sorted lexicographically (ties resolved within 1e-9)."""
        keys = np.round(self.treatments / _SORT_TOL) * _SORT_TOL
        order = np.lexsort(keys.T[::-1])
        return Block(self.treatments[order])


def blocks_equivalent(a: Block, b: Block) -> bool:
    """Equivalence up to treatment permutation, with float tolerance."""
    if a.treatments.shape != b.treatments.shape:
        return False
    return np.max(np.abs(a.sorted().treatments - b.sorted().treatments)) < _BLOCK_EQ_TOL


@dataclass(frozen=True)
class Design:
    """Weighted support blocks; weights strictly positive and sum to one."""

    blocks: tuple[Block, ...]
    weights: np.ndarray

    def __post_init__(self):
        blocks = tuple(self.blocks)
        if len(blocks) < 1:
            raise ValidationError("design needs at least one block")
        w = _readonly(np.atleast_1d(self.weights))
        if w.shape != (len(blocks),):
            raise ValidationError("one weight per block required")
        if np.any(w <= 0):
            raise ValidationError("weights must be strictly positive")
        if abs(float(w.sum()) - 1.0) > 1e-12:
            raise ValidationError("weights must sum to 1 within 1e-12")
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "weights", w)

    @property
    def b(self) -> int:
        return len(self.blocks)


@dataclass(frozen=True)
class PriorSpec:
    """Prior over parameters: a uniform box on beta with fixed sigma2, or an
    explicit list of scenario points."""

    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    sigma2: float | None = None
    scenarios: tuple[ParameterPoint, ...] | None = None

    def __post_init__(self):
        if self.scenarios is not None:
            if self.lower is not None or self.upper is not None:
                raise ValidationError("give either a box prior or scenarios, not both")
            if len(self.scenarios) < 1:
                raise ValidationError("scenario prior needs at least one point")
            object.__setattr__(self, "scenarios", tuple(self.scenarios))
            return
        if self.lower is None or self.upper is None or self.sigma2 is None:
            raise ValidationError("box prior needs lower, upper, and sigma2")
        lo = _readonly(np.atleast_1d(self.lower))
        hi = _readonly(np.atleast_1d(self.upper))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValidationError("lower/upper must be vectors of equal length")
        if np.any(lo > hi):
            raise ValidationError("each lower bound must be <= its upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "sigma2", float(self.sigma2))

    @property
    def is_box(self) -> bool:
        return self.scenarios is None


def model_matrix(spec: ModelSpec, block: Block) -> np.ndarray:
    """The m x p matrix whose rows are f(x_j) in term order."""
    block.validate_for(spec)
    return np.vstack([spec.regressor(x) for x in block.treatments])


def regressor_tensor(spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    """f(x) over an array of treatment vectors: (..., q) -> (..., p)."""
    x = np.asarray(x, dtype=float)
    cols = []
    for t in spec.terms:
        if len(t) == 0:
            cols.append(np.ones(x.shape[:-1]))
        elif len(t) == 1:
            cols.append(x[..., t[0]])
        else:
            cols.append(x[..., t[0]] * x[..., t[1]])
    return np.stack(cols, axis=-1)


def linear_predictors(spec: ModelSpec, block: Block, beta: np.ndarray) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (spec.p,):
        raise ValidationError(f"beta must have length {spec.p}")
    return model_matrix(spec, block) @ beta


def attenuate(beta: np.ndarray, sigma2: float) -> np.ndarray:
    """Shrink conditional coefficients onto the approximate marginal scale."""
    if sigma2 < 0:
        raise ValidationError("sigma2 must be >= 0")
    return np.asarray(beta, dtype=float) / math.sqrt(1.0 + ATTENUATION_C**2 * sigma2)


def invert_attenuation(beta_att: np.ndarray, sigma2: float) -> np.ndarray:
    """Map marginal-scale coefficients back to the conditional scale."""
    if sigma2 < 0:
        raise ValidationError("sigma2 must be >= 0")
    return np.asarray(beta_att, dtype=float) * math.sqrt(1.0 + ATTENUATION_C**2 * sigma2)


def canonicalize(design: Design) -> Design:
    """Unique representative of a design up to within-block permutation.

    Treatments are sorted within each block, equivalent blocks merged with
    summed weights, weights renormalized, and blocks ordered by their
    (sorted) treatment matrices.
    """
    sorted_blocks = [b.sorted() for b in design.blocks]
    weights = np.asarray(design.weights, dtype=float)

    merged: list[tuple[Block, float]] = []
    for blk, w in zip(sorted_blocks, weights):
        for i, (rep, wsum) in enumerate(merged):
            if np.max(np.abs(rep.treatments - blk.treatments)) < _BLOCK_EQ_TOL:
                merged[i] = (rep, wsum + w)
                break
        else:
            merged.append((blk, float(w)))

    def sort_key(item):
        t = item[0].treatments
        return tuple((np.round(t / _SORT_TOL) * _SORT_TOL).ravel())

    merged.sort(key=sort_key)
    new_w = np.array([w for _, w in merged])
    new_w = new_w / new_w.sum()
    return Design(tuple(b for b, _ in merged), new_w)


def simulate_responses(
    spec: ModelSpec, block: Block, theta: ParameterPoint, rng: np.random.Generator
) -> np.ndarray:
    """One response vector: a shared intercept draw, then conditionally
    independent Bernoulli (logit) or Poisson (log) responses per unit."""
    eta = linear_predictors(spec, block, theta.beta)
    u = rng.normal(0.0, theta.sigma) if theta.sigma2 > 0 else 0.0
    nu = eta + u
    if spec.link == "logit":
        return (rng.random(spec.m) < expit(nu)).astype(np.int64)
    lam = np.exp(nu)
    if np.any(lam > 1e15):
        raise InfeasibleError("Poisson rate overflow while simulating responses")
    return rng.poisson(lam).astype(np.int64)
