"""Kriging interpolation of the enumeration kernel Q over eta.

Q is an expensive, smooth, matrix-valued function of the linear
predictors at fixed sigma2, which makes it a natural surrogate target:
train once over an eta box, then reuse the interpolator for every beta
(and so for every point of a prior sample).  Each upper-triangle entry
of Q gets its own zero-mean interpolator with the order-2 compactly
supported Wendland correlation; a small nugget keeps the kernel solve
stable at large training sets.  For blocks of two units a regular grid
with bilinear interpolation is the faster alternative.

Bundles are immutable after fitting and serializable to a versioned
``.npz`` file; predictions after a save/load round trip are bit-for-bit
identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.spatial.distance import cdist

from .enumeration import InfoMatrix, q_matrix_multi
from .errors import (
    BundleMismatchError,
    ExtrapolationError,
    FileFormatError,
    InfeasibleError,
    ValidationError,
)
from .model import Block, ModelSpec, ParameterPoint, model_matrix
from .quadrature import QuadratureRule, default_rule

BUNDLE_FORMAT_VERSION = 1
DEFAULT_NUGGET = 1e-8
# Queries may exceed the training box by this fraction of its width before
# prediction refuses to extrapolate.
BOX_SLACK = 0.10


def lhs_sample(box: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Latin hypercube sample: one point per equal-width stratum per axis."""
    box = np.atleast_2d(np.asarray(box, dtype=float))
    if n < 1:
        raise ValidationError("need n >= 1 samples")
    d = box.shape[0]
    u = np.empty((n, d))
    for k in range(d):
        strata = rng.permutation(n)
        u[:, k] = (strata + rng.random(n)) / n
    return box[:, 0] + u * (box[:, 1] - box[:, 0])


def wendland2(dist: np.ndarray, theta: float) -> np.ndarray:
    """Order-2 compactly supported Wendland correlation on distances."""
    r = np.asarray(dist, dtype=float) / theta
    return np.where(r < 1.0, (1.0 - r) ** 4 * (1.0 + 4.0 * r), 0.0)


@dataclass(frozen=True)
class TrainingSet:
    sigma2: float
    m: int
    box: np.ndarray  # (m, 2)
    points: np.ndarray  # (n, m)
    targets: np.ndarray  # (n, m, m)
    quad_order: int

    def __post_init__(self):
        box = np.ascontiguousarray(self.box, dtype=float)
        pts = np.ascontiguousarray(self.points, dtype=float)
        tg = np.ascontiguousarray(self.targets, dtype=float)
        if box.shape != (self.m, 2) or pts.ndim != 2 or pts.shape[1] != self.m:
            raise ValidationError("training set shapes inconsistent")
        if tg.shape != (pts.shape[0], self.m, self.m):
            raise ValidationError("one m x m target per training point required")
        if np.any(pts < box[:, 0] - 1e-12) or np.any(pts > box[:, 1] + 1e-12):
            raise ValidationError("training points outside the box")
        for a in (box, pts, tg):
            a.flags.writeable = False
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "targets", tg)

    @property
    def n(self) -> int:
        return self.points.shape[0]


def build_training_set(
    spec: ModelSpec,
    sigma2: float,
    box: np.ndarray | None = None,
    n: int = 1000,
    rng: np.random.Generator | None = None,
    rule: QuadratureRule | None = None,
) -> TrainingSet:
    """Evaluate Q at a Latin hypercube sample of eta vectors."""
    if spec.m > 8:
        raise ValidationError("training-set enumeration supported for m <= 8")
    if spec.link != "logit":
        raise ValidationError("Q surrogates require the logit link")
    box = np.atleast_2d(
        np.asarray(box, dtype=float)
        if box is not None
        else np.tile([-20.0, 20.0], (spec.m, 1))
    )
    rng = rng or np.random.default_rng()
    rule = rule or default_rule(sigma2)
    pts = lhs_sample(box, n, rng)
    targets, _ = q_matrix_multi(pts, sigma2, rule)
    return TrainingSet(float(sigma2), spec.m, box, pts, targets, rule.n)


def _triu_index(m: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(m) for j in range(i, m)]


class KrigingBundle:
    """Per-entry Wendland-kernel interpolators of Q over an eta box.

    Treat as immutable after construction; ``psd_clip_count`` is a
    prediction diagnostic, not model state.
    """

    kind = "kriging"

    def __init__(
        self,
        m: int,
        sigma2: float,
        box: np.ndarray,
        points: np.ndarray,
        coeffs: np.ndarray,
        range_param: float,
        nugget: float,
        quad_order: int,
        diagnostics: dict | None = None,
    ):
        self.m = int(m)
        self.sigma2 = float(sigma2)
        self.box = np.ascontiguousarray(box, dtype=float)
        self.points = np.ascontiguousarray(points, dtype=float)
        self.coeffs = np.ascontiguousarray(coeffs, dtype=float)
        self.range_param = float(range_param)
        self.nugget = float(nugget)
        self.quad_order = int(quad_order)
        self.diagnostics = diagnostics or {}
        self.entries = _triu_index(self.m)
        self.psd_clip_count = 0
        for a in (self.box, self.points, self.coeffs):
            a.flags.writeable = False

    def _check_box(self, etas: np.ndarray) -> None:
        width = self.box[:, 1] - self.box[:, 0]
        lo = self.box[:, 0] - BOX_SLACK * width
        hi = self.box[:, 1] + BOX_SLACK * width
        if np.any(etas < lo) or np.any(etas > hi):
            raise ExtrapolationError(
                "query eta outside the training box by more than 10% of its width"
            )

    def predict_batch(self, etas: np.ndarray) -> np.ndarray:
        etas = np.atleast_2d(np.asarray(etas, dtype=float))
        if etas.shape[1] != self.m:
            raise BundleMismatchError(f"bundle is for m={self.m}")
        self._check_box(etas)
        k = wendland2(cdist(etas, self.points), self.range_param)
        flat = k @ self.coeffs  # (batch, n_entries)
        q = np.empty((etas.shape[0], self.m, self.m))
        for e, (i, j) in enumerate(self.entries):
            q[:, i, j] = flat[:, e]
            q[:, j, i] = flat[:, e]
        # Interpolation does not preserve positive semidefiniteness; clip
        # negative eigenvalues so downstream log-determinants are defined.
        vals, vecs = np.linalg.eigh(q)
        neg = vals < 0.0
        if np.any(neg):
            self.psd_clip_count += int(np.any(neg, axis=1).sum())
            vals = np.maximum(vals, 0.0)
            q = np.einsum("bij,bj,bkj->bik", vecs, vals, vecs)
            q = 0.5 * (q + np.transpose(q, (0, 2, 1)))
        return q


class GridBundle:
    """Regular-grid Q values with bilinear interpolation (m = 2 only)."""

    kind = "grid"

    def __init__(
        self,
        sigma2: float,
        box: np.ndarray,
        axes: tuple[np.ndarray, np.ndarray],
        values: np.ndarray,  # (g1, g2, m, m)
        quad_order: int,
    ):
        self.m = 2
        self.sigma2 = float(sigma2)
        self.box = np.ascontiguousarray(box, dtype=float)
        self.axes = tuple(np.ascontiguousarray(a, dtype=float) for a in axes)
        self.values = np.ascontiguousarray(values, dtype=float)
        self.quad_order = int(quad_order)
        self.diagnostics = {}
        self.psd_clip_count = 0
        for a in (self.box, self.values, *self.axes):
            a.flags.writeable = False

    def _check_box(self, etas: np.ndarray) -> None:
        width = self.box[:, 1] - self.box[:, 0]
        lo = self.box[:, 0] - BOX_SLACK * width
        hi = self.box[:, 1] + BOX_SLACK * width
        if np.any(etas < lo) or np.any(etas > hi):
            raise ExtrapolationError(
                "query eta outside the training box by more than 10% of its width"
            )

    def predict_batch(self, etas: np.ndarray) -> np.ndarray:
        etas = np.atleast_2d(np.asarray(etas, dtype=float))
        if etas.shape[1] != 2:
            raise BundleMismatchError("grid bundle is for m=2")
        self._check_box(etas)
        ax0, ax1 = self.axes
        x = np.clip(etas[:, 0], ax0[0], ax0[-1])
        y = np.clip(etas[:, 1], ax1[0], ax1[-1])
        i = np.clip(np.searchsorted(ax0, x) - 1, 0, ax0.size - 2)
        j = np.clip(np.searchsorted(ax1, y) - 1, 0, ax1.size - 2)
        tx = (x - ax0[i]) / (ax0[i + 1] - ax0[i])
        ty = (y - ax1[j]) / (ax1[j + 1] - ax1[j])
        tx = tx[:, None, None]
        ty = ty[:, None, None]
        v = self.values
        q = (
            (1 - tx) * (1 - ty) * v[i, j]
            + tx * (1 - ty) * v[i + 1, j]
            + (1 - tx) * ty * v[i, j + 1]
            + tx * ty * v[i + 1, j + 1]
        )
        vals, vecs = np.linalg.eigh(q)
        neg = vals < 0.0
        if np.any(neg):
            self.psd_clip_count += int(np.any(neg, axis=1).sum())
            vals = np.maximum(vals, 0.0)
            q = np.einsum("bij,bj,bkj->bik", vecs, vals, vecs)
            q = 0.5 * (q + np.transpose(q, (0, 2, 1)))
        return q


def fit(
    training: TrainingSet, range_param: float, nugget: float = DEFAULT_NUGGET
) -> KrigingBundle:
    """Fit one zero-mean Wendland interpolator per upper-triangle Q entry.

    A 10% held-out split (every tenth point) provides per-entry RMSE
    diagnostics; the returned bundle is refit on the full training set.
    """
    if range_param <= 0 or nugget < 0:
        raise ValidationError("range_param must be > 0 and nugget >= 0")
    entries = _triu_index(training.m)
    y_all = np.stack(
        [training.targets[:, i, j] for (i, j) in entries], axis=1
    )  # (n, n_entries)

    def solve(points, targets):
        k = wendland2(cdist(points, points), range_param)
        k[np.diag_indices_from(k)] += nugget
        try:
            cf = cho_factor(k, lower=True)
        except LinAlgError as e:
            raise InfeasibleError(
                f"kernel matrix not positive definite (nugget={nugget}); "
                "increase the nugget"
            ) from e
        return cho_solve(cf, targets)

    diagnostics: dict = {"range_param": range_param, "nugget": nugget}
    n = training.n
    if n >= 10:
        test_idx = np.arange(0, n, 10)
        train_idx = np.setdiff1d(np.arange(n), test_idx)
        coef = solve(training.points[train_idx], y_all[train_idx])
        kt = wendland2(
            cdist(training.points[test_idx], training.points[train_idx]), range_param
        )
        pred = kt @ coef
        resid = pred - y_all[test_idx]
        rmse = np.sqrt(np.mean(resid**2, axis=0))
        spread = y_all.max(axis=0) - y_all.min(axis=0)
        diagnostics["heldout_rmse"] = rmse
        diagnostics["entry_range"] = spread
        diagnostics["heldout_rmse_fraction"] = rmse / np.where(spread > 0, spread, 1.0)

    coeffs = solve(training.points, y_all)
    return KrigingBundle(
        training.m,
        training.sigma2,
        training.box,
        training.points,
        coeffs,
        range_param,
        nugget,
        training.quad_order,
        diagnostics,
    )


def predict_q(bundle, eta: np.ndarray) -> np.ndarray:
    """Interpolated Q at a single eta vector."""
    return bundle.predict_batch(np.asarray(eta, dtype=float)[None, :])[0]


def grid_interp_2d(
    spec: ModelSpec,
    sigma2: float,
    grid_resolution: int,
    box: np.ndarray | None = None,
    rule: QuadratureRule | None = None,
) -> GridBundle:
    """Q tabulated on a regular 2-d grid with bilinear prediction."""
    if spec.m != 2:
        raise ValidationError("grid interpolation is the m=2 fast path")
    if grid_resolution < 2:
        raise ValidationError("need at least a 2x2 grid")
    box = np.atleast_2d(
        np.asarray(box, dtype=float) if box is not None else np.tile([-20.0, 20.0], (2, 1))
    )
    rule = rule or default_rule(sigma2)
    ax0 = np.linspace(box[0, 0], box[0, 1], grid_resolution)
    ax1 = np.linspace(box[1, 0], box[1, 1], grid_resolution)
    xx, yy = np.meshgrid(ax0, ax1, indexing="ij")
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    q, _ = q_matrix_multi(pts, sigma2, rule)
    values = q.reshape(grid_resolution, grid_resolution, 2, 2)
    return GridBundle(float(sigma2), box, (ax0, ax1), values, rule.n)


def info_interp(
    spec: ModelSpec, block: Block, theta: ParameterPoint, bundle
) -> InfoMatrix:
    """Interpolated outcome-enumeration information F^T Q(eta) F."""
    if bundle.m != spec.m:
        raise BundleMismatchError(
            f"bundle block size {bundle.m} does not match model m={spec.m}"
        )
    if not math.isclose(bundle.sigma2, theta.sigma2, rel_tol=1e-12, abs_tol=1e-12):
        raise BundleMismatchError(
            f"bundle trained at sigma2={bundle.sigma2}, requested {theta.sigma2}"
        )
    F = model_matrix(spec, block)
    q = predict_q(bundle, F @ theta.beta)
    mat = F.T @ q @ F
    return InfoMatrix(
        0.5 * (mat + mat.T), "interpolated", {"bundle_kind": bundle.kind}
    )


def save_bundle(bundle, path) -> None:
    """Persist a bundle to a versioned .npz file."""
    common = {
        "format_version": np.int64(BUNDLE_FORMAT_VERSION),
        "kind": np.str_(bundle.kind),
        "m": np.int64(bundle.m),
        "sigma2": np.float64(bundle.sigma2),
        "box": bundle.box,
        "quad_order": np.int64(bundle.quad_order),
    }
    if bundle.kind == "kriging":
        np.savez(
            path,
            **common,
            points=bundle.points,
            coeffs=bundle.coeffs,
            range_param=np.float64(bundle.range_param),
            nugget=np.float64(bundle.nugget),
            heldout_rmse=np.asarray(bundle.diagnostics.get("heldout_rmse", [])),
            entry_range=np.asarray(bundle.diagnostics.get("entry_range", [])),
        )
    elif bundle.kind == "grid":
        np.savez(
            path,
            **common,
            axis0=bundle.axes[0],
            axis1=bundle.axes[1],
            values=bundle.values,
        )
    else:  # pragma: no cover - no other kinds exist
        raise ValidationError(f"unknown bundle kind {bundle.kind!r}")


def load_bundle(path, expect_m: int | None = None, expect_sigma2: float | None = None):
    """Load a bundle, optionally checking block size and variance."""
    try:
        with np.load(path, allow_pickle=False) as data:
            if "format_version" not in data:
                raise FileFormatError(f"{path}: not a surrogate bundle")
            version = int(data["format_version"])
            if version != BUNDLE_FORMAT_VERSION:
                raise FileFormatError(
                    f"{path}: bundle format version {version} not supported"
                )
            kind = str(data["kind"])
            m = int(data["m"])
            sigma2 = float(data["sigma2"])
            if expect_m is not None and m != expect_m:
                raise BundleMismatchError(f"bundle has m={m}, expected {expect_m}")
            if expect_sigma2 is not None and not math.isclose(
                sigma2, expect_sigma2, rel_tol=1e-12, abs_tol=1e-12
            ):
                raise BundleMismatchError(
                    f"bundle trained at sigma2={sigma2}, expected {expect_sigma2}"
                )
            if kind == "kriging":
                diagnostics = {}
                if data["heldout_rmse"].size:
                    diagnostics["heldout_rmse"] = data["heldout_rmse"]
                    diagnostics["entry_range"] = data["entry_range"]
                return KrigingBundle(
                    m,
                    sigma2,
                    data["box"],
                    data["points"],
                    data["coeffs"],
                    float(data["range_param"]),
                    float(data["nugget"]),
                    int(data["quad_order"]),
                    diagnostics,
                )
            if kind == "grid":
                return GridBundle(
                    sigma2,
                    data["box"],
                    (data["axis0"], data["axis1"]),
                    data["values"],
                    int(data["quad_order"]),
                )
            raise FileFormatError(f"{path}: unknown bundle kind {kind!r}")
    except (OSError, ValueError, KeyError) as e:
        raise FileFormatError(f"{path}: cannot read bundle ({e})") from e
