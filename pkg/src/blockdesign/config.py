"""Run configuration: TOML parsing and validation for the batch CLI.

A run config has ``[model]``, ``[parameters]``, ``[method]``,
``[optimizer]``, and ``[output]`` sections, plus command-specific
sections (``[surrogate]``, ``[profile]``, ``[[scenarios]]`` and
``[[methods]]`` for comparisons).  Unknown keys anywhere are hard
errors, so typos cannot silently change a run.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .design_search import MethodSpec, OptimizerConfig
from .errors import FileFormatError, ValidationError
from .model import ModelSpec, ParameterPoint, PriorSpec, invert_attenuation

METHOD_NAMES = (
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


@dataclass(frozen=True)
class RunConfig:
    spec: ModelSpec
    theta: ParameterPoint | None
    prior: PriorSpec | None
    prior_samples: int
    method: MethodSpec
    bundle_path: str | None
    optimizer: OptimizerConfig
    output: dict
    extra: dict = field(default_factory=dict)

    @property
    def is_bayesian(self) -> bool:
        return self.prior is not None


def _reject_unknown(section: dict, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ValidationError(f"unknown key(s) {sorted(unknown)} in [{where}]")


def _require(section: dict, key: str, where: str):
    if key not in section:
        raise ValidationError(f"missing required key '{key}' in [{where}]")
    return section[key]


def parse_terms(raw, q: int) -> tuple[tuple[int, ...], ...]:
    """Accept terms as strings ('1', 'x1', 'x1*x2') or index lists."""
    terms = []
    for item in raw:
        if isinstance(item, str):
            s = item.replace(" ", "")
            if s in ("1", "intercept"):
                terms.append(())
                continue
            parts = s.split("*")
            idx = []
            for part in parts:
                if not part.startswith("x"):
                    raise ValidationError(f"cannot parse term {item!r}")
                try:
                    idx.append(int(part[1:]) - 1)
                except ValueError as e:
                    raise ValidationError(f"cannot parse term {item!r}") from e
            terms.append(tuple(idx))
        elif isinstance(item, list):
            terms.append(tuple(int(i) for i in item))
        else:
            raise ValidationError(f"cannot parse term {item!r}")
    return tuple(terms)


def parse_model(section: dict) -> ModelSpec:
    _reject_unknown(
        section, {"link", "terms", "q", "m", "box", "random_intercept"}, "model"
    )
    link = _require(section, "link", "model")
    q = int(_require(section, "q", "model"))
    m = int(_require(section, "m", "model"))
    terms = parse_terms(_require(section, "terms", "model"), q)
    box = section.get("box")
    if box is not None:
        box = tuple((float(lo), float(hi)) for lo, hi in box)
    return ModelSpec(
        link=link,
        terms=terms,
        q=q,
        m=m,
        box=box,
        random_intercept=bool(section.get("random_intercept", True)),
    )


def parse_parameters(
    section: dict, p: int
) -> tuple[ParameterPoint | None, PriorSpec | None, int]:
    allowed = {
        "beta",
        "beta_att",
        "sigma2",
        "beta_lower",
        "beta_upper",
        "scenarios",
        "prior_samples",
    }
    _reject_unknown(section, allowed, "parameters")
    n_prior = int(section.get("prior_samples", 50))

    if "beta_lower" in section or "beta_upper" in section:
        lo = np.asarray(_require(section, "beta_lower", "parameters"), dtype=float)
        hi = np.asarray(_require(section, "beta_upper", "parameters"), dtype=float)
        sigma2 = float(_require(section, "sigma2", "parameters"))
        if lo.size != p or hi.size != p:
            raise ValidationError(f"prior bounds must have length p={p}")
        return None, PriorSpec(lower=lo, upper=hi, sigma2=sigma2), n_prior

    if "scenarios" in section:
        pts = []
        for row in section["scenarios"]:
            _reject_unknown(row, {"beta", "beta_att", "sigma2"}, "parameters.scenarios")
            sigma2 = float(_require(row, "sigma2", "parameters.scenarios"))
            beta = _scenario_beta(row, sigma2, p, "parameters.scenarios")
            pts.append(ParameterPoint(beta, sigma2))
        return None, PriorSpec(scenarios=tuple(pts)), n_prior

    sigma2 = float(_require(section, "sigma2", "parameters"))
    beta = _scenario_beta(section, sigma2, p, "parameters")
    return ParameterPoint(beta, sigma2), None, n_prior


def _scenario_beta(section: dict, sigma2: float, p: int, where: str) -> np.ndarray:
    has_beta = "beta" in section
    has_att = "beta_att" in section
    if has_beta == has_att:
        raise ValidationError(f"[{where}] must give exactly one of beta, beta_att")
    raw = np.asarray(section["beta"] if has_beta else section["beta_att"], dtype=float)
    if raw.size != p:
        raise ValidationError(f"beta must have length p={p} in [{where}]")
    return raw if has_beta else invert_attenuation(raw, sigma2)


def parse_method(section: dict) -> tuple[MethodSpec, str | None]:
    allowed = {"name", "rho", "n_samples", "bundle", "gamma", "mc_seed"}
    _reject_unknown(section, allowed, "method")
    name = _require(section, "name", "method")
    if name not in METHOD_NAMES:
        raise ValidationError(f"unknown method {name!r}; choose from {METHOD_NAMES}")
    bundle_path = section.get("bundle")
    kwargs = {}
    if "rho" in section:
        kwargs["rho"] = float(section["rho"])
    if "n_samples" in section:
        kwargs["n_samples"] = int(section["n_samples"])
    if "gamma" in section:
        kwargs["gamma"] = float(section["gamma"])
    if "mc_seed" in section:
        kwargs["mc_seed"] = int(section["mc_seed"])
    if name == "interpolated":
        if bundle_path is None:
            raise ValidationError("[method] interpolated requires 'bundle' path")
        from .surrogate import load_bundle

        kwargs["bundle"] = load_bundle(bundle_path)
    return MethodSpec(name, **kwargs), bundle_path


def parse_optimizer(section: dict) -> OptimizerConfig:
    allowed = {
        "n_starts",
        "max_iterations",
        "fd_rel_step",
        "gtol",
        "obj_tol",
        "seed",
        "support_cap",
        "prune_weight",
        "merge_obj_tol",
        "nm_restarts",
    }
    _reject_unknown(section, allowed, "optimizer")
    kwargs = {}
    for key in allowed:
        if key in section:
            val = section[key]
            if key in ("n_starts", "max_iterations", "seed", "support_cap", "nm_restarts"):
                val = int(val)
            else:
                val = float(val)
            kwargs[key] = val
    return OptimizerConfig(**kwargs)


TOP_LEVEL = {
    "model",
    "parameters",
    "method",
    "optimizer",
    "output",
    "surrogate",
    "profile",
    "scenarios",
    "methods",
    "eval",
}


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as e:
        raise FileFormatError(f"config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise FileFormatError(f"cannot parse {path}: {e}") from e

    _reject_unknown(raw, TOP_LEVEL, "top level")
    spec = parse_model(raw.get("model", {}))
    theta, prior, n_prior = parse_parameters(raw.get("parameters", {}), spec.p)
    method, bundle_path = parse_method(raw.get("method", {"name": "naive"}))
    optimizer = parse_optimizer(raw.get("optimizer", {}))
    output = dict(raw.get("output", {}))
    _reject_unknown(
        output, {"design", "csv", "report", "bundle", "overwrite"}, "output"
    )
    extra = {
        k: raw[k] for k in ("surrogate", "profile", "scenarios", "methods", "eval") if k in raw
    }
    return RunConfig(
        spec=spec,
        theta=theta,
        prior=prior,
        prior_samples=n_prior,
        method=method,
        bundle_path=bundle_path,
        optimizer=optimizer,
        output=output,
        extra=extra,
    )
