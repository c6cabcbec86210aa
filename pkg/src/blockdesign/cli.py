"""Batch command-line front end.

Subcommands:

* ``find``             -- search for a design and write a design file.
* ``eval``             -- re-evaluate a stored design, optionally against a
                          reference design (efficiencies) and with the
                          relative-estimation-error table.
* ``compare``          -- scenario x method efficiency grid as CSV.
* ``train-surrogate``  -- build and persist a Q surrogate bundle.
* ``profile``          -- Monte Carlo efficiency profile of the Poisson
                          single-block family zeta(t) = ((1,1),(-1,1),(1,t)).

Exit codes: 0 success, 1 validation error, 2 numerical infeasibility,
3 I/O or file-format error.  All randomness derives from the config seed,
so reruns are reproducible.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import surrogate
from .config import RunConfig, load_config
from .design_search import (
    MethodSpec,
    OptimizerConfig,
    draw_prior_sample,
    efficiency_bayes,
    efficiency_local,
    logdet_psd,
    objective_bayes,
    objective_local,
    optimize_design,
    relative_estimation_error,
)
from .designfile import read_design, write_design
from .enumeration import info_mc
from .errors import (
    BlockDesignError,
    FileFormatError,
    InfeasibleError,
    ValidationError,
)
from .model import Block, Design, ParameterPoint, invert_attenuation

# Fixed stream labels so every command derives independent RNGs from the
# one config seed.
_STREAM_PRIOR = 101
_STREAM_PROFILE = 202


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, *stream)))


def _theta_or_sample(cfg: RunConfig):
    if cfg.prior is None:
        return cfg.theta
    rng = _rng(cfg.optimizer.seed, _STREAM_PRIOR)
    return draw_prior_sample(cfg.prior, cfg.prior_samples, rng)


def _format_design(design: Design, objective: float, method: str) -> str:
    lines = [f"method: {method}", f"objective: {objective!r}", f"support blocks: {design.b}"]
    for i, (blk, w) in enumerate(zip(design.blocks, design.weights), start=1):
        lines.append(f"block {i} (weight {w:.6f}):")
        for x in blk.treatments:
            coords = ", ".join(f"{v: .6f}" for v in x)
            lines.append(f"    ({coords})")
    return "\n".join(lines)


def _method_meta(cfg: RunConfig) -> dict:
    meta = {"name": cfg.method.name}
    if cfg.method.rho is not None:
        meta["rho"] = cfg.method.rho
    if cfg.bundle_path is not None:
        meta["bundle"] = str(cfg.bundle_path)
    if cfg.method.name == "mc":
        meta["n_samples"] = cfg.method.n_samples
        meta["mc_seed"] = cfg.method.mc_seed
    if cfg.prior is not None:
        meta["prior_samples"] = cfg.prior_samples
    return meta


def cmd_find(config_path: str) -> int:
    cfg = load_config(config_path)
    target = _theta_or_sample(cfg)
    result = optimize_design(cfg.spec, target, cfg.method, cfg.optimizer)
    out_path = cfg.output.get("design", "design.json")
    write_design(
        out_path,
        result.design,
        result.objective,
        cfg.spec,
        cfg.method.name,
        _method_meta(cfg),
        cfg.optimizer.seed,
    )
    print(_format_design(result.design, result.objective, cfg.method.name))
    print(f"design file: {out_path}")
    print(f"wall time: {result.wall_time:.2f}s over {cfg.optimizer.n_starts} starts")
    return 0


def _methods_from_eval(cfg: RunConfig) -> list[MethodSpec]:
    section = cfg.extra.get("eval", {})
    raw = section.get("methods", [])
    methods = []
    for item in raw:
        if isinstance(item, str):
            methods.append(MethodSpec(item, rho=cfg.method.rho))
        else:
            kwargs = dict(item)
            name = kwargs.pop("name")
            if "bundle" in kwargs:
                kwargs["bundle"] = surrogate.load_bundle(kwargs.pop("bundle"))
            methods.append(MethodSpec(name, **kwargs))
    return methods


def cmd_eval(design_path: str, config_path: str) -> int:
    cfg = load_config(config_path)
    section = cfg.extra.get("eval", {})
    allowed = {"reference", "methods", "estimation_error", "n_blocks"}
    unknown = set(section) - allowed
    if unknown:
        raise ValidationError(f"unknown key(s) {sorted(unknown)} in [eval]")

    df = read_design(design_path, cfg.spec)
    target = _theta_or_sample(cfg)
    print(f"design: {design_path} (method {df.method_name}, stored objective {df.objective!r})")

    stored_method = MethodSpec(
        df.method_name,
        rho=df.method_meta.get("rho", cfg.method.rho),
        bundle=cfg.method.bundle if df.method_name == "interpolated" else None,
        n_samples=int(df.method_meta.get("n_samples", cfg.method.n_samples)),
        mc_seed=int(df.method_meta.get("mc_seed", cfg.method.mc_seed)),
    )
    methods = [stored_method] + _methods_from_eval(cfg)
    rows = []
    for ms in methods:
        if cfg.prior is None:
            val = objective_local(cfg.spec, df.design, target, ms)
        else:
            val = objective_bayes(cfg.spec, df.design, target, ms)
        rows.append((ms.name, ms.rho, val))
        print(f"objective[{ms.name}{'' if ms.rho is None else f', rho={ms.rho}'}] = {val!r}")
    recomputed = rows[0][2]
    if math.isfinite(df.objective) and abs(recomputed - df.objective) > 1e-9 * max(
        1.0, abs(df.objective)
    ):
        print(
            f"warning: stored objective differs from recomputation by "
            f"{abs(recomputed - df.objective):.3e}"
        )

    ref_path = section.get("reference")
    if ref_path:
        ref = read_design(ref_path, cfg.spec)
        if cfg.prior is None:
            eff = efficiency_local(cfg.spec, df.design, target, ref.design)
        else:
            eff = efficiency_bayes(cfg.spec, df.design, target, ref.design)
        print(f"efficiency vs {ref_path}: {eff:.6f}")

    if section.get("estimation_error", False):
        if cfg.prior is not None:
            raise ValidationError("estimation-error table needs a single theta")
        n_blocks = int(section.get("n_blocks", 1))
        errors = relative_estimation_error(cfg.spec, df.design, target, n_blocks)
        names = cfg.spec.term_names()
        csv_path = cfg.output.get("csv")
        print(f"relative estimation errors (n_blocks={n_blocks}):")
        for name, err in zip(names, errors):
            print(f"  {name}: {err:.6f}")
        if csv_path:
            _write_csv(
                csv_path,
                ["coefficient", "relative_error"],
                [[name, repr(float(e))] for name, e in zip(names, errors)],
            )
            print(f"estimation-error table: {csv_path}")
    return 0


def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def cmd_compare(config_path: str, paper_scale: bool = False) -> int:
    cfg = load_config(config_path)
    scenarios = cfg.extra.get("scenarios")
    methods_raw = cfg.extra.get("methods")
    if not scenarios or not methods_raw:
        raise ValidationError("compare needs [[scenarios]] and [[methods]] sections")

    base_opt = cfg.optimizer
    if paper_scale:
        base_opt = replace(base_opt, n_starts=max(100, base_opt.n_starts))

    header = [
        "scenario",
        "sigma2",
        "method",
        "rho",
        "objective",
        "efficiency_vs_naive",
        "wall_time_s",
        "error",
    ]
    rows = []
    for si, scen in enumerate(scenarios):
        unknown = set(scen) - {"label", "beta", "beta_att", "sigma2"}
        if unknown:
            raise ValidationError(f"unknown key(s) {sorted(unknown)} in [[scenarios]]")
        sigma2 = float(scen["sigma2"])
        if ("beta" in scen) == ("beta_att" in scen):
            raise ValidationError("[[scenarios]] entries need exactly one of beta, beta_att")
        beta = (
            np.asarray(scen["beta"], dtype=float)
            if "beta" in scen
            else invert_attenuation(np.asarray(scen["beta_att"], dtype=float), sigma2)
        )
        theta = ParameterPoint(beta, sigma2)
        label = scen.get("label", f"scenario{si + 1}")

        ref_cfg = replace(base_opt, seed=_cell_seed(base_opt.seed, si, -1))
        reference = optimize_design(cfg.spec, theta, MethodSpec("naive"), ref_cfg)

        for mi, mr in enumerate(methods_raw):
            unknown = set(mr) - {"name", "rho", "n_samples", "bundle", "gamma"}
            if unknown:
                raise ValidationError(f"unknown key(s) {sorted(unknown)} in [[methods]]")
            kwargs = dict(mr)
            name = kwargs.pop("name")
            if "bundle" in kwargs:
                kwargs["bundle"] = surrogate.load_bundle(kwargs.pop("bundle"))
            ms = MethodSpec(name, **kwargs)
            cell_cfg = replace(base_opt, seed=_cell_seed(base_opt.seed, si, mi))
            t0 = time.perf_counter()
            try:
                if name == "naive":
                    res, eff = reference, 1.0
                else:
                    res = optimize_design(cfg.spec, theta, ms, cell_cfg)
                    eff = efficiency_local(cfg.spec, res.design, theta, reference.design)
                rows.append(
                    [
                        label,
                        repr(sigma2),
                        name,
                        "" if ms.rho is None else repr(ms.rho),
                        repr(res.objective),
                        repr(eff),
                        f"{time.perf_counter() - t0:.3f}",
                        "",
                    ]
                )
            except BlockDesignError as e:
                rows.append(
                    [label, repr(sigma2), name, "", "", "", f"{time.perf_counter() - t0:.3f}", str(e)]
                )
    out = cfg.output.get("csv", "compare.csv")
    _write_csv(out, header, rows)
    print(f"comparison table: {out} ({len(rows)} cells)")
    return 0


def _cell_seed(seed: int, si: int, mi: int) -> int:
    return int(
        np.random.SeedSequence((seed, si + 1, mi + 2)).generate_state(1, np.uint32)[0]
    )


def cmd_train_surrogate(config_path: str) -> int:
    cfg = load_config(config_path)
    section = cfg.extra.get("surrogate")
    if not section:
        raise ValidationError("train-surrogate needs a [surrogate] section")
    allowed = {"kind", "n_train", "box", "range_param", "nugget", "grid_resolution"}
    unknown = set(section) - allowed
    if unknown:
        raise ValidationError(f"unknown key(s) {sorted(unknown)} in [surrogate]")
    if cfg.theta is not None:
        sigma2 = cfg.theta.sigma2
    elif cfg.prior is not None and cfg.prior.is_box:
        sigma2 = cfg.prior.sigma2
    else:
        raise ValidationError("surrogate training needs a fixed sigma2")

    box = section.get("box")
    if box is not None:
        box = np.asarray(box, dtype=float)
        if box.ndim == 1:
            box = np.tile(box, (cfg.spec.m, 1))
    kind = section.get("kind", "kriging")
    out = cfg.output.get("bundle", "bundle.npz")

    if kind == "grid":
        bundle = surrogate.grid_interp_2d(
            cfg.spec, sigma2, int(section.get("grid_resolution", 61)), box=box
        )
        surrogate.save_bundle(bundle, out)
        print(f"grid bundle ({bundle.values.shape[0]}x{bundle.values.shape[1]}): {out}")
        return 0

    n_train = int(section.get("n_train", 1000))
    rng = _rng(cfg.optimizer.seed, 303)
    training = surrogate.build_training_set(cfg.spec, sigma2, box, n_train, rng)
    bundle = surrogate.fit(
        training,
        float(section.get("range_param", 15.0)),
        float(section.get("nugget", surrogate.DEFAULT_NUGGET)),
    )
    surrogate.save_bundle(bundle, out)
    print(f"kriging bundle ({n_train} points, m={cfg.spec.m}, sigma2={sigma2}): {out}")
    rmse = bundle.diagnostics.get("heldout_rmse")
    if rmse is not None:
        spread = bundle.diagnostics["entry_range"]
        print("held-out RMSE per upper-triangle entry (value / entry range):")
        for (i, j), r, s in zip(bundle.entries, rmse, spread):
            frac = r / s if s > 0 else 0.0
            print(f"  Q[{i + 1},{j + 1}]: {r:.3e} / {s:.3e}  ({100 * frac:.2f}%)")
    return 0


def cmd_profile(config_path: str) -> int:
    cfg = load_config(config_path)
    section = cfg.extra.get("profile", {})
    allowed = {"t_min", "t_max", "t_step", "n_samples", "n_batches", "smooth_window"}
    unknown = set(section) - allowed
    if unknown:
        raise ValidationError(f"unknown key(s) {sorted(unknown)} in [profile]")
    if cfg.spec.link != "log":
        raise ValidationError("profile requires the Poisson (log link) model")
    if cfg.theta is None:
        raise ValidationError("profile needs a single theta")
    if cfg.spec.m != 3 or cfg.spec.q != 2:
        raise ValidationError("profile family needs m=3, q=2")

    t_min = float(section.get("t_min", -0.2))
    t_max = float(section.get("t_max", 0.1))
    t_step = float(section.get("t_step", 0.01))
    n_samples = int(section.get("n_samples", 10_000))
    n_batches = int(section.get("n_batches", 10))
    window = int(section.get("smooth_window", 0))
    per_batch = max(1000, n_samples // n_batches)

    ts = np.arange(t_min, t_max + 0.5 * t_step, t_step)
    logdets = np.empty(ts.size)
    ses = np.empty(ts.size)
    for i, t in enumerate(ts):
        block = Block([[1.0, 1.0], [-1.0, 1.0], [1.0, float(t)]])
        batch_mats = []
        for bi in range(n_batches):
            rng = _rng(cfg.optimizer.seed, _STREAM_PROFILE, bi)  # common across t
            info = info_mc(cfg.spec, block, cfg.theta, per_batch, rng)
            batch_mats.append(info.matrix)
        mean_mat = np.mean(batch_mats, axis=0)
        logdets[i] = logdet_psd(mean_mat)
        batch_lds = [logdet_psd(m) for m in batch_mats]
        ses[i] = float(np.std(batch_lds, ddof=1) / np.sqrt(n_batches))

    eff = np.exp((logdets - logdets.max()) / cfg.spec.p)
    header = ["t", "logdet", "se_logdet", "efficiency"]
    cols = [ts, logdets, ses, eff]
    if window > 1:
        kernel = np.ones(window) / window
        smooth = np.convolve(eff, kernel, mode="same")
        header.append("efficiency_smoothed")
        cols.append(smooth)
    rows = [[repr(float(c[i])) for c in cols] for i in range(ts.size)]
    out = cfg.output.get("csv", "profile.csv")
    _write_csv(out, header, rows)
    t_best = ts[int(np.argmax(logdets))]
    print(f"profile table: {out}")
    print(f"argmax t = {t_best:.3f}, max logdet = {logdets.max()!r}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="blockdesign",
        description="D-optimal block designs for GLMMs with random intercepts",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_find = sub.add_parser("find", help="search for a D-optimal design")
    p_find.add_argument("config")

    p_eval = sub.add_parser("eval", help="re-evaluate a stored design")
    p_eval.add_argument("design")
    p_eval.add_argument("config")

    p_cmp = sub.add_parser("compare", help="scenario x method efficiency grid")
    p_cmp.add_argument("config")
    p_cmp.add_argument(
        "--paper-scale",
        action="store_true",
        help="restore paper-scale start counts (>=100 per cell)",
    )

    p_train = sub.add_parser("train-surrogate", help="fit and save a Q surrogate")
    p_train.add_argument("config")

    p_prof = sub.add_parser("profile", help="Poisson Monte Carlo efficiency profile")
    p_prof.add_argument("config")

    args = parser.parse_args(argv)
    try:
        if args.command == "find":
            return cmd_find(args.config)
        if args.command == "eval":
            return cmd_eval(args.design, args.config)
        if args.command == "compare":
            return cmd_compare(args.config, args.paper_scale)
        if args.command == "train-surrogate":
            return cmd_train_surrogate(args.config)
        if args.command == "profile":
            return cmd_profile(args.config)
        parser.error(f"unknown command {args.command!r}")
    except FileFormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except InfeasibleError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
