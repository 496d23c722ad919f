"""Command-line entry point: ``qtb {bounds,estimate,frontier,audit,simulate}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .bounds import (FrontierGrid, MissingCellError, TailError, ThresholdGrid, hull_arrays,
                     sensitivity_mesh)
from .dgp import ConfigError
from .envelope import DomainError, SensitivityPair, TieError
from .estimation import (EmptyArmError, SupportError, TwoSampleData, Variant, estimate_nuisances,
                         one_step_estimate, one_step_mesh)
from .inference import (DegenerateSubsampleError, DensityFloorError, build_bands, frontier_confidence,
                        invert_bands, multiplier_critical, outer_band_arrays, subsample_critical,
                        subsample_size)
from .io import (AnalysisConfig, ConfigKeyError, ResultBundle, Schema, SchemaError, encode, ingest_csv,
                 load_propensity_table)
from .lp import SolverError
from .tilts import DegenerateError

log = logging.getLogger("qtb")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_IDENTIFICATION = 4
EXIT_NUMERICAL = 5
EXIT_STUDY = 6

# checked in order; the first matching family wins
_ERROR_FAMILIES = (
    ((ConfigKeyError, ConfigError), EXIT_CONFIG, "configuration error"),
    ((SchemaError, FileNotFoundError, UnicodeDecodeError), EXIT_INPUT, "input error"),
    ((SupportError, EmptyArmError, MissingCellError), EXIT_IDENTIFICATION, "identification/support error"),
    ((DensityFloorError, DegenerateSubsampleError, SolverError, TailError, TieError, DegenerateError),
     EXIT_NUMERICAL, "numerical error"),
    ((DomainError,), EXIT_IDENTIFICATION, "domain error"),
)


# ---------------------------------------------------------------------------
# pipeline


def outcome_grid(data: TwoSampleData, size: int, placement: str = "uniform") -> ThresholdGrid:
    """Threshold grid for the source outcomes.

    ``uniform`` spaces ``size`` points evenly between the observed extremes;
    ``observed`` uses the distinct outcomes, thinned to ``size`` quantiles.
    """
    ys = np.unique(data.y[data.r == 1])
    if ys.size < 2:
        return ThresholdGrid(np.array([ys[0] - 1.0, ys[0]]))
    if placement == "uniform":
        if ys.size <= size:
            # few distinct values: the support itself is the exact grid
            return ThresholdGrid(ys)
        return ThresholdGrid.uniform(float(ys[0]), float(ys[-1]), size)
    if ys.size > size:
        ys = np.unique(np.quantile(ys, np.linspace(0.0, 1.0, size), method="inverted_cdf"))
    return ThresholdGrid(ys)


def _fit(cfg: AnalysisConfig, data: TwoSampleData, grid: ThresholdGrid, rng: np.random.Generator):
    known = load_propensity_table(cfg.e_table, data.n_cells) if cfg.design == "known" else None
    return estimate_nuisances(data, grid, cfg.folds, cfg.eta, rng=rng, known_e1=known)


def _monotone(values: np.ndarray) -> np.ndarray:
    return np.maximum.accumulate(np.clip(values, 0.0, 1.0), axis=-1)


def _hull_rows(s_points, taus, lo, hi, p_lo, p_hi) -> list:
    rows = []
    for j, s in enumerate(s_points):
        for t, tau in enumerate(taus):
            rows.append({"gamma": s.gamma, "lam": s.lam, "tau": float(tau),
                         "delta_lo": float(lo[j, t]), "delta_hi": float(hi[j, t]),
                         "kappa": float(min(hi[j, t], -lo[j, t])),
                         "plugin_lo": float(p_lo[j, t]), "plugin_hi": float(p_hi[j, t])})
    return rows


def run_pipeline(config: AnalysisConfig, data: TwoSampleData, command: str = "estimate",
                 save_phi: bool = False) -> ResultBundle:
    """Estimate, then optionally bands, quantile inversion and the frontier scan.

    ``command`` is ``bounds`` (point estimates of the hull), ``estimate``
    (adds simultaneous bands and confidence intervals) or ``frontier``.
    """
    if command not in ("bounds", "estimate", "frontier"):
        raise ConfigKeyError(f"unknown pipeline command {command!r}")
    config.validate()
    root = np.random.SeedSequence(config.seed)
    fit_seed, crit_seed = root.spawn(2)
    grid = outcome_grid(data, config.grid_size, config.grid_placement)
    nuis = _fit(config, data, grid, np.random.default_rng(fit_seed))
    for msg in nuis.warnings:
        log.warning(msg)
    taus = np.asarray(config.taus, float)
    meta = {"version": __version__, "seed": config.seed, "config_hash": config.digest(),
            "config": config.to_dict(), "n0": data.n0, "n1": data.n1, "n_cells": data.n_cells,
            "chi": nuis.chi, "warnings": list(nuis.warnings)}
    bundle = ResultBundle(command, metadata=meta)
    bundle.arrays["grid"] = grid.values

    if command == "frontier":
        _frontier(config, data, grid, nuis, bundle, np.random.default_rng(crit_seed))
        return bundle

    s_points = [SensitivityPair(float(g), float(l)) for g, l in config.sensitivity]
    keep = command == "estimate" and config.inference == "multiplier"
    res = one_step_estimate(data, nuis, s_points, config.variant, keep_phi=keep)
    s_points = list(res.process.s_points)
    psi = res.process.values
    lo, hi = hull_arrays(grid.values, _monotone(psi), taus, strict=False)
    p_lo, p_hi = hull_arrays(grid.values, res.plugin, taus, strict=False)
    bundle.arrays["psi"] = psi
    bundle.arrays["psi_plugin"] = res.plugin
    bundle.arrays["tie"] = res.tie
    bundle.metadata["s_points"] = [[s.gamma, s.lam] for s in s_points]
    bundle.tables["hull"] = _hull_rows(s_points, taus, lo, hi, p_lo, p_hi)
    if command == "bounds":
        return bundle

    rng = np.random.default_rng(crit_seed)
    if config.inference == "multiplier":
        crit = [multiplier_critical(res.eif.for_s(j), config.alpha, config.n_draws, rng)
                for j in range(len(s_points))]
        if save_phi:
            bundle.arrays["phi"] = res.eif.phi
    else:
        def pipeline(sub, seed):
            nu = estimate_nuisances(sub, grid, config.folds, config.eta, rng=np.random.default_rng(seed),
                                    known_e1=nuis.e1[0] if nuis.chi == 0 else None)
            # s-major so each sensitivity point is one contiguous block
            return np.moveaxis(one_step_estimate(sub, nu, s_points, config.variant).process.values, 2, 0).ravel()
        width = psi[:, :, 0].size
        blocks = [slice(j * width, (j + 1) * width) for j in range(len(s_points))]
        crit = list(subsample_critical(data, pipeline, subsample_size(data.n, config.subsample_exponent),
                                       config.n_draws, config.alpha, np.moveaxis(psi, 2, 0).ravel(), rng,
                                       blocks=blocks))
    bands = build_bands(res.process, crit, data.n, config.alpha)
    bundle.arrays["band_lower"] = bands.lower
    bundle.arrays["band_upper"] = bands.upper
    bundle.metadata["critical_values"] = [float(c) for c in np.atleast_1d(crit)]
    q_rows = []
    for s in s_points:
        for a in (0, 1):
            for ci in invert_bands(bands, taus, a, s):
                q_rows.append({"gamma": s.gamma, "lam": s.lam, "arm": a, "tau": ci.tau,
                               "q_minus_lo": ci.minus_lo, "q_minus_hi": ci.minus_hi,
                               "q_plus_lo": ci.plus_lo, "q_plus_hi": ci.plus_hi, "tail": ci.tail_flag})
    bundle.tables["quantiles"] = q_rows
    o_lo, o_hi = outer_band_arrays(bands, taus)
    bundle.tables["qte_band"] = [{"gamma": s.gamma, "lam": s.lam, "tau": float(tau),
                                  "lower": float(o_lo[j, t]), "upper": float(o_hi[j, t])}
                                 for j, s in enumerate(s_points) for t, tau in enumerate(taus)]
    return bundle


def _frontier(config, data, grid, nuis, bundle, rng) -> None:
    gammas, lams, _ = sensitivity_mesh(tuple(config.s_rect), tuple(config.mesh))
    shape = (len(gammas), len(lams))
    g = grid.values

    def kappa_of(mesh_vals):
        lo, hi = hull_arrays(g, _monotone(mesh_vals), [config.tau0], strict=False)
        return np.minimum(hi[:, 0], -lo[:, 0]).reshape(shape)

    kappa = kappa_of(one_step_mesh(data, nuis, gammas, lams))

    def pipeline(sub, seed):
        nu = estimate_nuisances(sub, grid, config.folds, config.eta, rng=np.random.default_rng(seed),
                                known_e1=nuis.e1[0] if nuis.chi == 0 else None)
        return kappa_of(one_step_mesh(sub, nu, gammas, lams)).ravel()

    m = subsample_size(data.n, config.subsample_exponent)
    d = subsample_critical(data, pipeline, m, config.n_draws, config.alpha, kappa.ravel(), rng)
    front = FrontierGrid(gammas, lams, kappa, config.tau0)
    sets = frontier_confidence(front, d, data.n)
    bundle.arrays.update(gammas=gammas, lams=lams, kappa=kappa, inner=sets.inner, outer=sets.outer,
                         outer_level=sets.outer_level)
    bundle.metadata.update(critical_value=d, subsample_size=m, caveat=sets.caveat)
    bundle.tables["frontier"] = [
        {"gamma": float(gammas[i]), "lam": float(lams[j]), "kappa": float(kappa[i, j]),
         "non_refuting": bool(kappa[i, j] >= 0), "inner": bool(sets.inner[i, j]), "outer": bool(sets.outer[i, j])}
        for i in range(shape[0]) for j in range(shape[1])]


# ---------------------------------------------------------------------------
# argument handling


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> list:
    return [int(v) for v in _floats(text)]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qtb", description="Sharp transported QTE bounds under a nested sensitivity model.")
    p.add_argument("--version", action="version", version=f"qtb {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp):
        sp.add_argument("data", nargs="?", help="pooled source/target CSV")
        sp.add_argument("--input", dest="input_path", help="same as the positional data argument")
        sp.add_argument("--schema", help="JSON schema file (column names, categorical covariates, bins)")
        sp.add_argument("--bins", type=int, help="quantile bins for numeric covariates")
        sp.add_argument("--config", help="JSON or YAML analysis configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--folds", type=int)
        sp.add_argument("--eta", type=float)
        sp.add_argument("--grid-size", type=int, dest="grid_size")
        sp.add_argument("--grid", choices=("uniform", "observed"), dest="grid_placement",
                        help="threshold placement: evenly spaced or observed outcomes")
        sp.add_argument("--known-propensity", dest="e_table", help="CSV with columns cell,e1; sets the known design")
        sp.add_argument("--design", help="'observational' or 'known:PATH' (PATH as for --known-propensity)")
        sp.add_argument("--out", help="output directory for result.json and CSV tables")

    def s_args(sp):
        sp.add_argument("--gamma", type=float, action="append", help="repeat together with --lambda")
        sp.add_argument("--lambda", type=float, action="append", dest="lam")
        sp.add_argument("--tau", "--tau-list", type=_floats, dest="tau", help="comma-separated quantile levels")
        sp.add_argument("--variant", choices=["full", "plugin", "noge", "point"])

    b = sub.add_parser("bounds", help="point estimates of CDF bounds and QTE hulls")
    data_args(b)
    s_args(b)
    e = sub.add_parser("estimate", help="bounds plus simultaneous bands and confidence intervals")
    data_args(e)
    s_args(e)
    e.add_argument("--alpha", type=float)
    e.add_argument("--inference", choices=["multiplier", "subsample"])
    e.add_argument("--draws", type=int, dest="n_draws")
    e.add_argument("--save-phi", action="store_true", help="write the influence matrix to phi.npy in --out")
    f = sub.add_parser("frontier", help="non-refutation frontier over a sensitivity rectangle")
    data_args(f)
    f.add_argument("--mesh", type=_ints)
    f.add_argument("--rect", "--s-rect", type=_floats, dest="s_rect", help="gamma_lo,gamma_hi,lambda_lo,lambda_hi")
    f.add_argument("--tau0", "--tau", type=float, dest="tau0")
    f.add_argument("--method", help="'subsample:EXPONENT' (default subsample:0.6) or 'multiplier'")
    f.add_argument("--alpha", type=float)
    f.add_argument("--draws", type=int, dest="n_draws")
    f.add_argument("--exponent", type=float, dest="subsample_exponent")

    a = sub.add_parser("audit", help="closed-form envelopes against linear programs")
    a.add_argument("--cases", type=int, default=500)
    a.add_argument("--seed", type=int, default=7)
    a.add_argument("--supports", type=_ints, default=[2, 3, 5, 8, 12, 20], help="support sizes K")
    a.add_argument("--out")

    s = sub.add_parser("simulate", help="desk-scale simulation studies")
    s.add_argument("--experiment", required=True, choices=["1", "2", "4", "ablation"])
    s.add_argument("--b", type=int, default=100, help="replications")
    s.add_argument("--sizes", type=_ints)
    s.add_argument("--seed", type=int)
    s.add_argument("--full", action="store_true", help="full-scale settings (hours of runtime)")
    s.add_argument("--out")
    return p


def _config_from_args(args) -> AnalysisConfig:
    base = {}
    if args.config:
        base = AnalysisConfig.load(args.config).to_dict()
    over = {}
    for key in ("seed", "folds", "eta", "grid_size", "alpha", "inference", "n_draws", "variant",
                "mesh", "s_rect", "tau0", "subsample_exponent", "grid_placement"):
        v = getattr(args, key, None)
        if v is not None:
            over[key] = v
    if getattr(args, "tau", None):
        over["taus"] = args.tau
    design = getattr(args, "design", None)
    if design:
        if design.startswith("known:"):
            over.update(design="known", e_table=design.split(":", 1)[1])
        elif design in ("observational", "known"):
            over["design"] = design
        else:
            raise ConfigKeyError(f"--design must be 'observational' or 'known:PATH', got {design!r}")
    if args.e_table:
        over.update(design="known", e_table=args.e_table)
    method = getattr(args, "method", None)
    if method:
        if method.startswith("subsample"):
            if ":" in method:
                try:
                    over["subsample_exponent"] = float(method.split(":", 1)[1])
                except ValueError as exc:
                    raise ConfigKeyError(f"bad subsampling exponent in {method!r}") from exc
        elif method == "multiplier":
            log.warning("the frontier critical value uses subsampling on the estimated kappa; "
                        "the multiplier route is not available for it")
        else:
            raise ConfigKeyError(f"unknown frontier method {method!r}")
    gam, lam = getattr(args, "gamma", None), getattr(args, "lam", None)
    if gam or lam:
        gam, lam = gam or [1.0], lam or [1.0]
        if len(gam) == 1:
            gam = gam * len(lam)
        if len(lam) == 1:
            lam = lam * len(gam)
        if len(gam) != len(lam):
            raise ConfigKeyError("--gamma and --lambda must be given the same number of times")
        over["sensitivity"] = [[g, l] for g, l in zip(gam, lam)]
    base.update(over)
    return AnalysisConfig.from_dict(base)


def _apply_threads() -> None:
    raw = os.environ.get("QTB_THREADS")
    if not raw:
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError as exc:
        raise ConfigKeyError(f"QTB_THREADS must be a positive integer, got {raw!r}") from exc
    import numba
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _emit(payload: str, out: Optional[str], name: str) -> None:
    if out:
        d = Path(out)
        d.mkdir(parents=True, exist_ok=True)
        (d / name).write_text(payload, encoding="utf-8")
    sys.stdout.write(payload if payload.endswith("\n") else payload + "\n")


def _dispatch(args) -> int:
    _apply_threads()
    if args.command == "audit":
        from .simulation import run_audit
        res = run_audit(n_cases=args.cases, seed=args.seed, k_list=args.supports)
        _emit(json.dumps(encode(res), indent=2, sort_keys=True), args.out, "audit.json")
        return EXIT_OK
    if args.command == "simulate":
        from .simulation import run_study
        rep = run_study(args.experiment, sizes=args.sizes, reps=args.b, seed=args.seed, full=args.full)
        if args.out:
            d = Path(args.out)
            d.mkdir(parents=True, exist_ok=True)
            (d / f"experiment_{args.experiment}.csv").write_text(rep.to_csv(), encoding="utf-8")
            (d / f"experiment_{args.experiment}.json").write_text(rep.to_json(), encoding="utf-8")
        sys.stdout.write(rep.to_csv())
        return EXIT_OK

    cfg = _config_from_args(args)
    schema = Schema.load(args.schema) if args.schema else Schema()
    if args.bins is not None:
        schema.bins = args.bins
    path = args.input_path or args.data
    if not path:
        raise ConfigKeyError("no input CSV given")
    data, coding = ingest_csv(path, schema, return_coding=True)
    save_phi = getattr(args, "save_phi", False)
    bundle = run_pipeline(cfg, data, args.command, save_phi=save_phi)
    bundle.metadata["cells"] = coding.to_dict()
    phi = bundle.arrays.pop("phi", None)
    if args.out:
        bundle.save(args.out)
        if phi is not None:
            # (n, arm, side, s, grid) float64 matrix for external resampling
            np.save(Path(args.out) / "phi.npy", phi)
    summary = {k: bundle.tables[k] for k in ("hull", "qte_band") if k in bundle.tables}
    if args.command == "frontier":
        summary = {"critical_value": bundle.metadata["critical_value"],
                   "non_refuting_share": float(np.mean(bundle.arrays["kappa"] >= 0)),
                   "outer_share": float(np.mean(bundle.arrays["outer"]))}
    summary["config_hash"] = bundle.metadata["config_hash"]
    sys.stdout.write(json.dumps(encode(summary), indent=1) + "\n")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        for types, code, label in _ERROR_FAMILIES:
            if isinstance(exc, types):
                sys.stderr.write(f"qtb: {label}: {exc}\n")
                return code
        if isinstance(exc, RuntimeError) and args.command == "simulate":
            sys.stderr.write(f"qtb: study failed: {exc}\n")
            return EXIT_STUDY
        log.exception("unexpected failure")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
