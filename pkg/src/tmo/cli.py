"""Command-line front end.

Commands: ``run`` (thresholded SE and baselines), ``diagnose`` (null fit, Q
curve and stability checks), ``simulate`` (horse-race from a config file) and
``calibrate`` (block covariance from a pair table).  Exit status is 0 on
success, 2 on bad input and 3 on numerical failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
from scipy import stats

from .correlation import load_pairs, normalize_residuals, pairwise_correlations, save_pairs
from .dataset_io import CleaningPolicy, Schema, load_dataset, standardize_outcomes
from .errors import DataError, NumericalError, TMOError
from .null_threshold import QUANTILE_METHOD, choose_threshold, empirical_right_cdf
from .pipeline import TMOConfig, fit_null, run_tmo
from .simulation import calibrate_sigma, run_from_config

__all__ = ["main", "build_parser", "central_fit_score", "resampling_stability"]

HIST_BINS = 100
RESAMPLE_DROP = 0.05
RESAMPLE_COUNT = 20
RESAMPLE_FLAG_RANGE = 0.1


def _threads(value):
    if value is not None:
        return max(1, int(value))
    env = os.environ.get("TMO_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _csv_list(s):
    return tuple(x.strip() for x in s.split(",") if x.strip()) if s else ()


def _add_data_flags(p):
    p.add_argument("--data", required=True, help="delimited data file (long format)")
    p.add_argument("--schema", help="key=value schema file; flags below override it")
    p.add_argument("--sep", default=",")
    p.add_argument("--outcome")
    p.add_argument("--aux", help="comma-separated auxiliary outcome columns")
    p.add_argument("--treatment")
    p.add_argument("--covariates")
    p.add_argument("--fixed-effects")
    p.add_argument("--weights")
    p.add_argument("--instrument")
    p.add_argument("--cluster", help="cluster column")
    p.add_argument("--coords", help="latitude,longitude columns")
    p.add_argument("--unit")
    p.add_argument("--period")
    p.add_argument("--standardize", action="store_true",
                   help="standardize and winsorize auxiliary outcomes before fitting")
    p.add_argument("--bandwidth-miles", type=float)
    p.add_argument("--kernel", choices=("uniform", "bartlett"), default="uniform")
    p.add_argument("--augment", help="never-threshold sets: cluster,distance or none "
                                     "(default: whichever of --cluster / --bandwidth-miles is given)")
    p.add_argument("--null-method", choices=("iqr", "binned"), default="iqr")
    p.add_argument("--scale", choices=("fisher", "raw"), default="fisher")
    p.add_argument("--threshold", type=float, help="fixed cutoff instead of the data-driven one")
    p.add_argument("--baselines", help="comma list from hc0,hc1,cluster,conley")
    p.add_argument("--reference", help="baseline the SE ratio is taken against")
    p.add_argument("--pairs-file", help="precomputed pair table (.csv or .npz)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int)
    p.add_argument("--output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tmo", description="Thresholded multiple-outcome standard errors")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="estimate the thresholded SE and baselines")
    _add_data_flags(run)
    run.add_argument("--format", choices=("json", "csv", "table"), default="json")
    run.add_argument("--emit-pairs", help="also write the pair table here")

    diag = sub.add_parser("diagnose", help="null fit, Q curve and stability diagnostics")
    _add_data_flags(diag)
    diag.add_argument("--format", choices=("json", "table"), default="json")

    sim = sub.add_parser("simulate", help="Monte Carlo horse-race from a JSON config")
    sim.add_argument("--config", required=True)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--threads", type=int)
    sim.add_argument("--output")
    sim.add_argument("--format", choices=("json", "csv", "table"), default="json")

    cal = sub.add_parser("calibrate", help="block covariance from a pair table")
    src = cal.add_mutually_exclusive_group(required=True)
    src.add_argument("--pairs-file")
    src.add_argument("--data")
    cal.add_argument("--schema")
    cal.add_argument("--sep", default=",")
    cal.add_argument("--cutoff", type=float, default=0.45)
    cal.add_argument("--threads", type=int)
    cal.add_argument("--seed", type=int, default=0)
    cal.add_argument("--output")
    return parser


def _schema(args) -> Schema:
    mapping = {}
    if args.schema:
        base = Schema.from_file(args.schema)
        mapping = {k: v for k, v in base.__dict__.items() if v not in (None, ())}
    for key in ("outcome", "aux", "treatment", "covariates", "fixed_effects", "weights",
                "instrument", "cluster", "unit", "period"):
        val = getattr(args, key, None)
        if val:
            mapping[key] = val
    if getattr(args, "coords", None):
        parts = _csv_list(args.coords)
        if len(parts) != 2:
            raise DataError("--coords takes latitude,longitude column names", "cli")
        mapping["lat"], mapping["lon"] = parts
    return Schema.from_mapping(mapping)


def _dataset(args):
    ds = load_dataset(args.data, _schema(args), sep=args.sep)
    if getattr(args, "standardize", False):
        ds = standardize_outcomes(ds, CleaningPolicy())
    return ds


def _config(args, ds) -> TMOConfig:
    if args.augment is None:
        augment = []
        if ds.clusters is not None:
            augment.append("cluster")
        if args.bandwidth_miles is not None and ds.coords is not None:
            augment.append("distance")
    elif args.augment == "none":
        augment = []
    else:
        augment = list(_csv_list(args.augment))
    if args.baselines:
        baselines = _csv_list(args.baselines)
    else:
        baselines = ["hc0", "hc1"]
        if ds.clusters is not None:
            baselines.append("cluster")
        if args.bandwidth_miles is not None and ds.coords is not None:
            baselines.append("conley")
    reference = args.reference or ("cluster" if "cluster" in baselines else "hc1")
    if args.threshold is not None and not args.threshold > 0:
        raise DataError("--threshold must be positive", "cli")
    return TMOConfig(null_method=args.null_method, scale=args.scale, threshold=args.threshold,
                     augment=tuple(augment), baselines=tuple(baselines), reference=reference,
                     bandwidth_miles=args.bandwidth_miles, kernel=args.kernel,
                     workers=_threads(args.threads))


def _write(text: str, output):
    if output:
        Path(output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _report_csv(rep) -> str:
    lines = ["method,coef,se,variance,ratio"]
    ratio = rep.se_ratios.get(rep.reference, float("nan")) if rep.reference else float("nan")
    lines.append(f"tmo,{rep.tau_hat!r},{rep.se_tmo!r},{rep.v_tmo!r},{ratio!r}")
    for name, v in rep.v_baselines.items():
        lines.append(f"{name},{rep.tau_hat!r},{rep.se_baselines[name]!r},{v!r},")
    lines.append("")
    lines.append("key,value")
    for key in ("delta_star", "delta_star_rho", "bonferroni_delta", "df_hat", "kept_fraction",
                "reference", "scale", "status", "negative_variance_flag"):
        lines.append(f"{key},{getattr(rep, key)!r}")
    return "\n".join(lines) + "\n"


def _load_pairs_arg(args):
    return load_pairs(args.pairs_file, args.scale) if args.pairs_file else None


def cmd_run(args) -> int:
    ds = _dataset(args)
    cfg = _config(args, ds)
    res = run_tmo(ds, cfg, pairs=_load_pairs_arg(args))
    if args.emit_pairs:
        save_pairs(res.pairs, args.emit_pairs)
    rep = res.report
    text = {"json": lambda: rep.to_json() + "\n", "csv": lambda: _report_csv(rep),
            "table": rep.to_table}[args.format]()
    _write(text, args.output)
    return 0


def central_fit_score(pair_stats, null) -> float:
    """Largest gap between the empirical CDF and the fitted null CDF on the interquartile range."""
    s = np.sort(np.asarray(pair_stats, dtype=float))
    s = s[np.isfinite(s)]
    q25, q75 = np.quantile(s, [0.25, 0.75], method=QUANTILE_METHOD)
    lo = np.searchsorted(s, q25, side="left")
    hi = np.searchsorted(s, q75, side="right")
    x = s[lo:hi]
    if x.size == 0:
        return 0.0
    m = s.size
    ranks = np.arange(lo, hi)
    fitted = stats.norm.cdf(x, scale=null.sd)
    # ECDF jumps at each point: compare both one-sided limits
    return float(max(np.max(np.abs((ranks + 1) / m - fitted)), np.max(np.abs(ranks / m - fitted))))


def resampling_stability(eps_norm, config: TMOConfig, free_mask, seed: int,
                         n_resamples: int = RESAMPLE_COUNT, drop: float = RESAMPLE_DROP) -> dict:
    """Cutoff spread when a random 5% of auxiliary outcomes is left out."""
    d = eps_norm.shape[-1]
    n_drop = max(1, int(round(drop * d)))
    if d - n_drop < 2:
        return {"deltas": [], "range": float("nan"), "flag": False, "n_drop": n_drop}
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0, 7, 0])))
    pooling = "cross_section" if eps_norm.shape[1] == 1 else "panel_pooled"
    deltas = []
    for _ in range(n_resamples):
        keep = np.sort(rng.permutation(d)[n_drop:])
        pc = pairwise_correlations(eps_norm[:, :, keep], pooling, config.scale, config.workers, records=[])
        st = pc.stat[free_mask & pc.valid]
        tc = choose_threshold(st, fit_null(st, config), pc.n)
        deltas.append(tc.delta_star)
    rng_ = float(max(deltas) - min(deltas))
    return {"deltas": deltas, "range": rng_, "flag": rng_ > RESAMPLE_FLAG_RANGE, "n_drop": n_drop}


def diagnostics(ds, cfg: TMOConfig, seed: int = 0, pairs=None) -> dict:
    res = run_tmo(ds, cfg, pairs=pairs)
    free = res.pairs.valid & ~res.keep_set.never_threshold
    st = res.pairs.stat[free]
    counts, edges = np.histogram(st[np.isfinite(st)], bins=HIST_BINS)
    tc = res.threshold
    out = {
        "histogram": {"counts": counts.tolist(), "edges": edges.tolist()},
        "null": {"v_hat": res.null.v_hat, "df_hat": res.null.df_hat, "method": res.null.method,
                 "scale": res.null.scale},
        "q_curve": tc.q_curve.tolist(),
        "delta_star": tc.delta_star,
        "bonferroni_delta": tc.bonferroni_delta,
        "kept_fraction": tc.kept_fraction,
        "status": tc.status,
        "central_fit_score": central_fit_score(st, res.null),
        "n_pairs": int(st.size),
    }
    if pairs is None:
        z = normalize_residuals(res.residuals, [])
        out["resampling"] = resampling_stability(z, cfg, ~res.keep_set.never_threshold, seed)
    else:
        out["resampling"] = None
    out["empirical_right_cdf_at_delta_star"] = float(empirical_right_cdf(st, tc.delta_star))
    return out


def _diag_table(dg) -> str:
    lines = [f"null v_hat      {dg['null']['v_hat']:.6g} ({dg['null']['method']})",
             f"df_hat          {dg['null']['df_hat']:.6g}",
             f"delta*          {dg['delta_star']:.6g}",
             f"bonferroni      {dg['bonferroni_delta']:.6g}",
             f"kept fraction   {dg['kept_fraction']:.6g}",
             f"central fit     {dg['central_fit_score']:.4f}"]
    if dg["resampling"]:
        r = dg["resampling"]
        lines.append(f"resample range  {r['range']:.4g}{'  UNSTABLE' if r['flag'] else ''}")
    return "\n".join(lines) + "\n"


def cmd_diagnose(args) -> int:
    ds = _dataset(args)
    cfg = _config(args, ds)
    dg = diagnostics(ds, cfg, args.seed, _load_pairs_arg(args))
    text = json.dumps(dg, indent=1) + "\n" if args.format == "json" else _diag_table(dg)
    _write(text, args.output)
    return 0


def cmd_simulate(args) -> int:
    path = Path(args.config)
    try:
        config = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read simulation config {path}: {exc}", "cli") from exc
    res = run_from_config(config, path.parent, args.seed, _threads(args.threads))
    text = {"json": lambda: res.to_json() + "\n", "csv": res.to_csv, "table": res.to_table}[args.format]()
    _write(text, args.output)
    return 0


def cmd_calibrate(args) -> int:
    if args.pairs_file:
        pc = load_pairs(args.pairs_file, "raw")
    else:
        if not args.schema:
            raise DataError("calibrate --data needs --schema", "cli")
        from .regression import fit

        ds = load_dataset(args.data, Schema.from_file(args.schema), sep=args.sep)
        rp = fit(ds)
        z = normalize_residuals(rp, [])
        pc = pairwise_correlations(z, "cross_section" if rp.t == 1 else "panel_pooled", "raw",
                                   _threads(args.threads), [])
    sigma = calibrate_sigma(pc, args.cutoff)
    _write(sigma.to_json() + "\n", args.output)
    return 0


COMMANDS = {"run": cmd_run, "diagnose": cmd_diagnose, "simulate": cmd_simulate, "calibrate": cmd_calibrate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (DataError, TMOError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
