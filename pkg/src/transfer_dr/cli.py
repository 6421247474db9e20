"""Command-line interface: ``transfer-dr {fit,simulate,truth}``.

Exit codes: 0 success, 2 invalid input or usage, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import CsvSchema, center_study, load_study
from .estimators import EstimateOptions, estimate
from .exceptions import NumericalError, ValidationError
from .inference import BootstrapConfig, bootstrap, wald_interval, wald_pvalue
from .simulation import (
    PRESETS,
    ScenarioConfig,
    emit_report,
    parse_config_file,
    run_scenario,
    truth_oracle,
)

log = logging.getLogger("transfer_dr")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
THREADS_ENV = "TRANSFER_DR_THREADS"


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _int_like(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if v != int(v) or v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text!r}")
    return int(v)


def _columns(text):
    cols = [c.strip() for c in text.split(",") if c.strip()]
    if not cols:
        raise argparse.ArgumentTypeError("empty column list")
    return cols


def _default_threads():
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _write_manifest(out_dir, command, options, seeds, inputs, started, extra=None):
    manifest = {
        "command": command,
        "options": options,
        "seeds": seeds,
        "version": __version__,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "duration_seconds": round(time.time() - started, 3),
    }
    if extra:
        manifest.update(extra)
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# --------------------------------------------------------------------------
# fit
# --------------------------------------------------------------------------


def _coef_names(schema, study):
    names = list(schema.x)
    if schema.add_intercept:
        names.append("intercept")
    names += list(schema.z)
    return names


def cmd_fit(args):
    started = time.time()
    schema = CsvSchema(args.y_col, tuple(args.x_cols), tuple(args.z_cols), args.add_intercept)
    study = load_study(args.source, args.target, schema)
    for w in study.warnings:
        log.warning(w)
    study, tf = center_study(study, args.center)
    opts = EstimateOptions(args.impute_model, args.max_iter, args.grad_tol, args.weight_cap)
    res = estimate(study, args.method, opts)
    est = res.coef.vector
    names = _coef_names(schema, study)

    boot = None
    k = len(est)
    se = lo = hi = pv = np.full(k, np.nan)
    if args.bootstrap:
        cfg = BootstrapConfig(B=args.bootstrap, master_seed=args.seed, ci_level=args.ci_level, interval=args.interval)
        boot = bootstrap(study, args.method, cfg, opts, estimate_=res, n_jobs=args.threads)
        se, lo, hi, pv = boot.se, boot.ci_lower, boot.ci_upper, boot.p_values

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [
        {
            "covariate": nm,
            "estimate": float(est[j]),
            "se": float(se[j]),
            "ci_lower": float(lo[j]),
            "ci_upper": float(hi[j]),
            "p_value": float(pv[j]),
        }
        for j, nm in enumerate(names)
    ]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({key: (val if isinstance(val, str) else repr(val)) for key, val in r.items()})
    (out / "coefficients.csv").write_text(buf.getvalue(), encoding="utf-8")
    report = {
        "method": args.method,
        "coefficients": rows,
        "residual_norm": res.residual_norm,
        "n_source": study.n,
        "n_target": study.N,
        "bootstrap": None if boot is None else {
            "B": boot.B,
            "n_failed": boot.n_failed,
            "failure_causes": boot.failure_causes,
            "ci_level": args.ci_level,
            "interval": args.interval,
            "cov": boot.cov.tolist(),
        },
    }
    if res.ratio_fit is not None:
        report["density_ratio"] = {
            "eta": res.ratio_fit.eta.tolist(),
            "iterations": res.ratio_fit.iterations,
            "grad_norm": res.ratio_fit.grad_norm,
        }
    if res.imputation_fit is not None:
        report["imputation"] = {
            "columns": list(res.imputation_fit.column_names),
            "gamma": res.imputation_fit.gamma.tolist(),
            "sigma": res.imputation_fit.sigma.tolist(),
        }
    (out / "coefficients.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_manifest(
        out, "fit", _jsonable(vars(args)), {"bootstrap_master_seed": args.seed},
        [args.source, args.target], started,
        {"warnings": list(study.warnings), "centering": {"mode": args.center, "y_mean": tf.y_mean,
                                                        "x_mean": tf.x_mean.tolist(), "z_mean": tf.z_mean.tolist(),
                                                        "z_scale": tf.z_scale.tolist()}},
    )
    for r in rows:
        print(f"{r['covariate']:>12s}  {r['estimate']: .6f}  se={r['se']:.6f}  p={r['p_value']:.3g}")
    return EXIT_OK


def _jsonable(d):
    out = {}
    for k, v in d.items():
        if k == "func":
            continue
        if isinstance(v, Path):
            v = str(v)
        out[k] = v
    return out


# --------------------------------------------------------------------------
# simulate / truth
# --------------------------------------------------------------------------


def _scenario_from_args(args) -> ScenarioConfig:
    cfg = parse_config_file(args.config_file) if args.config_file else PRESETS[args.config or "I"]
    changes = {}
    for attr, key in (
        ("replications", "replications"), ("bootstrap", "bootstrap_B"), ("total_size", "total_size"),
        ("seed", "master_seed"), ("sigma_eps", "sigma_eps"),
    ):
        val = getattr(args, attr, None)
        if val is not None:
            changes[key] = val
    if getattr(args, "centered", False):
        changes["centered"] = True
    return cfg.with_(**changes)


def cmd_simulate(args):
    started = time.time()
    cfg = _scenario_from_args(args)
    truth = truth_oracle(cfg, mc_size=args.truth_mc_size)
    opts = EstimateOptions(args.impute_model)

    def progress(i, total):
        if args.verbose:
            print(f"replication {i}/{total}", file=sys.stderr)

    report = run_scenario(cfg, truth, options=opts, n_jobs=args.threads, progress=progress)
    out = Path(args.out_dir)
    emit_report(report, out)
    _write_manifest(
        out, "simulate", _jsonable(vars(args)), {"master_seed": cfg.master_seed},
        [args.config_file] if args.config_file else [], started,
        {"scenario": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}, "failures": report.failures},
    )
    print(f"{'method':<6} {'coef':<6} {'true':>7} {'bias':>7} {'rmse':>7} {'se':>7} {'cover':>6}")
    for r in report.rows:
        print(f"{r['method']:<6} {r['coefficient']:<6} {r['true']:7.3f} {r['avg_bias']:7.3f} "
              f"{r['rmse']:7.3f} {r['mean_se']:7.3f} {r['coverage']:6.3f}")
    return EXIT_OK


def cmd_truth(args):
    cfg = _scenario_from_args(args)
    t = truth_oracle(cfg, mc_size=args.mc_size, batches=args.batches, seed=args.seed)
    payload = {
        "config": cfg.name,
        "mc_size": t.mc_size,
        "beta": t.beta,
        "theta": t.theta,
        "intercept": float(t.vartheta0[1]),
        "mc_se": {"beta": float(t.mc_se[0]), "intercept": float(t.mc_se[1]), "theta": float(t.mc_se[2])},
    }
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(f"config {cfg.name}: beta0 = {t.beta:.4f} (mc se {t.mc_se[0]:.1e}), "
              f"theta0 = {t.theta:.4f} (mc se {t.mc_se[2]:.1e}), intercept = {t.vartheta0[1]:.4f}, "
              f"mc_size = {t.mc_size}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="transfer-dr", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="estimate target-population coefficients from two CSV files")
    f.add_argument("--source", required=True, type=Path, help="CSV with y, x and z columns")
    f.add_argument("--target", required=True, type=Path, help="CSV with y and z columns")
    f.add_argument("--y-col", default="y")
    f.add_argument("--x-cols", required=True, type=_columns, help="comma-separated x column names")
    f.add_argument("--z-cols", required=True, type=_columns, help="comma-separated z column names")
    f.add_argument("--add-intercept", action="store_true", help="prepend a constant column to z")
    f.add_argument("--method", required=True, choices=["iw", "imp", "dr"])
    f.add_argument("--impute-model", default="linear", choices=["linear", "quadratic", "interaction"])
    f.add_argument("--bootstrap", type=_int_like, default=0, metavar="B")
    f.add_argument("--seed", type=_int_like, default=0)
    f.add_argument("--ci-level", type=float, default=0.95)
    f.add_argument("--interval", default="wald", choices=["wald", "percentile"])
    f.add_argument("--weight-cap", type=float, default=None)
    f.add_argument("--center", default="none", choices=["none", "center", "standardize"])
    f.add_argument("--max-iter", type=_int_like, default=100)
    f.add_argument("--grad-tol", type=float, default=1e-10)
    f.add_argument("--threads", type=_int_like, default=_default_threads())
    f.add_argument("--out-dir", required=True, type=Path)
    f.set_defaults(func=cmd_fit)

    def scenario_args(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--config", choices=sorted(PRESETS))
        g.add_argument("--config-file", type=Path, help="flat key = value scenario file")
        sp.add_argument("--total-size", type=_int_like)
        sp.add_argument("--sigma-eps", type=float)
        sp.add_argument("--centered", action="store_true")

    s = sub.add_parser("simulate", help="run a Monte Carlo scenario and write a Table-style report")
    scenario_args(s)
    s.add_argument("--replications", type=_int_like)
    s.add_argument("--bootstrap", type=_int_like, metavar="B")
    s.add_argument("--seed", type=_int_like)
    s.add_argument("--impute-model", default="linear", choices=["linear", "quadratic", "interaction"])
    s.add_argument("--truth-mc-size", type=_int_like, default=10_000_000)
    s.add_argument("--threads", type=_int_like, default=_default_threads())
    s.add_argument("--out-dir", required=True, type=Path)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("truth", help="print the Monte Carlo truth for a scenario")
    scenario_args(t)
    t.add_argument("--mc-size", type=_int_like, default=10_000_000)
    t.add_argument("--batches", type=_int_like, default=10)
    t.add_argument("--seed", type=_int_like)
    t.add_argument("--json", action="store_true")
    t.set_defaults(func=cmd_truth)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
