"""Command-line interface: ``msm-sharp {analyze,simulate,oracle,curve}``.

Exit codes: 0 success, 2 bad input or usage, 3 numerical failure. Errors
are reported on stderr as a single line ``error <code>: <message>``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from typing import Optional, Sequence

from . import __version__
from .bootstrap import BootstrapConfig, percentile_bootstrap_ci
from .bounds import (
    balance_table,
    fit_quantile_features,
    odds_calibration,
    resolve_propensities,
    sensitivity_interval,
)
from .data import load_csv
from .errors import DataError, NumericalError
from .oracle import SPECS, gaussian_apo_bounds, gaussian_ate_identified_set
from .simulation import STUDY_METHODS, StudyConfig, run_study, write_records_csv

EXIT_INPUT = 2
EXIT_NUMERICAL = 3

ESTIMAND_FLAGS = {"ate": "ATE", "att": "ATT", "t": "psi_T", "c": "psi_C"}
METHOD_FLAGS = {"qb": "quantile_balance", "zsb": "zsb", "cov": "covariate_balance"}
QUANTILE_FLAGS = {"linear": "linear", "knn": "knn_crossfit"}
STUDY_ALIASES = {"qb": "qb_linear", "linear": "qb_linear", "knn": "qb_knn", "covariates": "cov"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"usage: {self.prog}: {message}")


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _choice_list(mapping: dict):
    def parse(text: str) -> list[str]:
        out = []
        for t in text.split(","):
            t = t.strip()
            if t not in mapping:
                raise argparse.ArgumentTypeError(f"invalid choice {t!r} (choose from {', '.join(mapping)})")
            out.append(mapping[t])
        return out
    return parse


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="CSV file with a header row")
    p.add_argument("--outcome", required=True, help="outcome column")
    p.add_argument("--treatment", required=True, help="0/1 treatment column")
    p.add_argument("--propensity", help="column of known nominal propensities")
    p.add_argument("--estimand", default="ate", choices=sorted(ESTIMAND_FLAGS))
    p.add_argument("--quantiles", default="linear", choices=sorted(QUANTILE_FLAGS))
    p.add_argument("--bootstrap", type=int, nargs="?", const=1000, default=None, metavar="B",
                   help="bootstrap replicates (default 1000 when the flag is given alone)")
    p.add_argument("--alpha", type=float, default=0.10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trim", action="store_true", help="clamp propensities to [0.01, 0.99]")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", help="write output here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="msm-sharp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"msm-sharp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("analyze", help="sensitivity intervals for a CSV dataset")
    _add_data_flags(a)
    a.add_argument("--lambda", dest="lambdas", type=_float_list, required=True, metavar="L[,L...]")
    a.add_argument("--method", type=_choice_list(METHOD_FLAGS), default=["quantile_balance"],
                   metavar="{qb,zsb,cov}[,...]")

    c = sub.add_parser("curve", help="bounds over a grid of lambda values, as CSV")
    _add_data_flags(c)
    c.add_argument("--lambda-grid", type=_float_list, default=[1.0, 1.5, 2.0, 3.0, 5.0])
    c.add_argument("--method", type=_choice_list(METHOD_FLAGS), default=["quantile_balance", "zsb"],
                   metavar="{qb,zsb,cov}[,...]")

    s = sub.add_parser("simulate", help="replication study on a synthetic design")
    s.add_argument("--dgp", required=True, choices=["dgp1", "dgp2", "example7"])
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--reps", type=int, default=100)
    s.add_argument("--lambda", dest="lam", type=float, default=2.0)
    s.add_argument("--estimand", default="ate", choices=sorted(ESTIMAND_FLAGS))
    s.add_argument("--methods", type=_choice_list({**{k: k for k in STUDY_METHODS}, **STUDY_ALIASES}),
                   default=["qb_linear", "cov", "zsb"], metavar="LIST")
    s.add_argument("--bootstrap", type=int, nargs="?", const=1000, default=None, metavar="B")
    s.add_argument("--alpha", type=float, default=0.10)
    s.add_argument("--sigma-x", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--threads", type=int, default=None)
    s.add_argument("--timing", action="store_true", help="keep per-method runtimes in the summary")
    s.add_argument("--dump", help="per-replication CSV")
    s.add_argument("--out")

    o = sub.add_parser("oracle", help="closed-form identified sets for the Gaussian designs")
    o.add_argument("--spec", required=True)
    o.add_argument("--lambda", dest="lam", type=float, required=True)
    o.add_argument("--mc-draws", type=int, default=1_000_000)
    o.add_argument("--sigma-x", type=float, default=1.0)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--out")
    return parser


def _emit(text: str, path: Optional[str]) -> None:
    if path:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def _load(args):
    return load_csv(args.data, args.outcome, args.treatment, args.propensity)


def _bootstrap_config(args) -> Optional[BootstrapConfig]:
    if args.bootstrap is None:
        return None
    return BootstrapConfig(B=args.bootstrap, alpha=args.alpha, master_seed=args.seed)


def _evaluate(ds, lams, methods, args, bcfg):
    """One BoundsEstimate (plus optional CI) per (lambda, method)."""
    estimand = ESTIMAND_FLAGS[args.estimand]
    qmethod = QUANTILE_FLAGS[args.quantiles]
    e, info = resolve_propensities(ds, trim=args.trim)
    rows = []
    for lam in lams:
        features = None
        if "quantile_balance" in methods:
            features = fit_quantile_features(ds, lam, estimand, qmethod, seed=args.seed)
        for method in methods:
            est = sensitivity_interval(ds, lam, estimand, method, qmethod, propensities=e,
                                       seed=args.seed, features=features)
            est.diagnostics.update(info)
            ci = None
            if bcfg is not None:
                ci = percentile_bootstrap_ci(ds, lam, estimand, method, bcfg, qmethod, trim=args.trim,
                                             features=features, threads=args.threads, seed=args.seed)
            rows.append((est, ci))
    return e, info, rows


def cmd_analyze(args) -> int:
    ds = _load(args)
    bcfg = _bootstrap_config(args)
    e, info, rows = _evaluate(ds, args.lambdas, args.method, args, bcfg)
    results = []
    for est, ci in rows:
        d = est.to_dict()
        d["bootstrap"] = None if ci is None else ci.to_dict()
        results.append(d)
    report = {
        "version": __version__,
        "seed": args.seed,
        "config": {
            "data": args.data,
            "outcome": args.outcome,
            "treatment": args.treatment,
            "propensity": args.propensity,
            "lambdas": args.lambdas,
            "estimand": ESTIMAND_FLAGS[args.estimand],
            "methods": args.method,
            "quantiles": QUANTILE_FLAGS[args.quantiles],
            "bootstrap": None if bcfg is None else {"B": bcfg.B, "alpha": bcfg.alpha},
            "trim": args.trim,
        },
        "n": ds.n,
        "covariates": list(ds.covariate_names),
        "propensity": info,
        "results": results,
        "balance_table": balance_table(ds, e),
        "odds_calibration": odds_calibration(ds) if ds.d >= 2 else None,
    }
    _emit(_dumps(report), args.out)
    return 0


def cmd_curve(args) -> int:
    ds = _load(args)
    bcfg = _bootstrap_config(args)
    _, _, rows = _evaluate(ds, args.lambda_grid, args.method, args, bcfg)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "lambda", "lower", "upper", "ci_lower", "ci_upper"])
    for est, ci in rows:
        w.writerow([
            est.method, repr(est.lam), repr(est.lower), repr(est.upper),
            "" if ci is None else repr(ci.ci_lower), "" if ci is None else repr(ci.ci_upper),
        ])
    _emit(buf.getvalue(), args.out)
    return 0


def cmd_simulate(args) -> int:
    if args.reps < 1:
        raise DataError(f"--reps must be at least 1, got {args.reps}")
    bcfg = None
    if args.bootstrap is not None:
        bcfg = BootstrapConfig(B=args.bootstrap, alpha=args.alpha, master_seed=args.seed)
    config = StudyConfig(
        dgp=args.dgp, n=args.n, replications=args.reps, lam=args.lam,
        estimand=ESTIMAND_FLAGS[args.estimand], methods=tuple(dict.fromkeys(args.methods)),
        bootstrap=bcfg, master_seed=args.seed, sigma_x=args.sigma_x,
    )
    summary = run_study(config, threads=args.threads)
    out = summary.to_dict(include_timing=args.timing)
    out["version"] = __version__
    if args.dump:
        write_records_csv(summary, args.dump)
    _emit(_dumps(out), args.out)
    return 0


def cmd_oracle(args) -> int:
    if args.spec not in SPECS:
        raise DataError(f"unknown spec {args.spec!r}; choose from {', '.join(SPECS)}")
    spec = SPECS[args.spec](args.sigma_x) if args.spec == "prop1" else SPECS[args.spec]()
    apo = gaussian_apo_bounds(spec, args.lam, mc_draws=args.mc_draws, seed=args.seed)
    ate = gaussian_ate_identified_set(spec, args.lam)
    out = {
        "spec": args.spec,
        "lambda": args.lam,
        "ate_identified_set": list(ate),
        "psi_T": [apo["psi_T_minus"], apo["psi_T_plus"]],
        "psi_C": [apo["psi_C_minus"], apo["psi_C_plus"]],
        "mc_draws": args.mc_draws,
        "seed": args.seed,
    }
    _emit(_dumps(out), args.out)
    return 0


COMMANDS = {"analyze": cmd_analyze, "curve": cmd_curve, "simulate": cmd_simulate, "oracle": cmd_oracle}


def _fail(code: int, message: str) -> int:
    text = " ".join(str(message).split())
    sys.stderr.write(f"error {code}: {text}\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        return _fail(EXIT_INPUT, str(err))
    try:
        return COMMANDS[args.command](args)
    except NumericalError as err:
        return _fail(EXIT_NUMERICAL, err)
    except (DataError, ValueError, OSError) as err:
        return _fail(EXIT_INPUT, err)


def entrypoint() -> None:
    sys.exit(main())
