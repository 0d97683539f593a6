"""Command-line interface: ``metaeb fit`` and ``metaeb simulate``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .data import SpecError, build_design, load_spec, read_dataset
from .glm import FitError
from .metrics import evaluate
from .pipeline import COMBINERS, METHODS, ModelFitError, run_pipeline
from .simulation import SCENARIO_IDS, get_scenario, run_scenario, summary_to_dict, \
    write_results, write_summary_table

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(Exception):
    pass


def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()] if text else []


def build_parser():
    parser = argparse.ArgumentParser(
        prog="metaeb",
        description="Integrate published regression models with internal data.")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit MLE, CML, EB and combined estimators")
    fit.add_argument("--data", required=True, help="internal data (CSV with header)")
    fit.add_argument("--outcome", required=True, help="outcome column name")
    fit.add_argument("--b-cols", default="", help="comma-separated new covariates")
    fit.add_argument("--external", action="append", default=[],
                     help="external model JSON file (repeatable)")
    fit.add_argument("--methods", default=",".join(METHODS),
                     help=f"comma-separated subset of {','.join(METHODS)}")
    fit.add_argument("--validation", help="validation data with the same columns")
    fit.add_argument("--out", required=True, help="JSON report path")

    sim = sub.add_parser("simulate", help="run a simulation scenario")
    sim.add_argument("--scenario", required=True, help=f"one of {','.join(SCENARIO_IDS)}")
    sim.add_argument("--reps", type=int, default=500)
    sim.add_argument("--workers", type=int, default=1)
    sim.add_argument("--out", required=True, help="output directory")

    for p in (fit, sim):
        p.add_argument("--mc-draws", type=int, default=None,
                       help="Monte Carlo draws for the EB covariance "
                            "(default 5000 for fit, 2000 for simulate)")
        p.add_argument("--seed", type=int, default=None,
                       help="random seed (required when --mc-draws > 0)")
        p.add_argument("--link", default="logit", choices=("logit", "identity"))
    return parser


def _check_seed(args, default_draws):
    if args.mc_draws is None:
        args.mc_draws = default_draws
    if args.mc_draws < 0:
        raise ConfigError("--mc-draws: must be non-negative")
    if args.mc_draws and args.seed is None:
        raise ConfigError("--seed: required whenever --mc-draws > 0")
    if args.mc_draws and args.mc_draws < 100:
        raise ConfigError("--mc-draws: at least 100 draws are required")


def _num(x):
    x = float(x)
    return x if math.isfinite(x) else None


def _vec(a):
    return [_num(v) for v in np.ravel(a)]


def cmd_fit(args) -> int:
    methods = _csv_list(args.methods)
    if not methods:
        raise ConfigError("--methods: at least one method is required")
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigError(f"--methods: unknown method(s) {', '.join(unknown)}")
    combiners = [m for m in COMBINERS if m in methods]
    if "eb" in methods or combiners:
        _check_seed(args, 5000)
    else:
        args.mc_draws = 0
    needs_external = any(m != "mle" for m in methods)
    if needs_external and not args.external:
        raise ConfigError("--external: methods other than mle need at least one external model")
    if combiners and not args.mc_draws:
        raise ConfigError("--mc-draws: combined estimators need the EB covariance (> 0 draws)")

    b_names = _csv_list(args.b_cols)
    try:
        data = read_dataset(args.data, args.outcome, b_names)
        specs = [load_spec(p) for p in args.external] if needs_external else []
        valid = (read_dataset(args.validation, args.outcome, b_names, data.x_names)
                 if args.validation else None)
    except OSError as exc:
        raise ConfigError(f"cannot read input: {exc}") from None
    if args.link == "logit":
        data.check_binary()
    if valid is not None and valid.names != data.names:
        raise ConfigError("--validation: columns differ from --data")

    mc = args.mc_draws
    res = run_pipeline(data, specs, link=args.link, mc_draws=mc,
                       seed=args.seed if args.seed is not None else 0, combiners=combiners)
    design_v = build_design(valid) if valid is not None else None
    estimators = []
    for r in res.reports:
        if (r.label if r.kind == "combined" else r.kind) not in methods:
            continue
        entry = {"label": r.label, "kind": r.kind,
                 "estimate": _vec(r.estimate), "se": _vec(r.se)}
        if r.weights is not None:
            entry["weights"] = (_vec(r.weights) if np.ndim(r.weights) == 1
                                else [_vec(row) for row in r.weights])
        entry["flags"] = list(r.flags)
        if design_v is not None:
            m = evaluate(r.estimate, r.cov, design_v, valid.outcome)
            entry["metrics"] = {"avg_pred_var": _num(m.avg_pred_var),
                                "scaled_brier": _num(m.scaled_brier), "n_test": m.n_test}
        estimators.append(entry)
    report = {
        "command": "fit",
        "coefficient_names": list(res.coef_names),
        "link": args.link,
        "n": data.n,
        "seed": args.seed,
        "mc_draws": mc,
        "external_models": [s.name for s in specs],
        "degenerate_constraints": [f.name for f in res.cml if f.degenerate],
        "estimators": estimators,
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2) + "\n")
    for e in estimators:
        flags = f"  [{', '.join(e['flags'])}]" if e["flags"] else ""
        print(f"{e['label']:<24}" + " ".join(f"{v:8.4f}" for v in e["estimate"]) + flags)
    return EXIT_OK


def cmd_simulate(args) -> int:
    _check_seed(args, 2000)
    if args.scenario.upper() not in SCENARIO_IDS:
        raise ConfigError(f"--scenario: unknown id {args.scenario!r}; "
                          f"choose from {', '.join(SCENARIO_IDS)}")
    if args.reps < 1:
        raise ConfigError("--reps: must be positive")
    if not args.mc_draws:
        raise ConfigError("--mc-draws: simulations need the EB covariance (> 0 draws)")
    if args.link != "logit":
        raise ConfigError("--link: simulation scenarios are logistic")
    scenario = get_scenario(args.scenario)
    summary = run_scenario(scenario, reps=args.reps, seed=args.seed, mc_draws=args.mc_draws,
                           workers=max(1, args.workers))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_summary_table(summary, out / f"summary_{scenario.id}.csv")
    write_results(summary, out / f"results_{scenario.id}.json")

    info = summary_to_dict(summary)
    tag = " (calibrated scenario)" if summary.calibrated else ""
    print(f"scenario {scenario.id}{tag}: {summary.reps} replicates, "
          f"{len(summary.failures)} failed")
    print("mean weights  ivw " + " ".join(f"{w:.3f}" for w in info["mean_weights"]["ivw"])
          + "   ocwe " + " ".join(f"{w:.3f}" for w in info["mean_weights"]["ocwe"]))
    print(f"{'estimator':<10} {'coef':<12} {'bias':>8} {'sd':>7} {'ese':>7} {'cover':>6}")
    for label, nm, b, s, e, c in summary.table_rows():
        if label in ("direct", "ocwe", "sclearner"):
            print(f"{label:<10} {nm:<12} {b:8.3f} {s:7.3f} {e:7.3f} {c:6.2f}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = cmd_fit if args.command == "fit" else cmd_simulate
    try:
        return handler(args)
    except (ConfigError, SpecError) as exc:
        print(f"metaeb: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ModelFitError as exc:
        print(f"metaeb: numerical failure in external model {exc.model!r}: {exc}",
              file=sys.stderr)
        return EXIT_NUMERIC
    except (FitError, np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"metaeb: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
