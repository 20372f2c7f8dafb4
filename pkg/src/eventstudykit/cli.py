"""``esk`` command line: estimate, weights, simulate, pretrend.

Exit codes: 0 on success, 1 when an estimator cannot be computed, 2 for
input, file or configuration problems.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys

import numpy as np

from . import __version__
from .dr import LearnerConfig, dr_estimate, load_covariate_panel
from .errors import EstimationError, EventStudyError, InputError
from .estimators import (
    catt_to_csv,
    dynamic_fe,
    iw_dynamic,
    pretrend_test,
    saturated_catt,
    static_fe,
)
from .montecarlo import EstimatorConfig, three_cohort_spec, load_spec, run_study
from .panel import DesignConfig, load_panel, time_index
from .weights import dynamic_weights, static_weights, write_weights_csv

EXIT_OK, EXIT_ESTIMATION, EXIT_CONFIG = 0, 1, 2


def _clean(obj):
    """Replace non-finite floats by ``None`` so output is strict JSON."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, allow_nan=False)


def _int_list(text):
    if text is None or text == "":
        return None
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise InputError(f"expected comma-separated integers, got {text!r}") from None


def _window(panel, text):
    if text is None:
        return None
    if ".." not in text:
        raise InputError(f"--window expects t0..t1, got {text!r}")
    a, b = text.split("..", 1)
    try:
        lo, hi = int(a), int(b)
    except ValueError:
        raise InputError(f"--window expects integer bounds, got {text!r}") from None
    labels = [t for t in panel.time_labels if lo <= t <= hi]
    if len(labels) < 2:
        raise InputError(f"--window {text} keeps fewer than two periods")
    return time_index(panel, labels)


def _dynamic_config(panel, args):
    relative = None
    if args.leads is not None or args.lags is not None:
        leads = 0 if args.leads is None else args.leads
        lags = 0 if args.lags is None else args.lags
        if leads < 0 or lags < 0:
            raise InputError("--leads and --lags must be nonnegative")
        relative = tuple(range(-leads, lags + 1))
    return DesignConfig("dynamic", relative, _int_list(args.exclude), _window(panel, args.window))


def _estimate_rows_csv(est) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "estimate", "std_error"])
    for lab, c, s in zip(est.labels, est.coefficients, est.std_errors):
        w.writerow([lab, repr(float(c)), repr(float(s))])
    return buf.getvalue()


def _labels(panel, idx):
    return [panel.time_labels[i] for i in idx]


def _emit(text, out):
    if out is None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text if text.endswith("\n") else text + "\n")


def _load(args):
    return load_panel(args.input, args.schema)


def cmd_estimate(args) -> int:
    model = args.model
    if model == "dr":
        return _estimate_dr(args)
    panel = _load(args)
    if model in ("static", "dynamic"):
        if model == "static":
            est = static_fe(panel, _window(panel, args.window), small_sample=args.small_sample)
        else:
            est = dynamic_fe(panel, _dynamic_config(panel, args), small_sample=args.small_sample)
        if args.format == "csv":
            _emit(_estimate_rows_csv(est), args.out)
        else:
            out = {"model": model, **est.to_dict(include_vcov=args.vcov)}
            out["estimation_periods"] = _labels(panel, est.estimation_times)
            _emit(dumps(out), args.out)
        return EXIT_OK
    catt = saturated_catt(panel, _window(panel, args.window), small_sample=args.small_sample)
    if model == "saturated":
        if args.format == "csv":
            _emit(catt_to_csv(catt), args.out)
        else:
            out = {
                "model": "saturated",
                "cells": catt.to_rows(),
                "control": {"s": catt.base_period, "C": [str(c) for c in catt.control_cohorts]},
                "estimation_periods": _labels(panel, catt.estimation_times),
                "fit": catt.fit.to_dict(include_vcov=args.vcov),
            }
            _emit(dumps(out), args.out)
        return EXIT_OK
    if model == "iw":
        relative = None
        if args.leads is not None or args.lags is not None:
            relative = tuple(range(-(args.leads or 0), (args.lags or 0) + 1))
        iw = iw_dynamic(catt, relative_times=relative)
        if args.format == "csv":
            _emit(_estimate_rows_csv(iw.estimates), args.out)
        else:
            out = {
                "model": "iw",
                **iw.to_dict(),
                "fit": iw.estimates.to_dict(include_vcov=args.vcov),
                "cells": catt.to_rows(),
                "estimation_periods": _labels(panel, catt.estimation_times),
            }
            _emit(dumps(out), args.out)
        return EXIT_OK
    raise InputError(f"unknown model {model!r}")


def _estimate_dr(args) -> int:
    if args.cohort is None or args.lag is None:
        raise InputError("--model dr needs --cohort and --lag")
    covs = [c for c in (args.covariates or "").split(",") if c]
    cp = load_covariate_panel(args.input, covs, args.schema)
    e = time_index(cp.panel, [args.cohort])[0]
    learners = LearnerConfig(outcome=args.outcome_learner, propensity=args.propensity_learner)
    res = dr_estimate(cp, e, args.lag, K=args.folds, learner_config=learners, seed=args.seed)
    _emit(dumps({"model": "dr", **res.to_dict()}), args.out)
    return EXIT_OK


def cmd_weights(args) -> int:
    panel = _load(args)
    if args.model == "static":
        wd = static_weights(panel, _window(panel, args.window))
    else:
        if args.target_l is None:
            raise InputError("--target-l is required for dynamic weights")
        wd = dynamic_weights(panel, args.target_l, _dynamic_config(panel, args))
    if args.format == "json":
        flagged = set(wd.negativity_flags)
        out = {
            "target": "static" if wd.target_l is None else wd.target_l,
            "rows": wd.rows(args.flag_negative),
            "sums": {str(k): v for k, v in wd.sums.items()},
            "negative_cells": [list(c) for c in sorted(flagged)],
            "denominator": wd.denominator,
            "estimation_periods": _labels(panel, wd.estimation_times),
        }
        _emit(dumps(out), args.out)
    else:
        _emit(write_weights_csv(wd, flag_negative=args.flag_negative), args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec = three_cohort_spec() if args.spec is None else load_spec(args.spec)
    leads = 1 if args.leads is None else args.leads
    lags = spec.T - 1 if args.lags is None else args.lags
    configs = [
        EstimatorConfig("dynamic", relative_times=tuple(range(-leads, lags + 1)), pretrend=True),
        EstimatorConfig("iw"),
    ]
    summary = run_study(spec, args.reps, configs, master_seed=args.seed, workers=args.workers)
    if args.format == "csv":
        _emit(summary.histogram_csv(), args.out)
        return EXIT_OK
    _emit(summary.to_json(), args.out)
    hist_path = args.hist_out
    if hist_path is None and args.out is not None:
        hist_path = args.out.rsplit(".", 1)[0] + ".hist.csv"
    if hist_path is not None:
        _emit(summary.histogram_csv(), hist_path)
    return EXIT_OK


def cmd_pretrend(args) -> int:
    panel = _load(args)
    if args.model == "dynamic":
        fit = dynamic_fe(panel, _dynamic_config(panel, args), small_sample=args.small_sample)
    elif args.model in ("saturated", "iw"):
        catt = saturated_catt(panel, _window(panel, args.window), small_sample=args.small_sample)
        fit = catt if args.model == "saturated" else iw_dynamic(catt)
    else:
        raise InputError(f"pretrend supports dynamic, saturated and iw models, not {args.model!r}")
    res = pretrend_test(fit)
    _emit(dumps({"model": args.model, **res.to_dict()}), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="esk", description="Event-study estimation toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, models, default_model):
        sp.add_argument("--input", required=True, help="long-format panel CSV")
        sp.add_argument("--schema", help="column map, e.g. unit=id,time=wave,outcome=y,event=first")
        sp.add_argument("--model", choices=models, default=default_model)
        sp.add_argument("--leads", type=int, help="number of leads in the dynamic model")
        sp.add_argument("--lags", type=int, help="number of lags in the dynamic model")
        sp.add_argument("--exclude", help="comma-separated relative times to exclude")
        sp.add_argument("--window", help="estimation periods t0..t1 in the input's time labels")
        sp.add_argument("--out", help="output path (default stdout)")
        sp.add_argument("--small-sample", choices=["CR1", "CR0"], default="CR1")

    est = sub.add_parser("estimate", help="fit an estimator")
    common(est, ["static", "dynamic", "saturated", "iw", "dr"], "dynamic")
    est.add_argument("--format", choices=["json", "csv"], default="json")
    est.add_argument("--vcov", action="store_true", help="include the covariance matrix")
    est.add_argument("--covariates", help="comma-separated covariate columns (dr model)")
    est.add_argument("--cohort", type=int, help="target cohort, as an input time label (dr model)")
    est.add_argument("--lag", type=int, help="target relative time (dr model)")
    est.add_argument("--folds", type=int, default=5)
    est.add_argument("--seed", type=int, default=0)
    est.add_argument("--outcome-learner", default="ols", choices=["ols", "mean"])
    est.add_argument("--propensity-learner", default="logit", choices=["logit", "constant"])
    est.set_defaults(func=cmd_estimate)

    w = sub.add_parser("weights", help="implicit FE weights on cohort cells")
    common(w, ["static", "dynamic"], "dynamic")
    w.add_argument("--target-l", type=int)
    w.add_argument("--flag-negative", action="store_true", help="keep only negative weights")
    w.add_argument("--format", choices=["json", "csv"], default="csv")
    w.set_defaults(func=cmd_weights)

    s = sub.add_parser("simulate", help="Monte Carlo replication study")
    s.add_argument("--spec", help="DGP spec file (default: bundled three_cohort.spec)")
    s.add_argument("--reps", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--leads", type=int)
    s.add_argument("--lags", type=int)
    s.add_argument("--workers", type=int, help="worker processes (capped by ESK_THREADS)")
    s.add_argument("--out", help="summary JSON path (default stdout)")
    s.add_argument("--hist-out", help="histogram CSV path")
    s.add_argument("--format", choices=["json", "csv"], default="json")
    s.set_defaults(func=cmd_simulate)

    pt = sub.add_parser("pretrend", help="joint Wald test of the lead coefficients")
    common(pt, ["dynamic", "saturated", "iw"], "dynamic")
    pt.set_defaults(func=cmd_pretrend)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except EstimationError as exc:
        print(f"esk: estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except (InputError, EventStudyError) as exc:
        print(f"esk: input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        name = getattr(exc, "filename", None)
        print(f"esk: cannot access {name or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
