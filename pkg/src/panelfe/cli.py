"""Command-line front end: fit, correct, ape, simulate, project.

Every run emits machine-readable output with the resolved configuration
embedded, so a result is reproducible from its own JSON plus the input
file.  Exit codes: 0 success, 2 input error, 3 validation failure,
4 non-convergence, 5 internal error.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import __version__
from ._serialize import to_json
from .bias import abc, hbc, jbc, psbc, sbc
from .data import build_index, load_csv, validate, drop_groups
from .effects import EffectSpec, ape, corrected_ape
from .errors import (ConvergenceError, InputError, PanelFEError,
                     SingularHessianError, ValidationError)
from .estimator import SolveOptions, fit, vcov_beta
from .families import get_family
from .projection import two_way_project
from .simlab import McDesign, run_mc

EXIT_INPUT = 2
EXIT_VALIDATION = 3
EXIT_CONVERGENCE = 4
EXIT_INTERNAL = 5


def _add_data_args(p):
    p.add_argument("--data", required=True, help="input CSV (columns unit, period, y, covariates)")
    p.add_argument("--family", required=True,
                   choices=["linear", "probit", "logit", "poisson"])
    p.add_argument("--unit-col", default="unit")
    p.add_argument("--period-col", default="period")
    p.add_argument("--y-col", default="y")
    p.add_argument("--drop-flagged", action="store_true",
                   help="drop units/periods flagged by validation instead of erroring")


def _add_solver_args(p):
    p.add_argument("--tol", type=float, default=1e-9,
                   help="gradient tolerance (count-normalized scores)")
    p.add_argument("--tol-proj", type=float, default=1e-10,
                   help="projection orthogonality tolerance")
    p.add_argument("--max-iter", type=int, default=100, help="outer Newton iterations")


def _add_output_args(p):
    p.add_argument("--output", default=None, help="write here instead of stdout")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="panelfe",
        description="Two-way fixed-effects panel estimation with bias corrections",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fixed-effects MLE")
    _add_data_args(p)
    _add_solver_args(p)
    _add_output_args(p)

    p = sub.add_parser("correct", help="bias-corrected coefficients")
    _add_data_args(p)
    _add_solver_args(p)
    _add_output_args(p)
    p.add_argument("--method", required=True,
                   choices=["abc", "jbc", "sbc", "hbc", "psbc"])
    p.add_argument("--trim", type=int, default=0,
                   help="trimming lag M for the analytical/profile-score corrections")
    p.add_argument("--iterations", type=int, default=1,
                   help="iterations of the analytical correction")
    p.add_argument("--splits", type=int, default=50,
                   help="random unit partitions for the split-panel correction")
    p.add_argument("--seed", type=int, default=0, help="seed for the unit partitions")
    p.add_argument("--lag-average", choices=["per_period", "pairwise"],
                   default="per_period",
                   help="normalization of the trimmed cross terms")
    p.add_argument("--drop-degenerate", action="store_true",
                   help="drop zero-variation groups inside jackknife subpanels "
                        "(their limiting contribution to the coefficient fit is nil)")

    p = sub.add_parser("ape", help="average partial effects")
    _add_data_args(p)
    _add_solver_args(p)
    _add_output_args(p)
    p.add_argument("--covariate", required=True, help="covariate name")
    p.add_argument("--mode", choices=["discrete", "marginal"], default="marginal")
    p.add_argument("--target", choices=["nt", "pop", "t"], default="nt")
    p.add_argument("--method", choices=["fe", "jbc", "sbc", "hbc"], default="fe")
    p.add_argument("--splits", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--drop-degenerate", action="store_true",
                   help="drop zero-variation groups inside jackknife subpanels")

    p = sub.add_parser("simulate", help="Monte Carlo experiment")
    p.add_argument("--design", required=True, help="key=value design file")
    p.add_argument("--reps", type=int, default=None, help="override replications")
    p.add_argument("--seed", type=int, default=None, help="override seed")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--format", choices=["table", "json"], default="table")
    _add_output_args(p)

    p = sub.add_parser("project", help="export weighted two-way projected covariates")
    _add_data_args(p)
    _add_solver_args(p)
    _add_output_args(p)
    p.add_argument("--uniform-weights", action="store_true",
                   help="use unit weights instead of fitted information weights")
    return parser


def _load_panel(args):
    schema = {"unit": args.unit_col, "period": args.period_col, "y": args.y_col}
    data = load_csv(args.data, schema)
    family = get_family(args.family)
    report = validate(data, family)
    if report.collinear_covariates:
        raise ValidationError(
            f"covariates collinear with the unit/period dummies: "
            f"{list(report.collinear_covariates)}")
    if report.drop_units or report.drop_periods:
        if not args.drop_flagged:
            raise ValidationError(
                "validation flagged groups to drop (rerun with --drop-flagged "
                "to apply): " + to_json(report.to_dict()))
        data = drop_groups(data, report.drop_units, report.drop_periods)
        report2 = validate(data, family)
        if report2.drop_units or report2.drop_periods:
            data = drop_groups(data, report2.drop_units, report2.drop_periods)
    return data, family


def _options(args) -> SolveOptions:
    return SolveOptions(tol_grad=args.tol, tol_proj=args.tol_proj,
                        max_outer=args.max_iter)


def _config_dict(args) -> dict:
    skip = {"output"}
    return {k: v for k, v in sorted(vars(args).items())
            if k not in skip and v is not None}


def _write(args, text: str):
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _fit_payload(result, data):
    return {
        "beta": dict(zip(data.covariate_names, result.beta)),
        "alpha": list(result.alpha),
        "gamma": list(result.gamma),
        "loglik": result.loglik,
        "sigma2": result.sigma2,
        "iterations": result.iterations,
        "converged": result.converged,
        "n_obs": result.n_obs,
        "n_units": result.n_units,
        "n_periods": result.n_periods,
    }


def cmd_fit(args) -> int:
    data, family = _load_panel(args)
    result = fit(data, family, _options(args))
    payload = _fit_payload(result, data)
    payload["vcov"] = vcov_beta(result)
    payload["se"] = dict(zip(data.covariate_names,
                             np.sqrt(np.diag(vcov_beta(result)))))
    _write(args, to_json({"config": _config_dict(args), "result": payload}))
    return 0


def cmd_correct(args) -> int:
    data, family = _load_panel(args)
    opts = _options(args)
    if args.method in ("jbc", "sbc", "hbc") and args.trim:
        print(f"warning: --trim is ignored by {args.method}", file=sys.stderr)
    if args.method == "abc":
        est = abc(data, family, M=args.trim, iterations=args.iterations,
                  opts=opts, lag_average=args.lag_average)
    elif args.method == "jbc":
        est = jbc(data, family, opts=opts, drop_degenerate=args.drop_degenerate)
    elif args.method == "sbc":
        est = sbc(data, family, num_unit_splits=args.splits, seed=args.seed,
                  opts=opts, drop_degenerate=args.drop_degenerate)
    elif args.method == "hbc":
        est = hbc(data, family, opts=opts, drop_degenerate=args.drop_degenerate)
    else:
        est = psbc(data, family, M=args.trim, opts=opts,
                   lag_average=args.lag_average)
    payload = {
        "method": est.method,
        "beta": dict(zip(data.covariate_names, est.beta)),
        "fe_beta": dict(zip(data.covariate_names, est.fe_beta)),
        "se": dict(zip(data.covariate_names, est.se())),
        "vcov": est.vcov,
        "params": est.params,
        "flags": list(est.flags),
    }
    if est.bias_B is not None:
        payload["B"] = list(est.bias_B)
        payload["D"] = list(est.bias_D)
    if est.subestimates is not None:
        payload["subestimates"] = {k: v for k, v in est.subestimates.items()}
    _write(args, to_json({"config": _config_dict(args), "result": payload}))
    return 0


def cmd_ape(args) -> int:
    data, family = _load_panel(args)
    opts = _options(args)
    try:
        k = data.covariate_names.index(args.covariate)
    except ValueError:
        raise InputError(f"no covariate named {args.covariate!r}") from None
    spec = EffectSpec(k, args.mode)
    if args.method == "fe":
        result = ape(fit(data, family, opts), data, spec, target=args.target)
    else:
        result = corrected_ape(data, family, spec, target=args.target,
                               method=args.method,
                               num_unit_splits=args.splits, seed=args.seed,
                               opts=opts, drop_degenerate=args.drop_degenerate)
    _write(args, to_json({"config": _config_dict(args), "result": result.to_dict()}))
    return 0


def parse_design_file(path) -> dict:
    """Plain-text key=value design spec with # comments."""
    cfg: dict = {}
    try:
        with open(path) as fh:
            for line_no, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise InputError(f"{path}:{line_no}: expected key=value")
                key, value = (s.strip() for s in line.split("=", 1))
                cfg[key] = value
    except FileNotFoundError:
        raise InputError(f"design file not found: {path}") from None
    return cfg


def _design_from_config(cfg: dict) -> McDesign:
    def split_list(s):
        return tuple(v.strip() for v in s.split(",") if v.strip())

    known_params = {"sigma_alpha", "sigma_gamma", "corr_alpha", "rho_x",
                    "burn", "trim", "iterations", "splits", "min_obs"}
    params = {}
    for key in known_params & set(cfg):
        raw = cfg[key]
        params[key] = int(raw) if key in ("burn", "trim", "iterations",
                                          "splits", "min_obs") else float(raw)
    try:
        return McDesign(
            generator=cfg.get("design", cfg.get("generator", "iid_exog")),
            family=cfg["family"],
            n_units=int(cfg["N"]),
            n_periods=int(cfg["T"]),
            beta0=tuple(float(v) for v in split_list(cfg["beta0"])),
            replications=int(cfg.get("reps", 100)),
            seed=int(cfg.get("seed", 0)),
            estimators=split_list(cfg.get("estimators", "fe")),
            params=params,
        )
    except KeyError as err:
        raise InputError(f"design file missing required key {err}") from None
    except ValueError as err:
        raise InputError(f"bad design value: {err}") from None


def cmd_simulate(args) -> int:
    cfg = parse_design_file(args.design)
    design = _design_from_config(cfg)
    if args.reps is not None:
        design = McDesign(**{**design.__dict__, "replications": args.reps})
    if args.seed is not None:
        design = McDesign(**{**design.__dict__, "seed": args.seed})
    report = run_mc(design, workers=args.workers)
    if args.format == "json":
        _write(args, to_json({"config": _config_dict(args),
                              "result": report.to_dict()}))
    else:
        _write(args, report.to_text())
    return 0


def cmd_project(args) -> int:
    data, family = _load_panel(args)
    opts = _options(args)
    idx = build_index(data)
    if args.uniform_weights:
        weights = np.ones(data.n_obs)
    else:
        weights = fit(data, family, opts).omega
    xt = two_way_project(data.x, weights, data.unit, data.period,
                         idx.n_units, idx.n_periods, tol=opts.tol_proj)
    lines = ["unit,period," + ",".join(f"{c}_tilde" for c in data.covariate_names)]
    for row in range(data.n_obs):
        vals = ",".join("%.17g" % v for v in xt[row])
        lines.append(f"{data.unit_label(data.unit[row])},"
                     f"{data.period_label(data.period[row])},{vals}")
    _write(args, "\n".join(lines))
    return 0


_COMMANDS = {
    "fit": cmd_fit,
    "correct": cmd_correct,
    "ape": cmd_ape,
    "simulate": cmd_simulate,
    "project": cmd_project,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except InputError as err:
        print(f"input error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except ValidationError as err:
        print(f"validation failure: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConvergenceError,) as err:
        print(f"non-convergence: {err}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (SingularHessianError, PanelFEError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
