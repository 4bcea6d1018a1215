"""Command-line interface.

Subcommands: moments, fit, predict, simulate, slopes, asymptotics.  Runs
are reproducible by construction: identical command, config and seed give
byte-identical output files, and simulation outputs land in a directory
named by the base seed and a content hash of the resolved configuration
(no timestamps anywhere).

Exit codes: 0 success, 2 usage/config error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import asymptotics, dataio, simlab
from .config import (
    ConfigError,
    LimitConfig,
    apply_desk_preset,
    emit_limit_config,
    emit_scenario_config,
    parse_limit_config,
    parse_scenario_config,
)
from .glmm import (
    BERNOULLI_LOGIT,
    DataError,
    FitOptions,
    ModelSpec,
    ParamVector,
    fit,
    parameter_names,
)
from .predict import predict_dataset
from .ranef import FamilyParseError, MomentError, central_stats, parse_family

USAGE_ERROR = 2
IO_ERROR = 3


class CliError(Exception):
    def __init__(self, message: str, code: int = USAGE_ERROR):
        super().__init__(message)
        self.code = code


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glmmlab",
        description="Mixed-model estimation with pluggable random-effects "
        "distributions, plus a misspecification simulation lab.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("moments", help="print base-variate moments of a family")
    p.add_argument("--family", required=True, help="family spec, e.g. 'tukey(g=0.5,h=0.1)'")

    p = sub.add_parser("fit", help="fit a mixed model to a dataset CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True,
                   help="bernoulli | gaussian, optionally :slope=<column>")
    p.add_argument("--ranef", required=True, help="random-effects family spec")
    p.add_argument("--quad-points", type=int, default=None)
    p.add_argument("--quad-adaptive", choices=("auto", "on", "off"), default="auto")
    p.add_argument("--start", default=None, help="fit CSV providing start values")
    p.add_argument("--out", default=None, help="output file (default stdout)")

    p = sub.add_parser("predict", help="predict random effects from a saved fit")
    p.add_argument("--data", required=True)
    p.add_argument("--fit", required=True, help="fit CSV written by the fit command")
    p.add_argument("--method", choices=("mode", "mean"), required=True)
    p.add_argument("--out", default=None, help="predictions CSV (default stdout)")
    p.add_argument("--hist", default=None, help="also write a 20-bin histogram CSV")

    p = sub.add_parser("simulate", help="run a random-intercept simulation study")
    p.add_argument("--config", required=True)
    p.add_argument("--desk", action="store_true",
                   help="desk preset: 200 replications, sizes 2/10/40")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", default="runs", help="parent directory for outputs")
    p.add_argument("--tidy", action="store_true", help="also emit long-format CSV")

    p = sub.add_parser("slopes", help="run a random intercept-and-slope study")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", default="runs")
    p.add_argument("--tidy", action="store_true")

    p = sub.add_parser("asymptotics", help="compute misspecified-ML limits")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="runs")
    return parser


# --------------------------------------------------------------------- #
# Subcommand implementations
# --------------------------------------------------------------------- #


def _cmd_moments(args) -> int:
    family, _ = parse_family(args.family)
    try:
        mean, var, skew, kurt = central_stats(family)
    except MomentError as exc:
        raise CliError(f"moment error: {exc}")
    print(f"mean      {mean:.6g}")
    print(f"variance  {var:.6g}")
    print(f"skewness  {skew:.6g}")
    print(f"kurtosis  {kurt:.6g}  (raw convention: normal = 3)")
    return 0


def _read_text(path: str) -> str:
    return Path(path).read_text(encoding="utf-8")


def _cmd_fit(args) -> int:
    outcome, slope_name = dataio.parse_model_spec(args.model)
    dataset = dataio.read_dataset_csv(args.data)
    slope_index = None
    if slope_name is not None:
        if slope_name not in dataset.covariate_names:
            raise CliError(f"missing covariate column: {slope_name}")
        slope_index = dataset.covariate_names.index(slope_name)
    family, free = parse_family(args.ranef)
    model = ModelSpec(outcome, dataset.covariate_names, family, free, slope_index)

    start = None
    if args.start:
        start_fit = dataio.read_fit_csv(args.start)
        if start_fit.parameter_names != parameter_names(model):
            raise CliError("start file parameters do not match the requested model")
        start = start_fit.estimates
    adaptive = {"auto": None, "on": True, "off": False}[args.quad_adaptive]
    options = FitOptions(quad_points=args.quad_points, quad_adaptive=adaptive, start=start)
    result = fit(dataset, model, options)
    if args.out:
        dataio.write_fit_csv_path(result, args.out)
    else:
        dataio.write_fit_csv(result, sys.stdout)
    return 0


def _cmd_predict(args) -> int:
    dataset = dataio.read_dataset_csv(args.data)
    fit_result = dataio.read_fit_csv(args.fit)
    if dataset.covariate_names != fit_result.model.covariate_names:
        raise CliError(
            "dataset covariates do not match the fit: "
            f"{dataset.covariate_names} vs {fit_result.model.covariate_names}"
        )
    predictions = predict_dataset(
        dataset, fit_result, args.method, allow_unconverged=True
    )
    dataio.write_predictions_csv(predictions, args.out or sys.stdout)
    if args.hist:
        values = predictions.values
        dataio.write_histogram_csv(
            values if values.ndim == 1 else values[:, 0], args.hist
        )
    return 0


def _run_dir(parent: str, kind: str, base_seed: int, content: str) -> Path:
    digest = hashlib.sha256(content.encode("utf-8")).hexdigest()[:12]
    path = Path(parent) / f"{kind}_seed{base_seed}_{digest}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _progress(done: int, total: int) -> None:
    if done == total or done % 25 == 0:
        print(f"  {done}/{total} work units", file=sys.stderr)


def _cmd_simulate(args, slopes: bool) -> int:
    config = parse_scenario_config(_read_text(args.config))
    if not slopes and getattr(args, "desk", False):
        config = apply_desk_preset(config)
    resolved = emit_scenario_config(config)
    kind = "slopes" if slopes else "simulate"
    out_dir = _run_dir(args.out, kind, config.base_seed, resolved)
    (out_dir / "config_resolved.cfg").write_text(resolved, encoding="utf-8")
    if slopes:
        table, results = simlab.run_slopes_scenario(config, args.workers, _progress)
    else:
        results = simlab.run_scenario(config, args.workers, _progress)
        table = simlab.summarize(results, config)
    simlab.write_summary_csv(table, out_dir / "summary.csv")
    simlab.write_replications_csv(results, out_dir / "replications.csv")
    if args.tidy:
        simlab.write_tidy_csv(table, out_dir / "summary_tidy.csv")
    print(out_dir)
    return 0


def _limit_problem(config: LimitConfig) -> asymptotics.LimitProblem:
    within = np.linspace(0.0, 1.0, config.n) if config.n > 1 else np.zeros(1)
    archetypes = tuple(
        asymptotics.Archetype(
            np.column_stack([np.full(config.n, btw), within]), prob
        )
        for btw, prob in ((1.0, 0.25), (0.0, 0.75))
    )
    true_model = ModelSpec(
        BERNOULLI_LOGIT, simlab.COVARIATE_NAMES, config.true_family
    )
    assumed_model = ModelSpec(
        BERNOULLI_LOGIT, simlab.COVARIATE_NAMES, config.assumed_family,
        config.assumed_free,
    )
    true_params = ParamVector(
        beta=np.asarray(config.true_betas), log_sigma_b=math.log(config.sigma_b)
    )
    return asymptotics.LimitProblem(archetypes, true_model, true_params, assumed_model)


def _cmd_asymptotics(args) -> int:
    config = parse_limit_config(_read_text(args.config))
    problem = _limit_problem(config)
    from .quadrature import gauss_hermite

    rule = gauss_hermite(config.quad_points)
    result = asymptotics.kl_limit(problem, rule)
    resolved = emit_limit_config(config)
    out_dir = _run_dir(args.out, "asymptotics", 0, resolved)
    (out_dir / "config_resolved.cfg").write_text(resolved, encoding="utf-8")

    true_names = parameter_names(problem.true_model)
    true_flat = dict(
        zip(true_names, np.atleast_1d(
            np.concatenate([problem.true_params.beta,
                            [problem.true_params.log_sigma_b]])
        ))
    )
    from .glmm import pack_params

    limit_flat = pack_params(result.theta_star, problem.assumed_model)
    with open(out_dir / "theta_star.csv", "w", encoding="utf-8") as handle:
        handle.write("parameter,true_value,limit_value,abs_bias\n")
        for name, value in zip(result.parameter_names, limit_flat):
            value = float(value)
            if name in true_flat:
                truth = float(true_flat[name])
                handle.write(
                    f"{name},{truth!r},{value!r},{abs(value - truth)!r}\n"
                )
            else:
                handle.write(f"{name},,{value!r},\n")
    status = {
        "expected_loglik": result.expected_loglik,
        "converged": result.converged,
        "iterations": result.optimize.n_iters,
    }
    (out_dir / "status.json").write_text(json.dumps(status) + "\n", encoding="utf-8")
    print(out_dir)
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "moments":
            return _cmd_moments(args)
        if args.command == "fit":
            return _cmd_fit(args)
        if args.command == "predict":
            return _cmd_predict(args)
        if args.command == "simulate":
            return _cmd_simulate(args, slopes=False)
        if args.command == "slopes":
            return _cmd_simulate(args, slopes=True)
        if args.command == "asymptotics":
            return _cmd_asymptotics(args)
        raise CliError(f"unknown command {args.command!r}")
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, DataError, FamilyParseError, MomentError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return IO_ERROR


if __name__ == "__main__":
    sys.exit(main())
