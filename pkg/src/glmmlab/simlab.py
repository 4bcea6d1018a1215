"""Scenario generation and the replication engine.

A scenario fixes the design, truth and the list of fitted mixing families;
the engine generates each replication's dataset once under common random
numbers, fits every family to it, predicts the realized random effects
both ways, and scores the predictions.  Results are sorted by
(cluster size, replication, family) before summarization, so summaries do
not depend on how work was scheduled across processes.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .config import (
    SLOPES_DESIGN,
    WITHIN_BETWEEN,
    ConfigError,
    FittedFamily,
    ScenarioConfig,
)
from .glmm import (
    BERNOULLI_LOGIT,
    Cluster,
    Dataset,
    FitOptions,
    FitResult,
    ModelSpec,
    fit,
    pack_params,
)
from .predict import msep, predict_dataset
from .ranef import BIVARIATE, BivariateNormal, sample, standardize
from .rng import replication_rng

__all__ = [
    "ReplicationResult",
    "SummaryRow",
    "SummaryTable",
    "COVARIATE_NAMES",
    "gen_covariates",
    "gen_dataset",
    "gen_mixture_bivariate",
    "scenario_model",
    "run_scenario",
    "run_slopes_scenario",
    "summarize",
    "write_summary_csv",
    "write_tidy_csv",
    "write_replications_csv",
]

COVARIATE_NAMES = ("between", "within")
_SLOPES_TIMES = np.array([0.0, 1.0, 2.0, 4.0, 6.0, 8.0])


@dataclass
class ReplicationResult:
    """One fitted family on one generated dataset."""

    replication: int
    cluster_size: int
    family_label: str
    fit: FitResult
    msep_mode: np.ndarray | float | None
    msep_mean: np.ndarray | float | None
    base_seed: int

    @property
    def seed_key(self) -> tuple[int, int]:
        # The generator key: a pure function of (base_seed, replication).
        return (self.base_seed, self.replication)


@dataclass
class SummaryRow:
    cluster_size: int
    family_label: str
    parameter: str
    truth: float | None
    bias: float | None
    sd: float
    mse: float | None
    median: float
    convergence_rate: float


@dataclass
class SummaryTable:
    rows: list[SummaryRow]

    def lookup(self, cluster_size: int, family_label: str, parameter: str) -> SummaryRow:
        for row in self.rows:
            if (
                row.cluster_size == cluster_size
                and row.family_label == family_label
                and row.parameter == parameter
            ):
                return row
        raise KeyError((cluster_size, family_label, parameter))


# --------------------------------------------------------------------- #
# Design and data generation
# --------------------------------------------------------------------- #


def gen_covariates(m: int, n: int, scheme: str) -> np.ndarray:
    """Design array (m, n, 2) with columns (between, within).

    within_between: the within covariate is equally spaced on [0, 1] and
    the between covariate marks the first ceil(0.25 m) clusters (a
    deterministic 25/75 split).  slopes_design: binary between covariate
    on the first ceil(m/2) clusters and measurement times
    (0, 1, 2, 4, 6, 8), which fixes n = 6.
    """
    if scheme == WITHIN_BETWEEN:
        if n < 2:
            raise ConfigError("within_between needs cluster sizes >= 2")
        within = np.linspace(0.0, 1.0, n)
        n_treated = math.ceil(0.25 * m)
    elif scheme == SLOPES_DESIGN:
        if n != len(_SLOPES_TIMES):
            raise ConfigError(
                f"slopes_design uses fixed times {_SLOPES_TIMES.tolist()}; "
                f"cluster size must be {len(_SLOPES_TIMES)}, got {n}"
            )
        within = _SLOPES_TIMES
        n_treated = math.ceil(0.5 * m)
    else:
        raise ConfigError(f"unknown covariate scheme {scheme!r}")
    between = (np.arange(m) < n_treated).astype(float)
    x = np.empty((m, n, 2))
    x[:, :, 0] = between[:, None]
    x[:, :, 1] = within[None, :]
    return x


def scenario_model(config: ScenarioConfig, fitted: FittedFamily) -> ModelSpec:
    slope_index = 1 if config.covariate_scheme == SLOPES_DESIGN else None
    return ModelSpec(
        BERNOULLI_LOGIT,
        COVARIATE_NAMES,
        fitted.family,
        fitted.free,
        slope_index=slope_index,
    )


def gen_dataset(config: ScenarioConfig, cluster_size: int, replication: int) -> Dataset:
    """Generate one replication's dataset with the replication-keyed stream.

    Stream layout: the random-effect draws for all m clusters come first,
    then one outcome uniform per observation in cluster-major order.  The
    b phase does not depend on cluster size, so every cluster size (and
    every fitted family) sees identical random effects for the same
    (base_seed, replication).
    """
    rng = replication_rng(config.base_seed, replication)
    dist = standardize(config.true_family, config.sigma_b)
    b = np.asarray(sample(dist, rng, size=config.m))
    x = gen_covariates(config.m, cluster_size, config.covariate_scheme)
    betas = np.asarray(config.true_betas)

    eta = betas[0] + x @ betas[1:]
    if config.covariate_scheme == SLOPES_DESIGN:
        eta = eta + b[:, 0][:, None] + b[:, 1][:, None] * x[:, :, 1]
    else:
        eta = eta + b[:, None]
    u = rng.random(config.m * cluster_size).reshape(config.m, cluster_size)
    y = (u < expit(eta)).astype(float)

    clusters = tuple(
        Cluster(i, y[i], x[i], true_ranef=(b[i].copy() if b.ndim == 2 else float(b[i])))
        for i in range(config.m)
    )
    return Dataset(clusters, COVARIATE_NAMES)


def gen_mixture_bivariate(family, rng: np.random.Generator) -> np.ndarray:
    """One (intercept, slope) draw from a bivariate normal mixture family."""
    return np.asarray(sample(standardize(family, 1.0), rng))


# --------------------------------------------------------------------- #
# Replication engine
# --------------------------------------------------------------------- #


def _fit_options(config: ScenarioConfig) -> FitOptions:
    return FitOptions(quad_points=config.quad_points, quad_adaptive=config.quad_adaptive)


def _run_unit(payload) -> list[ReplicationResult]:
    config, cluster_size, replication = payload
    dataset = gen_dataset(config, cluster_size, replication)
    out = []
    for fitted in config.fitted_families:
        if fitted.free and cluster_size in config.skip_free_shape_sizes:
            continue
        model = scenario_model(config, fitted)
        result = fit(dataset, model, _fit_options(config))
        preds_mode = predict_dataset(dataset, result, "mode", allow_unconverged=True)
        preds_mean = predict_dataset(dataset, result, "mean", allow_unconverged=True)
        out.append(
            ReplicationResult(
                replication=replication,
                cluster_size=cluster_size,
                family_label=fitted.label,
                fit=result,
                msep_mode=msep(preds_mode),
                msep_mean=msep(preds_mean),
                base_seed=config.base_seed,
            )
        )
    return out


def run_scenario(
    config: ScenarioConfig, workers: int | None = None, progress=None
) -> list[ReplicationResult]:
    """Fit every (cluster size, replication, family) cell of the scenario.

    Non-convergent fits are kept with converged=False so summaries can
    report convergence rates; nothing raises at the replication level.
    The result list is ordered by (size, replication, family) no matter
    how many workers ran it.
    """
    units = [
        (config, size, rep)
        for size in config.cluster_sizes
        for rep in range(config.n_replications)
    ]
    if workers is None:
        workers = os.cpu_count() or 1
    results: list[ReplicationResult] = []
    if workers <= 1 or len(units) == 1:
        for i, unit in enumerate(units):
            results.extend(_run_unit(unit))
            if progress:
                progress(i + 1, len(units))
    else:
        chunk = max(1, len(units) // (workers * 8))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for i, batch in enumerate(pool.map(_run_unit, units, chunksize=chunk)):
                results.extend(batch)
                if progress:
                    progress(i + 1, len(units))
    return results


def run_slopes_scenario(
    config: ScenarioConfig, workers: int | None = None, progress=None
) -> tuple[SummaryTable, list[ReplicationResult]]:
    """Random intercept-and-slope study: bivariate truth, 2-D quadrature."""
    if config.covariate_scheme != SLOPES_DESIGN:
        raise ConfigError("run_slopes_scenario needs covariate_scheme = slopes_design")
    if not isinstance(config.true_family, BIVARIATE):
        raise ConfigError("slopes scenarios need a bivariate true family")
    results = run_scenario(config, workers, progress)
    return summarize(results, config), results


# --------------------------------------------------------------------- #
# Summaries
# --------------------------------------------------------------------- #


def _truth_for(config: ScenarioConfig, name: str) -> float | None:
    betas = config.true_betas
    if name == "beta0":
        return betas[0]
    if name == "beta_between":
        return betas[1]
    if name == "beta_within":
        return betas[2]
    if name == "log_sigma_b" and not isinstance(config.true_family, BIVARIATE):
        return math.log(config.sigma_b) if config.sigma_b > 0 else None
    if isinstance(config.true_family, BivariateNormal):
        fam = config.true_family
        if name == "log_sd_intercept":
            return fam.log_sd_intercept
        if name == "log_sd_slope":
            return fam.log_sd_slope
        if name == "atanh_corr":
            return fam.atanh_correlation
    return None


def _msep_labels(result: ReplicationResult) -> list[tuple[str, float]]:
    out = []
    for method, value in (("mode", result.msep_mode), ("mean", result.msep_mean)):
        if value is None:
            continue
        arr = np.atleast_1d(np.asarray(value, dtype=float))
        if arr.size == 1:
            out.append((f"msep_{method}", float(arr[0])))
        else:
            out.append((f"msep_{method}_intercept", float(arr[0])))
            out.append((f"msep_{method}_slope", float(arr[1])))
    return out


def summarize(
    results: list[ReplicationResult],
    config: ScenarioConfig,
    convergent_only: bool = False,
) -> SummaryTable:
    """Per (cluster size, family, parameter) bias/SD/MSE/median summaries.

    Population formulas (ddof=0) keep the identity MSE = bias^2 + SD^2
    exact.  MSEP enters as extra parameter rows scored against a truth of
    zero, so its bias column is the mean MSEP across replications.
    """
    if not results:
        raise ValueError("no replication results to summarize")
    cells: dict[tuple[int, str], list[ReplicationResult]] = {}
    for res in results:
        cells.setdefault((res.cluster_size, res.family_label), []).append(res)

    rows: list[SummaryRow] = []
    for (size, label), group in sorted(cells.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        group = sorted(group, key=lambda r: r.replication)
        n_total = len(group)
        rate = sum(r.fit.converged for r in group) / n_total
        used = [r for r in group if r.fit.converged] if convergent_only else group
        if not used:
            continue
        names = used[0].fit.parameter_names
        flat = np.array([pack_params(r.fit.estimates, r.fit.model) for r in used])
        for j, name in enumerate(names):
            values = flat[:, j]
            truth = _truth_for(config, name)
            mean = float(values.mean())
            sd = float(values.std(ddof=0))
            rows.append(
                SummaryRow(
                    cluster_size=size,
                    family_label=label,
                    parameter=name,
                    truth=truth,
                    bias=None if truth is None else mean - truth,
                    sd=sd,
                    mse=None if truth is None else float(((values - truth) ** 2).mean()),
                    median=float(np.median(values)),
                    convergence_rate=rate,
                )
            )
        msep_values: dict[str, list[float]] = {}
        for r in used:
            for key, value in _msep_labels(r):
                msep_values.setdefault(key, []).append(value)
        for key, vals in msep_values.items():
            arr = np.asarray(vals)
            rows.append(
                SummaryRow(
                    cluster_size=size,
                    family_label=label,
                    parameter=key,
                    truth=0.0,
                    bias=float(arr.mean()),
                    sd=float(arr.std(ddof=0)),
                    mse=float((arr**2).mean()),
                    median=float(np.median(arr)),
                    convergence_rate=rate,
                )
            )
    return SummaryTable(rows)


# --------------------------------------------------------------------- #
# CSV emission
# --------------------------------------------------------------------- #


def _cell(value) -> str:
    return "" if value is None else repr(float(value))


def write_summary_csv(table: SummaryTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            [
                "cluster_size",
                "fitted_family",
                "parameter",
                "truth",
                "bias",
                "sd",
                "mse",
                "median",
                "convergence_rate",
            ]
        )
        for row in table.rows:
            writer.writerow(
                [
                    row.cluster_size,
                    row.family_label,
                    row.parameter,
                    _cell(row.truth),
                    _cell(row.bias),
                    _cell(row.sd),
                    _cell(row.mse),
                    _cell(row.median),
                    _cell(row.convergence_rate),
                ]
            )


def write_tidy_csv(table: SummaryTable, path) -> None:
    """Long-format summary: one (cell, parameter, metric, value) per row."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["cluster_size", "fitted_family", "parameter", "metric", "value"])
        for row in table.rows:
            for metric, value in (
                ("truth", row.truth),
                ("bias", row.bias),
                ("sd", row.sd),
                ("mse", row.mse),
                ("median", row.median),
                ("convergence_rate", row.convergence_rate),
            ):
                if value is None:
                    continue
                writer.writerow(
                    [row.cluster_size, row.family_label, row.parameter, metric, _cell(value)]
                )


def write_replications_csv(results: list[ReplicationResult], path) -> None:
    """One row per fit, with the union of parameter columns across families."""
    ordered = sorted(results, key=lambda r: (r.cluster_size, r.replication, r.family_label))
    param_cols: list[str] = []
    seen = set()
    for res in ordered:
        for name in res.fit.parameter_names:
            if name not in seen:
                seen.add(name)
                param_cols.append(name)
    msep_cols: list[str] = []
    for res in ordered:
        for key, _ in _msep_labels(res):
            if key not in msep_cols:
                msep_cols.append(key)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            [
                "cluster_size",
                "replication",
                "fitted_family",
                "base_seed",
                "converged",
                "iterations",
                "gradient_norm",
                "loglik",
                *msep_cols,
                *param_cols,
            ]
        )
        for res in ordered:
            values = dict(zip(res.fit.parameter_names,
                              pack_params(res.fit.estimates, res.fit.model)))
            mseps = dict(_msep_labels(res))
            writer.writerow(
                [
                    res.cluster_size,
                    res.replication,
                    res.family_label,
                    res.base_seed,
                    int(res.fit.converged),
                    res.fit.n_iterations,
                    repr(float(res.fit.gradient_norm)),
                    repr(float(res.fit.loglik)),
                    *[("" if c not in mseps else repr(mseps[c])) for c in msep_cols],
                    *[("" if c not in values else repr(float(values[c]))) for c in param_cols],
                ]
            )
