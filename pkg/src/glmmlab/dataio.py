"""CSV interchange for datasets, fit results and predictions.

Dataset files carry a ``cluster,y,<covariates...>`` header; an optional
``b_true`` column preserves simulation truth for prediction scoring.  Fit
results are emitted as ``parameter,estimate,std_error`` rows followed by a
single JSON status line carrying enough of the model description to
reconstruct the fit for prediction.
"""

from __future__ import annotations

import csv
import json
import math

import numpy as np

from .glmm import (
    BERNOULLI_LOGIT,
    GAUSSIAN_IDENTITY,
    Cluster,
    DataError,
    Dataset,
    FitResult,
    ModelSpec,
    derived_parameters,
    pack_params,
    parameter_names,
    unpack_params,
)
from .predict import PredictionSet, prediction_histogram
from .ranef import format_family, parse_family

__all__ = [
    "parse_model_spec",
    "format_model_spec",
    "read_dataset_csv",
    "write_dataset_csv",
    "write_fit_csv",
    "read_fit_csv",
    "write_predictions_csv",
    "write_histogram_csv",
]

_TRUTH_COLUMN = "b_true"


class _open_out:
    """Open a path for writing, or pass a ready stream through unchanged."""

    def __init__(self, target):
        self.target = target
        self.handle = None

    def __enter__(self):
        if hasattr(self.target, "write"):
            return self.target
        self.handle = open(self.target, "w", newline="", encoding="utf-8")
        return self.handle

    def __exit__(self, *exc):
        if self.handle is not None:
            self.handle.close()
        return False


def parse_model_spec(text: str) -> tuple[str, str | None]:
    """Parse a model spec like ``bernoulli`` or ``gaussian:slope=t``.

    Returns (outcome_family, slope_column_name_or_None).
    """
    body = text.strip().lower()
    slope = None
    if ":" in body:
        body, _, option = body.partition(":")
        option = option.strip()
        if not option.startswith("slope="):
            raise DataError(f"unknown model option {option!r}; expected slope=<column>")
        slope = option[len("slope="):].strip()
        if not slope:
            raise DataError("slope= needs a covariate column name")
    body = body.strip()
    if body in ("bernoulli", "bernoulli_logit", "logistic"):
        return BERNOULLI_LOGIT, slope
    if body in ("gaussian", "gaussian_identity", "linear"):
        return GAUSSIAN_IDENTITY, slope
    raise DataError(f"unknown outcome family {text!r}; use bernoulli or gaussian")


def format_model_spec(model: ModelSpec) -> str:
    name = "bernoulli" if model.outcome_family == BERNOULLI_LOGIT else "gaussian"
    if model.slope_index is not None:
        return f"{name}:slope={model.covariate_names[model.slope_index]}"
    return name


def read_dataset_csv(path) -> Dataset:
    """Load ``cluster,y,x...`` rows into a Dataset, preserving cluster order."""
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty dataset file") from None
        header = [h.strip() for h in header]
        if len(header) < 2 or header[0] != "cluster" or header[1] != "y":
            raise DataError(f"{path}: header must start with cluster,y")
        covariates = header[2:]
        has_truth = bool(covariates) and covariates[-1] == _TRUTH_COLUMN
        if has_truth:
            covariates = covariates[:-1]

        order: list[str] = []
        rows: dict[str, list[tuple[float, list[float], float | None]]] = {}
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}"
                )
            cid = row[0].strip()
            try:
                y = float(row[1])
                xs = [float(v) for v in row[2 : 2 + len(covariates)]]
                truth = float(row[-1]) if has_truth else None
            except ValueError as exc:
                raise DataError(f"{path}:{line_no}: non-numeric value ({exc})") from None
            if cid not in rows:
                rows[cid] = []
                order.append(cid)
            rows[cid].append((y, xs, truth))

    if not order:
        raise DataError(f"{path}: no data rows")
    clusters = []
    for cid in order:
        entries = rows[cid]
        y = np.array([e[0] for e in entries])
        x = np.array([e[1] for e in entries]).reshape(len(entries), len(covariates))
        truths = {e[2] for e in entries}
        truth = truths.pop() if has_truth and len(truths) == 1 else None
        key: object = int(cid) if cid.lstrip("-").isdigit() else cid
        clusters.append(Cluster(key, y, x, true_ranef=truth))
    return Dataset(tuple(clusters), tuple(covariates))


def write_dataset_csv(dataset: Dataset, path, include_truth: bool = False) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        header = ["cluster", "y", *dataset.covariate_names]
        if include_truth:
            header.append(_TRUTH_COLUMN)
        writer.writerow(header)
        for cluster in dataset.clusters:
            for t in range(cluster.n):
                row = [cluster.cluster_id, _fmt(cluster.y[t])]
                row.extend(_fmt(v) for v in cluster.x[t])
                if include_truth:
                    truth = cluster.true_ranef
                    row.append("" if truth is None else _fmt(float(np.atleast_1d(truth)[0])))
                writer.writerow(row)


def _fmt(value: float) -> str:
    return repr(float(value))


def fit_status_record(result: FitResult) -> dict:
    model = result.model
    return {
        "loglik": result.loglik,
        "converged": result.converged,
        "iterations": result.n_iterations,
        "gradient_norm": result.gradient_norm,
        "model": format_model_spec(model),
        "ranef": format_family(model.ranef_family, model.ranef_free),
        "covariates": list(model.covariate_names),
    }


def write_fit_csv(result: FitResult, stream) -> None:
    """Emit parameter rows plus the one-line JSON status record."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["parameter", "estimate", "std_error"])
    flat = pack_params(result.estimates, result.model)
    for name, value, se in zip(result.parameter_names, flat, result.std_errors):
        writer.writerow([name, _fmt(value), "" if math.isnan(se) else _fmt(se)])
    for name, value in derived_parameters(result):
        writer.writerow([name, _fmt(value), ""])
    stream.write(json.dumps(fit_status_record(result)) + "\n")


def write_fit_csv_path(result: FitResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        write_fit_csv(result, handle)


def read_fit_csv(path) -> FitResult:
    """Rebuild a FitResult from the CSV + status line written by write_fit_csv."""
    estimates: dict[str, float] = {}
    errors: dict[str, float] = {}
    status = None
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            if line.startswith("{"):
                status = json.loads(line)
                continue
            name, _, rest = line.partition(",")
            if name == "parameter":
                continue
            value, _, se = rest.partition(",")
            estimates[name] = float(value)
            if se:
                errors[name] = float(se)
    if status is None:
        raise DataError(f"{path}: missing status record line")
    outcome, slope_name = parse_model_spec(status["model"])
    covariates = tuple(status["covariates"])
    slope_index = covariates.index(slope_name) if slope_name else None
    family, free = parse_family(status["ranef"])
    model = ModelSpec(outcome, covariates, family, free, slope_index)
    names = parameter_names(model)
    missing = [n for n in names if n not in estimates]
    if missing:
        raise DataError(f"{path}: missing parameter rows {missing}")
    flat = np.array([estimates[n] for n in names])
    std_errors = np.array([errors.get(n, np.nan) for n in names])
    return FitResult(
        estimates=unpack_params(flat, model),
        std_errors=std_errors,
        loglik=float(status["loglik"]),
        converged=bool(status["converged"]),
        n_iterations=int(status["iterations"]),
        gradient_norm=float(status.get("gradient_norm", float("nan"))),
        parameter_names=names,
        model=model,
    )


def write_predictions_csv(predictions: PredictionSet, path) -> None:
    """Rows ``cluster,b_hat[,b_true]``; slope models get per-component columns.

    ``path`` may be a filesystem path or an open text stream.
    """
    values = predictions.values
    truths = predictions.true_values
    paired = values.ndim == 2
    with _open_out(path) as handle:
        writer = csv.writer(handle, lineterminator="\n")
        if paired:
            header = ["cluster", "b0_hat", "bw_hat"]
            if truths is not None:
                header += ["b0_true", "bw_true"]
        else:
            header = ["cluster", "b_hat"]
            if truths is not None:
                header.append(_TRUTH_COLUMN)
        writer.writerow(header)
        for i, cid in enumerate(predictions.cluster_ids):
            if paired:
                row = [cid, _fmt(values[i, 0]), _fmt(values[i, 1])]
                if truths is not None:
                    row += [_fmt(truths[i, 0]), _fmt(truths[i, 1])]
            else:
                row = [cid, _fmt(values[i])]
                if truths is not None:
                    row.append(_fmt(truths[i]))
            writer.writerow(row)


def write_histogram_csv(values: np.ndarray, path, bins: int = 20) -> None:
    edges, counts = prediction_histogram(values, bins)
    with _open_out(path) as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["bin_left", "bin_right", "count"])
        for i, count in enumerate(counts):
            writer.writerow([_fmt(edges[i]), _fmt(edges[i + 1]), int(count)])
