"""Posterior-mode and posterior-mean prediction of realized random effects.

Modes for families with closed densities (normal, centered exponential,
discrete) maximize the conditional log-likelihood plus log density in
b-space.  The Tukey family has no usable density, so its mode is defined as
the z-space posterior mode mapped through b(z); mode location is not
invariant under reparameterization, and declaring z as the family's
native coordinate makes the Tukey path well defined.  Mean squared error
of prediction (MSEP) scores predictions against simulation truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .glmm import (
    Cluster,
    Dataset,
    FitResult,
    ModelSpec,
    ParamVector,
    _bivariate_posterior_modes,
    _eta0,
    _ll_derivs,
    _make_blocks,
    _outcome_ll,
    _single_block,
    _resolve_adaptive,
    _z_posterior_modes,
    default_rule,
    standardized_at,
)
from .quadrature import QuadratureRule
from .ranef import (
    BivariateNormal,
    BivariateNormalMixture,
    CenteredExponential,
    DiscreteK,
    Normal,
    StandardizedRanef,
    TukeyGH,
    UnsupportedFamilyError,
    discrete_support,
    z_representation,
)

__all__ = [
    "MissingTruthError",
    "PredictionSet",
    "posterior_mode",
    "posterior_mean",
    "predict_dataset",
    "msep",
    "prediction_histogram",
]


class MissingTruthError(ValueError):
    """MSEP was requested but no true random effects are available."""


@dataclass
class PredictionSet:
    """One prediction per cluster, ordered by cluster id."""

    cluster_ids: tuple
    values: np.ndarray  # (m,) scalar structure, (m, 2) slopes
    method: str  # "mode" | "mean"
    fit: FitResult
    true_values: np.ndarray | None = None


# --------------------------------------------------------------------- #
# Vectorized mode searches (one block of equal-sized clusters at a time)
# --------------------------------------------------------------------- #


def _modes_normal(block, eta0, dist, params, model):
    """Damped Newton on l'(b) - b / sigma^2 = 0; strictly concave."""
    sigma = dist.sigma_b
    if sigma == 0.0:
        return np.zeros(block.y.shape[0])

    def post(b):
        ll = _outcome_ll(block, (eta0 + b[:, None])[:, None, :], params, model)[:, 0]
        return ll - 0.5 * (b / sigma) ** 2

    b = np.zeros(block.y.shape[0])
    value = post(b)
    for _ in range(60):
        lp, lpp = _ll_derivs(block, eta0 + b[:, None], params, model)
        step = -(lp - b / sigma**2) / (lpp - 1.0 / sigma**2)
        scale = np.ones_like(b)
        for _ in range(25):
            worse = post(b + scale * step) < value - 1e-13
            if not worse.any():
                break
            scale = np.where(worse, 0.5 * scale, scale)
        b = b + scale * step
        value = post(b)
        if np.max(np.abs(scale * step)) < 1e-11:
            break
    return b


def _modes_exponential(block, eta0, dist, params, model):
    """Bisection on the decreasing score l'(b) - 1/sigma over [-sigma, inf)."""
    sigma = dist.sigma_b
    m = block.y.shape[0]
    if sigma == 0.0:
        return np.zeros(m)
    lower = np.full(m, -sigma)

    def score(b):
        lp, _ = _ll_derivs(block, eta0 + b[:, None], params, model)
        return lp - 1.0 / sigma

    # Posterior density is exp(l(b) - b/sigma): decreasing score means the
    # maximum sits at the left support edge whenever the score is already
    # non-positive there.
    at_edge = score(lower) <= 0.0
    upper = lower + sigma + 1.0
    for _ in range(60):
        still_rising = score(upper) > 0.0
        if not still_rising.any():
            break
        upper = np.where(still_rising, lower + 2.0 * (upper - lower), upper)
    lo, hi = lower.copy(), upper
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        rising = score(mid) > 0.0
        lo = np.where(rising, mid, lo)
        hi = np.where(rising, hi, mid)
    return np.where(at_edge, lower, 0.5 * (lo + hi))


def _modes_discrete(block, eta0, dist, params, model):
    """Argmax over the support; ties resolve to the lowest-index point."""
    support, weights = discrete_support(dist)
    eta = eta0[:, None, :] + support[None, :, None]
    ll = _outcome_ll(block, eta, params, model) + np.log(weights)[None, :]
    return support[np.argmax(ll, axis=1)]


def _modes_tukey(block, eta0, dist, params, model):
    z_mode, _ = _z_posterior_modes(block, eta0, dist, params, model)
    return np.asarray(z_representation(dist)(z_mode))


def _block_modes(block, params: ParamVector, model: ModelSpec,
                 dist: StandardizedRanef):
    eta0 = _eta0(block, params.beta)
    fam = dist.family
    if isinstance(fam, Normal):
        return _modes_normal(block, eta0, dist, params, model)
    if isinstance(fam, CenteredExponential):
        return _modes_exponential(block, eta0, dist, params, model)
    if isinstance(fam, DiscreteK):
        return _modes_discrete(block, eta0, dist, params, model)
    if isinstance(fam, TukeyGH):
        return _modes_tukey(block, eta0, dist, params, model)
    if isinstance(fam, BivariateNormal):
        return _bivariate_posterior_modes(block, eta0, fam, params, model)[0]
    raise UnsupportedFamilyError(
        f"posterior mode is not defined for {type(fam).__name__}; "
        "use the posterior mean"
    )


# --------------------------------------------------------------------- #
# Vectorized posterior means
# --------------------------------------------------------------------- #


def _weighted_posterior_mean(ll: np.ndarray, log_w: np.ndarray, b: np.ndarray):
    """sum_k w_k b_k L_k / sum_k w_k L_k, stabilized; b broadcasts with ll."""
    lw = ll + log_w
    lw_max = lw.max(axis=1, keepdims=True)
    w = np.exp(lw - lw_max)
    if b.ndim == 3:  # (m, K, 2) node pairs
        return (w[:, :, None] * b).sum(axis=1) / w.sum(axis=1)[:, None]
    return (w * b).sum(axis=1) / w.sum(axis=1)


def _block_means(block, params: ParamVector, model: ModelSpec,
                 dist: StandardizedRanef, rule: QuadratureRule, adaptive: bool):
    eta0 = _eta0(block, params.beta)
    fam = dist.family
    m = block.y.shape[0]

    if isinstance(fam, DiscreteK):
        support, weights = discrete_support(dist)
        eta = eta0[:, None, :] + support[None, :, None]
        ll = _outcome_ll(block, eta, params, model)
        return _weighted_posterior_mean(
            ll, np.broadcast_to(np.log(weights), ll.shape),
            np.broadcast_to(support, ll.shape)
        )

    if isinstance(fam, BivariateNormal):
        if adaptive:
            from .glmm import _bivariate_nested_quadrature
            from .quadrature import gauss_hermite

            marginal, bw, b0_nodes, combined = _bivariate_nested_quadrature(
                block, eta0, fam, params, model, gauss_hermite(min(rule.order, 9))
            )
            weights = np.exp(combined - marginal[:, None, None])
            mean_b0 = (weights * b0_nodes).sum(axis=(1, 2))
            mean_bw = (weights.sum(axis=2) * bw).sum(axis=1)
            return np.column_stack([mean_b0, mean_bw])
        pairs = rule.nodes @ fam.cholesky.T
        eta = (
            eta0[:, None, :]
            + pairs[None, :, 0, None]
            + pairs[None, :, 1, None] * block.slope[:, None, :]
        )
        ll = _outcome_ll(block, eta, params, model)
        log_w = np.broadcast_to(np.log(rule.weights), ll.shape)
        return _weighted_posterior_mean(ll, log_w, np.broadcast_to(pairs, (m,) + pairs.shape))

    if isinstance(fam, BivariateNormalMixture):
        center = np.array([fam.center_intercept, fam.center_slope])
        spread = rule.nodes @ fam.component_cholesky.T
        pairs = np.concatenate([center + spread, -center + spread])
        eta = (
            eta0[:, None, :]
            + pairs[None, :, 0, None]
            + pairs[None, :, 1, None] * block.slope[:, None, :]
        )
        ll = _outcome_ll(block, eta, params, model)
        log_w = np.log(0.5 * np.concatenate([rule.weights, rule.weights]))
        return _weighted_posterior_mean(
            ll, np.broadcast_to(log_w, ll.shape), np.broadcast_to(pairs, (m,) + pairs.shape)
        )

    b_of_z = z_representation(dist)
    if adaptive:
        z_mode, curvature = _z_posterior_modes(block, eta0, dist, params, model)
        root = np.sqrt(curvature)
        z_nodes = z_mode[:, None] + rule.nodes[None, :] / root[:, None]
        log_w = (
            np.log(rule.weights)[None, :]
            + 0.5 * (rule.nodes[None, :] ** 2 - z_nodes**2)
            - np.log(root)[:, None]
        )
        b = np.asarray(b_of_z(z_nodes))
        eta = eta0[:, None, :] + b[:, :, None]
    else:
        b = np.broadcast_to(np.asarray(b_of_z(rule.nodes)), (m, rule.nodes.size))
        log_w = np.broadcast_to(np.log(rule.weights), b.shape)
        eta = eta0[:, None, :] + b[0][None, :, None]
    ll = _outcome_ll(block, eta, params, model)
    return _weighted_posterior_mean(ll, log_w, b)


# --------------------------------------------------------------------- #
# Public interface
# --------------------------------------------------------------------- #


def _check_converged(fit_result: FitResult, allow_unconverged: bool) -> None:
    if not fit_result.converged and not allow_unconverged:
        raise ValueError(
            "fit did not converge; pass allow_unconverged=True to predict anyway"
        )


def predict_dataset(
    dataset: Dataset,
    fit_result: FitResult,
    method: str = "mode",
    rule: QuadratureRule | None = None,
    adaptive: bool | None = None,
    allow_unconverged: bool = False,
) -> PredictionSet:
    """Predict every cluster's random effect; rows are ordered by cluster id."""
    if method not in ("mode", "mean"):
        raise ValueError(f"method must be 'mode' or 'mean', got {method!r}")
    _check_converged(fit_result, allow_unconverged)
    model = fit_result.model
    params = fit_result.estimates
    dist = standardized_at(model, params)
    rule = rule or default_rule(model)
    blocks = _make_blocks(dataset, model)

    width = 2 if model.is_bivariate else 1
    values = np.empty((len(dataset), width))
    for block in blocks:
        if method == "mode":
            out = _block_modes(block, params, model, dist)
        else:
            use_adaptive = _resolve_adaptive(model, block.n, adaptive)
            out = _block_means(block, params, model, dist, rule, use_adaptive)
        block.scatter(np.asarray(out).reshape(block.y.shape[0], width), values)

    ids = [c.cluster_id for c in dataset.clusters]
    try:
        order = sorted(range(len(ids)), key=lambda i: ids[i])
    except TypeError:
        order = list(range(len(ids)))
    values = values[order]
    truths = None
    if all(c.true_ranef is not None for c in dataset.clusters):
        truths = np.array(
            [np.atleast_1d(dataset.clusters[i].true_ranef) for i in order]
        )
    if width == 1:
        values = values[:, 0]
        if truths is not None:
            truths = truths[:, 0]
    return PredictionSet(
        cluster_ids=tuple(ids[i] for i in order),
        values=values,
        method=method,
        fit=fit_result,
        true_values=truths,
    )


def posterior_mode(
    cluster: Cluster,
    fit_result: FitResult,
    model: ModelSpec | None = None,
    allow_unconverged: bool = False,
):
    """Mode of the posterior of one cluster's random effect.

    Empty clusters fall back to the prior mode (0 for the normal family,
    the left support edge for the centered exponential).
    """
    _check_converged(fit_result, allow_unconverged)
    model = model or fit_result.model
    params = fit_result.estimates
    dist = standardized_at(model, params)
    block = _single_block(cluster, model)
    out = np.asarray(_block_modes(block, params, model, dist))
    return out.reshape(-1)[0] if out.size == 1 else out.reshape(2)


def posterior_mean(
    cluster: Cluster,
    fit_result: FitResult,
    model: ModelSpec | None = None,
    rule: QuadratureRule | None = None,
    adaptive: bool | None = None,
    allow_unconverged: bool = False,
):
    """Quadrature posterior mean of one cluster's random effect."""
    _check_converged(fit_result, allow_unconverged)
    model = model or fit_result.model
    params = fit_result.estimates
    dist = standardized_at(model, params)
    rule = rule or default_rule(model)
    block = _single_block(cluster, model)
    use_adaptive = _resolve_adaptive(model, cluster.n, adaptive)
    out = np.asarray(_block_means(block, params, model, dist, rule, use_adaptive))
    return out.reshape(-1)[0] if out.size == 1 else out.reshape(2)


def msep(predictions: PredictionSet, truths: np.ndarray | None = None):
    """Mean squared error of prediction against the true random effects.

    Slope models report one value per component (intercept, slope);
    scalar structures return a float.
    """
    if truths is None:
        truths = predictions.true_values
    if truths is None:
        raise MissingTruthError(
            "no true random effects available; provide truths explicitly"
        )
    truths = np.asarray(truths, dtype=float)
    if truths.shape != predictions.values.shape:
        raise MissingTruthError(
            f"truth shape {truths.shape} does not match predictions "
            f"{predictions.values.shape}"
        )
    err = (predictions.values - truths) ** 2
    if err.ndim == 2:
        return err.mean(axis=0)
    return float(err.mean())


def prediction_histogram(values: np.ndarray, bins: int = 20):
    """Counts over equal-width bins spanning the prediction range."""
    values = np.asarray(values, dtype=float)
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(values, bins=edges)
    return edges, counts
