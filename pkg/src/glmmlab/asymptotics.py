"""Numerical asymptotic limits of (possibly misspecified) maximum likelihood.

For a small binary-outcome design the expected log-likelihood of an
assumed model under the true model is a finite sum: the 2^n outcome
patterns of each cluster archetype are enumerated exactly, so the limit
computation has no Monte Carlo noise.  The maximizer of that expectation
is the value the misspecified MLE converges to as the number of clusters
grows, equivalently the minimizer of the Kullback-Leibler divergence from
the truth to the assumed family.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import optimize
from .glmm import (
    BERNOULLI_LOGIT,
    Cluster,
    Dataset,
    ModelSpec,
    ParamVector,
    _covariance_free,
    _make_blocks,
    _raw_from_h,
    cluster_logliks,
    pack_params,
    parameter_names,
    unpack_params,
)
from .quadrature import QuadratureRule, gauss_hermite, tensor_grid
from .ranef import DiscreteK, TukeyGH

__all__ = [
    "Archetype",
    "LimitProblem",
    "KLLimitResult",
    "expected_loglik",
    "kl_limit",
    "pattern_log_probs",
]


@dataclass(frozen=True)
class Archetype:
    """One cluster design (covariate rows) and its population share."""

    x: np.ndarray
    probability: float

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 2:
            raise ValueError("archetype design must be an (n, p) array")
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class LimitProblem:
    """True and assumed model pair over a finite mixture of archetypes."""

    archetypes: tuple[Archetype, ...]
    true_model: ModelSpec
    true_params: ParamVector
    assumed_model: ModelSpec

    def __post_init__(self):
        if not self.archetypes:
            raise ValueError("need at least one archetype")
        total = sum(a.probability for a in self.archetypes)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"archetype probabilities sum to {total}, expected 1")
        for a in self.archetypes:
            if a.n > 12:
                raise ValueError("pattern enumeration is limited to n <= 12")
        for model in (self.true_model, self.assumed_model):
            if model.outcome_family != BERNOULLI_LOGIT:
                raise ValueError("limit computation covers binary outcomes only")
        if self.true_model.covariate_names != self.assumed_model.covariate_names:
            raise ValueError("true and assumed models must share covariates")


def _pattern_dataset(archetype: Archetype, names: tuple[str, ...]) -> Dataset:
    patterns = np.array(list(itertools.product((0.0, 1.0), repeat=archetype.n)))
    clusters = tuple(
        Cluster(i, patterns[i], archetype.x) for i in range(len(patterns))
    )
    return Dataset(clusters, names)


def _default_rule(model: ModelSpec, quad_points: int | None) -> QuadratureRule:
    if model.is_bivariate:
        return tensor_grid(quad_points or 15)
    return gauss_hermite(quad_points or 40)


def pattern_log_probs(
    model: ModelSpec,
    params: ParamVector,
    archetype: Archetype,
    rule: QuadratureRule | None = None,
) -> np.ndarray:
    """log P(pattern | archetype) for every binary outcome pattern."""
    dataset = _pattern_dataset(archetype, model.covariate_names)
    rule = rule or _default_rule(model, None)
    return cluster_logliks(dataset, params, model, rule, adaptive=False)


class _LimitCalculator:
    """Precomputes pattern tables so optimizer iterations stay cheap."""

    def __init__(self, problem: LimitProblem, rule: QuadratureRule | None = None):
        self.problem = problem
        self.rule = rule or _default_rule(problem.assumed_model, None)
        true_rule = (
            self.rule
            if not problem.true_model.is_bivariate or problem.assumed_model.is_bivariate
            else _default_rule(problem.true_model, None)
        )
        self.datasets = [
            _pattern_dataset(a, problem.assumed_model.covariate_names)
            for a in problem.archetypes
        ]
        self.blocks = [
            _make_blocks(ds, problem.assumed_model) for ds in self.datasets
        ]
        self.true_probs = []
        for a, ds in zip(problem.archetypes, self.datasets):
            logp = cluster_logliks(
                ds, problem.true_params, problem.true_model, true_rule, adaptive=False
            )
            self.true_probs.append(np.exp(logp))

    def true_prob_sums(self) -> list[float]:
        return [float(p.sum()) for p in self.true_probs]

    def expected(self, params: ParamVector) -> float:
        total = 0.0
        for archetype, ds, blocks, probs in zip(
            self.problem.archetypes, self.datasets, self.blocks, self.true_probs
        ):
            logp = cluster_logliks(
                ds, params, self.problem.assumed_model, self.rule,
                adaptive=False, blocks=blocks,
            )
            total += archetype.probability * float(probs @ logp)
        return total


def expected_loglik(
    params_assumed: ParamVector,
    problem: LimitProblem,
    rule: QuadratureRule | None = None,
) -> float:
    """E_true[log P_assumed(Y)] per cluster, mixing over archetypes."""
    return _LimitCalculator(problem, rule).expected(params_assumed)


@dataclass
class KLLimitResult:
    theta_star: ParamVector
    expected_loglik: float
    optimize: optimize.OptimizeResult
    parameter_names: tuple[str, ...]

    @property
    def converged(self) -> bool:
        return self.optimize.converged


def _assumed_start(problem: LimitProblem) -> ParamVector:
    true_p = problem.true_params
    model = problem.assumed_model
    log_sigma_b = None
    if not model.is_bivariate:
        log_sigma_b = true_p.log_sigma_b if true_p.log_sigma_b is not None else 0.0
    shape = np.empty(0)
    if model.ranef_free and isinstance(model.ranef_family, TukeyGH):
        shape = np.array([0.1, _raw_from_h(0.05)])
    elif model.ranef_free and isinstance(model.ranef_family, DiscreteK):
        k = len(model.ranef_family.locations)
        shape = np.concatenate([np.linspace(-1.0, 1.0, k)[: k - 1], np.zeros(k - 1)])
    covariance = np.zeros(3) if _covariance_free(model) else None
    return ParamVector(true_p.beta.copy(), log_sigma_b, shape, covariance, None)


def kl_limit(
    problem: LimitProblem,
    rule: QuadratureRule | None = None,
    options: optimize.OptimizeOptions | None = None,
    start: ParamVector | None = None,
) -> KLLimitResult:
    """Maximize the expected assumed-model log-likelihood over its free
    parameters: the asymptotic target of the (mis)specified MLE.

    Tolerances default tighter than data fits because the objective is a
    deterministic integral with no sampling noise to hide behind.
    """
    calc = _LimitCalculator(problem, rule)
    model = problem.assumed_model
    options = options or optimize.OptimizeOptions(
        max_iters=300, f_tol=1e-12, g_tol=1e-7, fd_step_scale=1e-6
    )
    x0 = pack_params(start or _assumed_start(problem), model)

    def objective(flat: np.ndarray) -> float:
        with np.errstate(over="ignore", under="ignore", invalid="ignore"):
            try:
                value = calc.expected(unpack_params(flat, model))
            except (FloatingPointError, ValueError):
                return np.inf
        return -value if np.isfinite(value) else np.inf

    warm = optimize.nelder_mead(
        objective, x0, optimize.OptimizeOptions(max_evals=150, f_tol=1e-13)
    )
    refined = optimize.bfgs_fd(objective, warm.x, options)
    return KLLimitResult(
        theta_star=unpack_params(refined.x, model),
        expected_loglik=-refined.f,
        optimize=refined,
        parameter_names=parameter_names(model),
    )
