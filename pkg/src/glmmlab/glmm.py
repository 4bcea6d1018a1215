"""Model specification, marginal log-likelihood and maximum-likelihood fitting.

Outcome families are Bernoulli-logit and Gaussian-identity; the random
structure is a cluster intercept or an intercept plus a random slope on one
covariate.  The marginal likelihood integrates the conditional likelihood
over the random effects with Gauss-Hermite rules, working in z-space for
continuous families so no closed-form mixing density is ever needed.

Likelihood evaluation is vectorized across clusters of equal size; clusters
are grouped into size blocks once per dataset and reused for every
objective evaluation during optimization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from . import optimize
from .quadrature import QuadratureRule, gauss_hermite, tensor_grid
from .ranef import (
    BIVARIATE,
    BivariateNormal,
    BivariateNormalMixture,
    DiscreteK,
    Normal,
    RanefFamily,
    StandardizedRanef,
    TukeyGH,
    UnsupportedFamilyError,
    discrete_support,
    standardize,
    z_representation,
    _z_map_derivs,
)

__all__ = [
    "DataError",
    "BERNOULLI_LOGIT",
    "GAUSSIAN_IDENTITY",
    "ModelSpec",
    "Cluster",
    "Dataset",
    "ParamVector",
    "FitOptions",
    "FitResult",
    "parameter_names",
    "pack_params",
    "unpack_params",
    "family_at",
    "standardized_at",
    "derived_parameters",
    "cluster_loglik_given_b",
    "marginal_cluster_loglik",
    "cluster_logliks",
    "total_loglik",
    "auto_start",
    "fit",
]

BERNOULLI_LOGIT = "bernoulli_logit"
GAUSSIAN_IDENTITY = "gaussian_identity"

_LOG_2PI = math.log(2.0 * math.pi)

# Bounds for the h shape parameter during free Tukey fits.  Standardization
# needs second moments (h < 1/2); the lower bound keeps the optimizer off
# the extreme bounded-range ridge.  The optimizer sees the unconstrained
# coordinate u with h = center + half * tanh(u).
_H_LO, _H_HI = -0.95, 0.5
_H_CENTER = 0.5 * (_H_LO + _H_HI)
_H_HALF = 0.5 * (_H_HI - _H_LO)

# Cluster sizes at or above this default to adaptive recentering: integrand
# sharpness grows with cluster size, while per-cluster mode searches would
# dominate runtime for small clusters.
ADAPTIVE_SIZE_THRESHOLD = 10


class DataError(ValueError):
    """Structural problem with a dataset/model combination."""


def _h_from_raw(raw: float) -> float:
    # tanh saturates to +/-1 in floating point; keep h strictly inside the
    # open interval so order-2 moments always exist during fitting.
    t = min(max(math.tanh(raw), -1.0 + 1e-12), 1.0 - 1e-12)
    return _H_CENTER + _H_HALF * t


def _raw_from_h(h: float) -> float:
    if not _H_LO < h < _H_HI:
        raise ValueError(f"free-fit h start must lie in ({_H_LO}, {_H_HI}), got {h}")
    return math.atanh((h - _H_CENTER) / _H_HALF)


# --------------------------------------------------------------------- #
# Model, data and parameter containers
# --------------------------------------------------------------------- #


@dataclass(frozen=True)
class ModelSpec:
    """Outcome family, covariate names, random structure and mixing family.

    ``slope_index`` selects the covariate column carrying the random slope;
    None means a random intercept only.  ``ranef_free`` names the family
    shape/covariance parameters estimated at fit time (empty for fully
    fixed families).
    """

    outcome_family: str
    covariate_names: tuple[str, ...]
    ranef_family: RanefFamily
    ranef_free: tuple[str, ...] = ()
    slope_index: int | None = None

    def __post_init__(self):
        if self.outcome_family not in (BERNOULLI_LOGIT, GAUSSIAN_IDENTITY):
            raise ValueError(f"unknown outcome family {self.outcome_family!r}")
        p = len(self.covariate_names)
        if self.slope_index is not None and not 0 <= self.slope_index < p:
            raise ValueError(
                f"slope_index {self.slope_index} out of range for {p} covariates"
            )
        bivariate = isinstance(self.ranef_family, BIVARIATE)
        if bivariate and self.slope_index is None:
            raise ValueError("bivariate random-effects families need a slope_index")
        if not bivariate and self.slope_index is not None:
            raise ValueError("random slopes need a bivariate random-effects family")

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_names)

    @property
    def is_bivariate(self) -> bool:
        return isinstance(self.ranef_family, BIVARIATE)


@dataclass(frozen=True)
class Cluster:
    """Observations for one cluster: outcomes y_t and covariate rows x_t."""

    cluster_id: object
    y: np.ndarray
    x: np.ndarray
    true_ranef: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if y.ndim != 1 or x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise DataError(
                f"cluster {self.cluster_id!r}: need y (n,) and x (n, p) with equal n"
            )
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True)
class Dataset:
    """Clusters plus covariate naming; optionally carries true random effects."""

    clusters: tuple[Cluster, ...]
    covariate_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(self.clusters))
        p = len(self.covariate_names)
        for cluster in self.clusters:
            if cluster.n < 1:
                raise DataError(f"cluster {cluster.cluster_id!r} has no observations")
            if cluster.x.shape[1] != p:
                raise DataError(
                    f"cluster {cluster.cluster_id!r} has {cluster.x.shape[1]} "
                    f"covariate columns, expected {p}"
                )

    def __len__(self) -> int:
        return len(self.clusters)

    @property
    def n_obs(self) -> int:
        return sum(c.n for c in self.clusters)


@dataclass
class ParamVector:
    """Unconstrained model parameters.

    ``beta`` holds the intercept first.  ``shape`` holds the free family
    shape coordinates in layout order (empty when the family is fixed);
    ``covariance`` holds (log sd intercept, log sd slope, atanh corr) when
    a bivariate family is being fitted.  Every stored coordinate ranges
    over all reals.
    """

    beta: np.ndarray
    log_sigma_b: float | None = None
    shape: np.ndarray = field(default_factory=lambda: np.empty(0))
    covariance: np.ndarray | None = None
    log_sigma_eps: float | None = None

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.shape = np.asarray(self.shape, dtype=float)
        if self.covariance is not None:
            self.covariance = np.asarray(self.covariance, dtype=float)

    @property
    def sigma_b(self) -> float:
        if self.log_sigma_b is None:
            raise ValueError("model has no scalar random-effect scale")
        return math.exp(self.log_sigma_b)


@dataclass
class FitResult:
    """Estimates, model-based standard errors and optimizer diagnostics."""

    estimates: ParamVector
    std_errors: np.ndarray
    loglik: float
    converged: bool
    n_iterations: int
    gradient_norm: float
    parameter_names: tuple[str, ...]
    model: ModelSpec
    message: str = ""


@dataclass
class FitOptions:
    """Knobs for :func:`fit`; defaults follow the package-wide conventions.

    quad_points None resolves to 25 for scalar models and 15 per axis for
    bivariate ones; quad_adaptive None turns recentering on for cluster
    sizes >= ADAPTIVE_SIZE_THRESHOLD only.
    """

    quad_points: int | None = None
    quad_adaptive: bool | None = None
    start: ParamVector | None = None
    nm_warmup_evals: int = 200
    max_iters: int = 500
    f_tol: float = 1e-9
    g_tol: float = 1e-4
    fd_step_scale: float = 1e-5
    hessian_step_scale: float = 1e-4


# --------------------------------------------------------------------- #
# Parameter layout
# --------------------------------------------------------------------- #


def _shape_names(model: ModelSpec) -> tuple[str, ...]:
    fam = model.ranef_family
    if not model.ranef_free:
        return ()
    if isinstance(fam, TukeyGH):
        return ("tukey_g", "tukey_h_raw")
    if isinstance(fam, DiscreteK):
        k = len(fam.locations)
        locs = tuple(f"discrete_loc{i + 1}" for i in range(k - 1))
        logits = tuple(f"discrete_logitw{i + 1}" for i in range(k - 1))
        return locs + logits
    if isinstance(fam, BivariateNormal):
        return ()  # covariance coordinates live in their own slot
    raise UnsupportedFamilyError(
        f"{type(fam).__name__} has no free parameters to fit"
    )


def _covariance_free(model: ModelSpec) -> bool:
    return isinstance(model.ranef_family, BivariateNormal) and bool(model.ranef_free)


def parameter_names(model: ModelSpec) -> tuple[str, ...]:
    """Packed coordinate names, in pack/unpack order."""
    names = ["beta0"] + [f"beta_{c}" for c in model.covariate_names]
    if not model.is_bivariate:
        names.append("log_sigma_b")
    names.extend(_shape_names(model))
    if _covariance_free(model):
        names.extend(["log_sd_intercept", "log_sd_slope", "atanh_corr"])
    if model.outcome_family == GAUSSIAN_IDENTITY:
        names.append("log_sigma_eps")
    return tuple(names)


def pack_params(params: ParamVector, model: ModelSpec) -> np.ndarray:
    parts = [params.beta]
    if not model.is_bivariate:
        parts.append([params.log_sigma_b])
    if len(_shape_names(model)):
        parts.append(params.shape)
    if _covariance_free(model):
        parts.append(params.covariance)
    if model.outcome_family == GAUSSIAN_IDENTITY:
        parts.append([params.log_sigma_eps])
    return np.concatenate([np.atleast_1d(np.asarray(p, dtype=float)) for p in parts])


def unpack_params(flat: np.ndarray, model: ModelSpec) -> ParamVector:
    flat = np.asarray(flat, dtype=float)
    pos = model.n_covariates + 1
    beta = flat[:pos]
    log_sigma_b = None
    if not model.is_bivariate:
        log_sigma_b = float(flat[pos])
        pos += 1
    n_shape = len(_shape_names(model))
    shape = flat[pos : pos + n_shape]
    pos += n_shape
    covariance = None
    if _covariance_free(model):
        covariance = flat[pos : pos + 3]
        pos += 3
    log_sigma_eps = None
    if model.outcome_family == GAUSSIAN_IDENTITY:
        log_sigma_eps = float(flat[pos])
        pos += 1
    if pos != flat.size:
        raise ValueError(f"parameter vector has {flat.size} coordinates, expected {pos}")
    return ParamVector(beta, log_sigma_b, shape, covariance, log_sigma_eps)


def family_at(model: ModelSpec, params: ParamVector) -> RanefFamily:
    """Realize the mixing family with any free coordinates substituted."""
    fam = model.ranef_family
    if not model.ranef_free:
        return fam
    if isinstance(fam, TukeyGH):
        return TukeyGH(g=float(params.shape[0]), h=_h_from_raw(float(params.shape[1])))
    if isinstance(fam, DiscreteK):
        k = len(fam.locations)
        free_locs = np.asarray(params.shape[: k - 1], dtype=float)
        logits = tuple(float(v) for v in params.shape[k - 1 :])
        probe = DiscreteK(tuple(free_locs) + (0.0,), logits)
        w = probe.weights
        # Mean-zero constraint: the last support point is solved from the
        # others so E[b] = 0 holds identically, keeping locations identified.
        last = -float(w[: k - 1] @ free_locs) / float(w[k - 1])
        return DiscreteK(tuple(free_locs) + (last,), logits)
    if isinstance(fam, BivariateNormal):
        c = params.covariance
        return BivariateNormal(float(c[0]), float(c[1]), float(c[2]))
    raise UnsupportedFamilyError(f"{type(fam).__name__} has no free parameters")


def standardized_at(model: ModelSpec, params: ParamVector) -> StandardizedRanef:
    fam = family_at(model, params)
    if isinstance(fam, BIVARIATE):
        return standardize(fam, 1.0)
    return standardize(fam, params.sigma_b)


def derived_parameters(result: FitResult) -> list[tuple[str, float]]:
    """Readable transforms of unconstrained coordinates (no standard errors)."""
    model = result.model
    params = result.estimates
    out: list[tuple[str, float]] = []
    if not model.is_bivariate:
        out.append(("sigma_b", params.sigma_b))
    fam = family_at(model, params)
    if model.ranef_free and isinstance(fam, TukeyGH):
        out.append(("tukey_h", fam.h))
    if model.ranef_free and isinstance(fam, DiscreteK):
        for i, loc in enumerate(fam.locations):
            out.append((f"discrete_location{i + 1}", float(loc)))
        for i, w in enumerate(fam.weights):
            out.append((f"discrete_weight{i + 1}", float(w)))
    if isinstance(fam, BivariateNormal) and model.ranef_free:
        cov = fam.covariance
        out.append(("var_intercept", float(cov[0, 0])))
        out.append(("var_slope", float(cov[1, 1])))
        out.append(("corr", float(cov[0, 1] / math.sqrt(cov[0, 0] * cov[1, 1]))))
    if model.outcome_family == GAUSSIAN_IDENTITY:
        out.append(("sigma_eps", math.exp(params.log_sigma_eps)))
    return out


# --------------------------------------------------------------------- #
# Size-blocked dataset matrices
# --------------------------------------------------------------------- #


@dataclass
class _SizeBlock:
    """Unique (y, x) rows of the clusters sharing one size.

    Clusters with byte-identical data have identical likelihood
    contributions and predictions, so only the unique rows are evaluated;
    ``idx`` scatters each unique row's value back to every original
    cluster position.  Balanced designs with tiny clusters collapse by an
    order of magnitude.
    """

    idx: np.ndarray  # (total_members,) positions in dataset order
    counts: np.ndarray  # (m_unique,) members represented by each row
    y: np.ndarray  # (m_unique, n)
    xaug: np.ndarray  # (m_unique, n, p + 1) with leading ones column
    x2d: np.ndarray  # (m_unique * n, p + 1) view for fast eta
    slope: np.ndarray | None  # (m_unique, n) slope covariate values
    n: int

    def scatter(self, values: np.ndarray, out: np.ndarray) -> None:
        out[self.idx] = np.repeat(values, self.counts, axis=0)


def _make_blocks(dataset: Dataset, model: ModelSpec) -> list[_SizeBlock]:
    by_size: dict[int, list[int]] = {}
    for i, cluster in enumerate(dataset.clusters):
        by_size.setdefault(cluster.n, []).append(i)
    blocks = []
    for n, idx in sorted(by_size.items()):
        unique: dict[bytes, int] = {}
        members: list[list[int]] = []
        rows = []
        for i in idx:
            cluster = dataset.clusters[i]
            key = cluster.y.tobytes() + cluster.x.tobytes()
            slot = unique.get(key)
            if slot is None:
                unique[key] = len(rows)
                rows.append(cluster)
                members.append([i])
            else:
                members[slot].append(i)
        y = np.stack([c.y for c in rows])
        x = np.stack([c.x for c in rows])
        ones = np.ones((len(rows), n, 1))
        xaug = np.concatenate([ones, x], axis=2)
        slope = None
        if model.slope_index is not None:
            slope = x[:, :, model.slope_index].copy()
        blocks.append(
            _SizeBlock(
                idx=np.concatenate([np.asarray(g) for g in members]),
                counts=np.asarray([len(g) for g in members]),
                y=y,
                xaug=xaug,
                x2d=np.ascontiguousarray(xaug.reshape(-1, xaug.shape[2])),
                slope=slope,
                n=n,
            )
        )
    return blocks


def _single_block(cluster: Cluster, model: ModelSpec) -> _SizeBlock:
    """Block for one cluster, allowing the degenerate n = 0 case that a
    Dataset would reject (prediction falls back to the prior there)."""
    xaug = np.concatenate([np.ones((1, cluster.n, 1)), cluster.x[None]], axis=2)
    slope = None
    if model.slope_index is not None:
        slope = cluster.x[None, :, model.slope_index].copy()
    return _SizeBlock(
        idx=np.zeros(1, dtype=int),
        counts=np.ones(1, dtype=int),
        y=cluster.y[None],
        xaug=xaug,
        x2d=np.ascontiguousarray(xaug.reshape(-1, xaug.shape[2])),
        slope=slope,
        n=cluster.n,
    )


def _eta0(block: _SizeBlock, beta: np.ndarray) -> np.ndarray:
    return (block.x2d @ beta).reshape(block.y.shape)


def _outcome_ll(block: _SizeBlock, eta: np.ndarray, params: ParamVector,
                model: ModelSpec) -> np.ndarray:
    """Conditional log-likelihood summed within clusters; eta is (m, Q, n)."""
    y = block.y
    if model.outcome_family == BERNOULLI_LOGIT:
        return np.einsum("mn,mqn->mq", y, eta) - np.logaddexp(0.0, eta).sum(axis=2)
    sigma_eps = math.exp(params.log_sigma_eps)
    resid = y[:, None, :] - eta
    ss = np.einsum("mqn,mqn->mq", resid, resid)
    return -0.5 * block.n * (_LOG_2PI + 2.0 * math.log(sigma_eps)) - ss / (
        2.0 * sigma_eps**2
    )


def _ll_derivs(block: _SizeBlock, eta: np.ndarray, params: ParamVector,
               model: ModelSpec) -> tuple[np.ndarray, np.ndarray]:
    """(d/db, d2/db2) of the conditional log-likelihood; eta is (m, n)."""
    if model.outcome_family == BERNOULLI_LOGIT:
        p = expit(eta)
        return (block.y - p).sum(axis=1), -(p * (1.0 - p)).sum(axis=1)
    sigma_eps = math.exp(params.log_sigma_eps)
    d1 = (block.y - eta).sum(axis=1) / sigma_eps**2
    d2 = np.full(eta.shape[0], -block.n / sigma_eps**2)
    return d1, d2


def _z_posterior_modes(
    block: _SizeBlock,
    eta0: np.ndarray,
    dist: StandardizedRanef,
    params: ParamVector,
    model: ModelSpec,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-cluster mode and curvature of l(b(z)) + log phi(z) in z-space.

    Coarse grid argmax followed by damped, vectorized Newton; curvature is
    the negated second derivative at the mode, floored away from zero.
    """
    b_of_z = z_representation(dist)

    def psi_at(z):
        eta = eta0 + np.asarray(b_of_z(z))[:, None]
        return _outcome_ll(block, eta[:, None, :], params, model)[:, 0] - 0.5 * z * z

    if isinstance(dist.family, Normal):
        # b(z) is linear, so the z-posterior is strictly concave: Newton
        # from the prior mode needs no grid safeguard.
        z = np.zeros(block.y.shape[0])
    else:
        z_grid = np.linspace(-6.0, 6.0, 13)
        eta = eta0[:, None, :] + np.asarray(b_of_z(z_grid))[None, :, None]
        psi = _outcome_ll(block, eta, params, model) - 0.5 * z_grid[None, :] ** 2
        z = z_grid[np.argmax(psi, axis=1)].astype(float)

    # Recentering is exact for any (mode, curvature), so a loose tolerance
    # here costs nothing in likelihood accuracy, only node placement.
    value = psi_at(z)
    for _ in range(40):
        b, db, d2b = _z_map_derivs(dist, z)
        lp, lpp = _ll_derivs(block, eta0 + b[:, None], params, model)
        psi1 = lp * db - z
        psi2 = lpp * db * db + lp * d2b - 1.0
        step = np.where(psi2 < -1e-9, -psi1 / np.where(psi2 < -1e-9, psi2, -1.0),
                        np.sign(psi1) * 0.25)
        step = np.clip(step, -2.0, 2.0)
        scale = np.ones_like(z)
        for _ in range(25):
            candidate = np.clip(z + scale * step, -8.0, 8.0)
            cand_value = psi_at(candidate)
            worse = cand_value < value - 1e-13
            if not worse.any():
                break
            scale = np.where(worse, 0.5 * scale, scale)
        z_new = np.clip(z + scale * step, -8.0, 8.0)
        moved = np.max(np.abs(z_new - z))
        z = z_new
        value = psi_at(z)
        if moved < 1e-8:
            break
    b, db, d2b = _z_map_derivs(dist, z)
    lp, lpp = _ll_derivs(block, eta0 + b[:, None], params, model)
    curvature = np.maximum(-(lpp * db * db + lp * d2b - 1.0), 1e-6)
    return z, curvature


def _bivariate_posterior_modes(
    block: _SizeBlock,
    eta0: np.ndarray,
    fam: BivariateNormal,
    params: ParamVector,
    model: ModelSpec,
) -> tuple[np.ndarray, np.ndarray]:
    """Joint posterior modes and curvature matrices, one 2-D Newton per cluster.

    The log-posterior is strictly concave (Bernoulli/Gaussian conditional
    plus Gaussian prior), so damped Newton is safe.  Returns the modes
    (m, 2) and the negated Hessians (m, 2, 2), positive definite.
    """
    cov = fam.covariance
    prec = np.linalg.inv(cov)
    m = block.y.shape[0]
    slope = block.slope
    sigma_eps = (
        math.exp(params.log_sigma_eps)
        if model.outcome_family == GAUSSIAN_IDENTITY
        else None
    )

    def log_post(b):
        eta = eta0 + b[:, :1] + b[:, 1:] * slope
        if sigma_eps is None:
            ll = (block.y * eta - np.logaddexp(0.0, eta)).sum(axis=1)
        else:
            ll = -((block.y - eta) ** 2).sum(axis=1) / (2.0 * sigma_eps**2)
        return ll - 0.5 * np.einsum("mi,ij,mj->m", b, prec, b)

    b = np.zeros((m, 2))
    value = log_post(b)
    for _ in range(60):
        eta = eta0 + b[:, :1] + b[:, 1:] * slope
        if sigma_eps is None:
            p = expit(eta)
            r = block.y - p
            w = p * (1.0 - p)
        else:
            r = (block.y - eta) / sigma_eps**2
            w = np.full_like(eta, 1.0 / sigma_eps**2)
        g0 = r.sum(axis=1) - (b @ prec)[:, 0]
        gw = (r * slope).sum(axis=1) - (b @ prec)[:, 1]
        h00 = w.sum(axis=1) + prec[0, 0]
        h0w = (w * slope).sum(axis=1) + prec[0, 1]
        hww = (w * slope * slope).sum(axis=1) + prec[1, 1]
        det = h00 * hww - h0w * h0w
        step = np.column_stack(
            [(hww * g0 - h0w * gw) / det, (-h0w * g0 + h00 * gw) / det]
        )
        # Monotone damping: Newton directions on this strictly concave
        # surface are ascent directions, so halving always finds an
        # acceptable scale; saturated-likelihood clusters need it.
        scale = np.ones(m)
        for _ in range(30):
            candidate = b + scale[:, None] * step
            cand_value = log_post(candidate)
            worse = cand_value < value - 1e-13
            if not worse.any():
                break
            scale = np.where(worse, 0.5 * scale, scale)
        b = b + scale[:, None] * step
        value = log_post(b)
        if np.max(np.abs(scale[:, None] * step)) < 1e-9:
            break
    eta = eta0 + b[:, :1] + b[:, 1:] * slope
    if sigma_eps is None:
        p = expit(eta)
        w = p * (1.0 - p)
    else:
        w = np.full_like(eta, 1.0 / sigma_eps**2)
    curv = np.empty((m, 2, 2))
    curv[:, 0, 0] = w.sum(axis=1) + prec[0, 0]
    curv[:, 0, 1] = curv[:, 1, 0] = (w * slope).sum(axis=1) + prec[0, 1]
    curv[:, 1, 1] = (w * slope * slope).sum(axis=1) + prec[1, 1]
    return b, curv


def _bivariate_nested_quadrature(
    block: _SizeBlock,
    eta0: np.ndarray,
    fam: BivariateNormal,
    params: ParamVector,
    model: ModelSpec,
    rule1d: QuadratureRule,
):
    """Nested quadrature for the intercept/slope integral.

    A joint GH-Laplace rule misjudges saturated-outcome clusters: their
    slope-direction integrands carry logistic saturation shoulders of
    width about 4/max|t|, far narrower than the posterior spread when the
    slope variance is large, and Hermite nodes cannot resolve interior
    features that small.  So the slope dimension uses a dense trapezoid
    grid whose spacing tracks that feature width, while the intercept
    dimension (conditionally log-concave, features no narrower than its
    posterior) uses a recentered Hermite rule around interpolated
    conditional modes.  Both substitutions are exact changes of measure.

    Returns (marginal (m,), bw nodes (m, T), b0 nodes (m, T, Q),
    combined log-terms (m, T, Q) whose logsumexp is the marginal).
    """
    cov = fam.covariance
    s_w = math.sqrt(cov[1, 1])
    kappa = cov[0, 1] / cov[1, 1]
    s_c = math.sqrt(max(cov[0, 0] - cov[0, 1] ** 2 / cov[1, 1], 1e-300))
    slope = block.slope
    y = block.y
    m = block.y.shape[0]
    z = rule1d.nodes
    log_w = np.log(rule1d.weights)
    sigma_eps = (
        math.exp(params.log_sigma_eps)
        if model.outcome_family == GAUSSIAN_IDENTITY
        else None
    )

    # Slope-direction posterior location/spread from the joint mode; the
    # spread is the Schur complement of the negated Hessian, never wider
    # than the prior.
    modes, curv = _bivariate_posterior_modes(block, eta0, fam, params, model)
    curv_w = np.maximum(curv[:, 1, 1] - curv[:, 0, 1] ** 2 / curv[:, 0, 0], 1e-10)
    spread_w = 1.0 / np.sqrt(curv_w)

    # One shared grid offset vector keeps the big arrays rectangular: each
    # cluster's range is centered on its own mode, wide enough to cover
    # both the local spread and the prior scale (posterior shoulders of
    # saturated clusters stretch toward the prior center), and sampled
    # finely enough to resolve the saturation shoulder width of ~4 logits.
    half_width = max(6.0 * float(spread_w.max()), 9.0 * s_w)
    t_max = float(np.max(np.abs(slope))) if slope.size else 1.0
    feature = 4.0 / max(t_max, 1e-9)
    n_outer = int(np.clip(math.ceil(2.0 * half_width / (0.5 * feature)) + 1, 81, 321))
    if n_outer % 2 == 0:
        n_outer += 1
    offsets = np.linspace(-half_width, half_width, n_outer)
    step = offsets[1] - offsets[0]
    bw = modes[:, 1][:, None] + offsets[None, :]  # (m, T)
    simpson = np.ones(n_outer)
    simpson[1:-1:2] = 4.0
    simpson[2:-1:2] = 2.0
    log_trap = np.log(simpson * step / 3.0)

    eta_w = eta0[:, None, :] + bw[:, :, None] * slope[:, None, :]  # (m, T, n)
    prior_mean = kappa * bw

    def score_curv(b0, eta_base, mean_base):
        eta = eta_base + b0[:, :, None]
        if sigma_eps is None:
            p = expit(eta)
            lp = y.sum(axis=1)[:, None] - p.sum(axis=2)
            lpp = (p * (1.0 - p)).sum(axis=2)
        else:
            lp = (y[:, None, :] - eta).sum(axis=2) / sigma_eps**2
            lpp = np.full(b0.shape, block.n / sigma_eps**2)
        return lp - (b0 - mean_base) / s_c**2, lpp + 1.0 / s_c**2

    def cond_post(b0, eta_base, mean_base):
        eta = eta_base + b0[:, :, None]
        if sigma_eps is None:
            ll = np.einsum("mn,mcn->mc", y, eta) - np.logaddexp(0.0, eta).sum(axis=2)
        else:
            resid = y[:, None, :] - eta
            ll = -np.einsum("mcn,mcn->mc", resid, resid) / (2.0 * sigma_eps**2)
        return ll - 0.5 * ((b0 - mean_base) / s_c) ** 2

    # Conditional modes are solved by damped Newton on a coarse subset of
    # the grid and interpolated: recentering is exact for any center and
    # width, so interpolation only affects node placement efficiency.
    coarse = np.unique(np.r_[0 : n_outer : 8, n_outer - 1])
    eta_coarse = eta_w[:, coarse, :]
    mean_coarse = prior_mean[:, coarse]
    b0c = np.broadcast_to(modes[:, 0][:, None], (m, coarse.size)).copy()
    value = cond_post(b0c, eta_coarse, mean_coarse)
    for _ in range(60):
        score, curv_c = score_curv(b0c, eta_coarse, mean_coarse)
        step_n = score / curv_c
        scale = np.ones_like(b0c)
        for _ in range(25):
            worse = cond_post(b0c + scale * step_n, eta_coarse, mean_coarse) < value - 1e-13
            if not worse.any():
                break
            scale = np.where(worse, 0.5 * scale, scale)
        b0c = b0c + scale * step_n
        value = cond_post(b0c, eta_coarse, mean_coarse)
        if np.max(np.abs(scale * step_n)) < 1e-8:
            break
    _, curv_coarse = score_curv(b0c, eta_coarse, mean_coarse)

    idx = np.arange(n_outer)
    center = np.empty((m, n_outer))
    curv_c = np.empty((m, n_outer))
    for i in range(m):  # m small; interp is not the hot path
        center[i] = np.interp(idx, coarse, b0c[i])
        curv_c[i] = np.interp(idx, coarse, curv_coarse[i])
    root_c = np.sqrt(curv_c)

    b0_nodes = center[:, :, None] + z[None, None, :] / root_c[:, :, None]
    eta_full = eta_w[:, :, None, :] + b0_nodes[:, :, :, None]  # (m, T, Q, n)
    if sigma_eps is None:
        ll = np.einsum("mn,mtkn->mtk", y, eta_full) - np.logaddexp(0.0, eta_full).sum(
            axis=3
        )
    else:
        resid = y[:, None, None, :] - eta_full
        ss = np.einsum("mtkn,mtkn->mtk", resid, resid)
        ll = -0.5 * block.n * (_LOG_2PI + 2.0 * math.log(sigma_eps)) - ss / (
            2.0 * sigma_eps**2
        )

    # Inner change of measure: conditional prior density replaces the
    # standard-normal weight (the half-log-2pi terms cancel).
    inner_adjust = (
        -0.5 * ((b0_nodes - prior_mean[:, :, None]) / s_c) ** 2
        - math.log(s_c)
        + 0.5 * z[None, None, :] ** 2
        - 0.5 * np.log(curv_c)[:, :, None]
    )
    outer_density = -0.5 * (bw / s_w) ** 2 - math.log(s_w) - 0.5 * _LOG_2PI
    combined = (
        ll
        + inner_adjust
        + (outer_density + log_trap[None, :])[:, :, None]
        + log_w[None, None, :]
    )
    marginal = logsumexp(combined.reshape(m, -1), axis=1)
    return marginal, bw, b0_nodes, combined


def _block_marginal_logliks(
    block: _SizeBlock,
    params: ParamVector,
    model: ModelSpec,
    rule: QuadratureRule,
    adaptive: bool,
) -> np.ndarray:
    fam = family_at(model, params)
    beta = params.beta
    eta0 = _eta0(block, beta)

    if isinstance(fam, BivariateNormal):
        if adaptive:
            # The conditional (intercept) integral is log-concave and fully
            # converged by nine recentered nodes; extra nodes only pad cost.
            rule1d = gauss_hermite(min(rule.order, 9))
            marginal, _, _, _ = _bivariate_nested_quadrature(
                block, eta0, fam, params, model, rule1d
            )
            return marginal
        pairs = rule.nodes @ fam.cholesky.T  # (Q^2, 2)
        eta = (
            eta0[:, None, :]
            + pairs[None, :, 0, None]
            + pairs[None, :, 1, None] * block.slope[:, None, :]
        )
        ll = _outcome_ll(block, eta, params, model)
        return logsumexp(ll + np.log(rule.weights)[None, :], axis=1)

    if isinstance(fam, BivariateNormalMixture):
        center = np.array([fam.center_intercept, fam.center_slope])
        spread = rule.nodes @ fam.component_cholesky.T
        parts = []
        for sign in (1.0, -1.0):
            pairs = sign * center[None, :] + spread
            eta = (
                eta0[:, None, :]
                + pairs[None, :, 0, None]
                + pairs[None, :, 1, None] * block.slope[:, None, :]
            )
            parts.append(_outcome_ll(block, eta, params, model))
        ll = np.concatenate(parts, axis=1)
        logw = np.log(0.5 * np.concatenate([rule.weights, rule.weights]))
        return logsumexp(ll + logw[None, :], axis=1)

    dist = standardize(fam, params.sigma_b)

    if isinstance(fam, DiscreteK):
        support, weights = discrete_support(dist)
        eta = eta0[:, None, :] + support[None, :, None]
        ll = _outcome_ll(block, eta, params, model)
        return logsumexp(ll + np.log(weights)[None, :], axis=1)

    b_of_z = z_representation(dist)
    if adaptive:
        z_mode, curvature = _z_posterior_modes(block, eta0, dist, params, model)
        root = np.sqrt(curvature)
        z_nodes = z_mode[:, None] + rule.nodes[None, :] / root[:, None]
        logw = (
            np.log(rule.weights)[None, :]
            + 0.5 * (rule.nodes[None, :] ** 2 - z_nodes**2)
            - np.log(root)[:, None]
        )
        b = np.asarray(b_of_z(z_nodes))
        eta = eta0[:, None, :] + b[:, :, None]
        ll = _outcome_ll(block, eta, params, model)
        return logsumexp(ll + logw, axis=1)

    b = np.asarray(b_of_z(rule.nodes))
    eta = eta0[:, None, :] + b[None, :, None]
    ll = _outcome_ll(block, eta, params, model)
    return logsumexp(ll + np.log(rule.weights)[None, :], axis=1)


# --------------------------------------------------------------------- #
# Public likelihood operations
# --------------------------------------------------------------------- #


def default_rule(model: ModelSpec, quad_points: int | None = None) -> QuadratureRule:
    """Default Gauss-Hermite rule: Q=25 scalar, Q=15 per axis bivariate."""
    if model.is_bivariate:
        return tensor_grid(quad_points or 15)
    return gauss_hermite(quad_points or 25)


def _resolve_adaptive(model: ModelSpec, n: int, adaptive: bool | None) -> bool:
    if isinstance(model.ranef_family, (DiscreteK, BivariateNormalMixture)):
        return False
    if adaptive is None:
        # Gaussian-outcome integrands are exp-quadratics in b, sharp at any
        # cluster size, and recentering integrates them exactly; the same
        # holds for the bivariate-normal tensor rule, whose prior scale can
        # dwarf the posterior scale.  Bernoulli random-intercept integrands
        # only sharpen once clusters get large.
        return (
            model.outcome_family == GAUSSIAN_IDENTITY
            or isinstance(model.ranef_family, BivariateNormal)
            or n >= ADAPTIVE_SIZE_THRESHOLD
        )
    return bool(adaptive)


def cluster_loglik_given_b(cluster: Cluster, params: ParamVector, b,
                           model: ModelSpec) -> float:
    """Conditional log-likelihood of one cluster given its random effect b.

    b is a scalar for intercept-only structures or an (intercept, slope)
    pair for random-slope models.  Bernoulli terms use the overflow-safe
    y * eta - log(1 + exp(eta)) form.
    """
    eta = cluster.x @ params.beta[1:] + params.beta[0]
    if model.slope_index is not None:
        b0, bw = float(b[0]), float(b[1])
        eta = eta + b0 + bw * cluster.x[:, model.slope_index]
    else:
        eta = eta + float(b)
    if model.outcome_family == BERNOULLI_LOGIT:
        return float(np.sum(cluster.y * eta - np.logaddexp(0.0, eta)))
    sigma_eps = math.exp(params.log_sigma_eps)
    resid = cluster.y - eta
    return float(
        -0.5 * cluster.n * (_LOG_2PI + 2.0 * math.log(sigma_eps))
        - resid @ resid / (2.0 * sigma_eps**2)
    )


def marginal_cluster_loglik(
    cluster: Cluster,
    params: ParamVector,
    model: ModelSpec,
    rule: QuadratureRule | None = None,
    adaptive: bool | None = None,
) -> float:
    """Cluster log-likelihood with the random effect integrated out."""
    rule = rule or default_rule(model)
    block = _single_block(cluster, model)
    use_adaptive = _resolve_adaptive(model, cluster.n, adaptive)
    return float(_block_marginal_logliks(block, params, model, rule, use_adaptive)[0])


def cluster_logliks(
    dataset: Dataset,
    params: ParamVector,
    model: ModelSpec,
    rule: QuadratureRule | None = None,
    adaptive: bool | None = None,
    blocks: list[_SizeBlock] | None = None,
) -> np.ndarray:
    """Marginal log-likelihood per cluster, in dataset order."""
    rule = rule or default_rule(model)
    blocks = blocks if blocks is not None else _make_blocks(dataset, model)
    out = np.empty(sum(len(b.idx) for b in blocks))
    for block in blocks:
        use_adaptive = _resolve_adaptive(model, block.n, adaptive)
        block.scatter(
            _block_marginal_logliks(block, params, model, rule, use_adaptive), out
        )
    return out


def total_loglik(
    dataset: Dataset,
    params: ParamVector,
    model: ModelSpec,
    rule: QuadratureRule | None = None,
    adaptive: bool | None = None,
) -> float:
    """Dataset log-likelihood: clusters are independent given the model."""
    if len(dataset) == 0:
        return 0.0
    values = cluster_logliks(dataset, params, model, rule, adaptive)
    return math.fsum(values.tolist())


# --------------------------------------------------------------------- #
# Starting values
# --------------------------------------------------------------------- #


def _irls_logistic(x: np.ndarray, y: np.ndarray, n_steps: int = 25) -> np.ndarray:
    """Damped IRLS for plain logistic regression (clustering ignored)."""
    beta = np.zeros(x.shape[1])

    def deviance(b):
        eta = np.clip(x @ b, -30.0, 30.0)
        return -2.0 * float(np.sum(y * eta - np.logaddexp(0.0, eta)))

    dev = deviance(beta)
    for _ in range(n_steps):
        eta = np.clip(x @ beta, -30.0, 30.0)
        p = expit(eta)
        w = np.maximum(p * (1.0 - p), 1e-10)
        xtwx = (x * w[:, None]).T @ x + 1e-8 * np.eye(x.shape[1])
        score = x.T @ (y - p)
        direction = np.linalg.solve(xtwx, score)
        step = 1.0
        for _ in range(20):
            candidate = beta + step * direction
            dev_new = deviance(candidate)
            if dev_new <= dev + 1e-12:
                beta, dev = candidate, dev_new
                break
            step *= 0.5
        else:
            break
        if np.linalg.norm(step * direction) < 1e-10:
            break
    return beta


def auto_start(dataset: Dataset, model: ModelSpec) -> ParamVector:
    """Starting values: IRLS/OLS betas ignoring clustering, neutral scales."""
    x = np.vstack([c.x for c in dataset.clusters])
    y = np.concatenate([c.y for c in dataset.clusters])
    xaug = np.column_stack([np.ones(len(y)), x])

    log_sigma_eps = None
    if model.outcome_family == BERNOULLI_LOGIT:
        beta = _irls_logistic(xaug, y)
    else:
        beta, *_ = np.linalg.lstsq(xaug, y, rcond=None)
        resid = y - xaug @ beta
        log_sigma_eps = math.log(max(float(resid.std()), 1e-8))

    log_sigma_b = None if model.is_bivariate else 0.0

    shape = np.empty(0)
    if model.ranef_free and isinstance(model.ranef_family, TukeyGH):
        shape = np.array([0.1, _raw_from_h(0.05)])
    elif model.ranef_free and isinstance(model.ranef_family, DiscreteK):
        k = len(model.ranef_family.locations)
        shape = np.concatenate([np.linspace(-1.0, 1.0, k)[: k - 1], np.zeros(k - 1)])

    covariance = np.zeros(3) if _covariance_free(model) else None
    return ParamVector(beta, log_sigma_b, shape, covariance, log_sigma_eps)


# --------------------------------------------------------------------- #
# Fitting
# --------------------------------------------------------------------- #


def _validate_for_fit(dataset: Dataset, model: ModelSpec) -> None:
    if len(dataset) == 0:
        raise DataError("cannot fit an empty dataset")
    p = model.n_covariates
    if len(dataset.covariate_names) != p:
        raise DataError(
            f"dataset has {len(dataset.covariate_names)} covariates, model expects {p}"
        )
    if model.outcome_family == BERNOULLI_LOGIT:
        y = np.concatenate([c.y for c in dataset.clusters])
        if not np.isin(y, (0.0, 1.0)).all():
            raise DataError("Bernoulli outcomes must be 0 or 1")
        if np.all(y == y[0]):
            raise DataError("all outcomes are identical; Bernoulli model is degenerate")


def fit(dataset: Dataset, model: ModelSpec, options: FitOptions | None = None) -> FitResult:
    """Maximize the marginal likelihood over all free coordinates.

    A Nelder-Mead warm-up precedes BFGS with central finite differences;
    the free shape surface can be flat or ridged, and the warm-up keeps
    the quasi-Newton phase away from immediate curvature pathologies.
    Non-convergence is reported in the result, never raised: the last
    iterate is returned with converged=False.
    """
    options = options or FitOptions()
    _validate_for_fit(dataset, model)
    rule = default_rule(model, options.quad_points)
    blocks = _make_blocks(dataset, model)
    names = parameter_names(model)

    start = options.start if options.start is not None else auto_start(dataset, model)
    x0 = pack_params(start, model)
    if x0.size != len(names):
        raise DataError(
            f"start vector has {x0.size} coordinates, model needs {len(names)}"
        )

    def objective(flat: np.ndarray) -> float:
        params = unpack_params(flat, model)
        with np.errstate(over="ignore", under="ignore", invalid="ignore"):
            try:
                values = np.empty(len(dataset))
                for block in blocks:
                    use_adaptive = _resolve_adaptive(
                        model, block.n, options.quad_adaptive
                    )
                    block.scatter(
                        _block_marginal_logliks(
                            block, params, model, rule, use_adaptive
                        ),
                        values,
                    )
                total = math.fsum(values.tolist())
            except (FloatingPointError, ValueError, np.linalg.LinAlgError):
                return np.inf
        return -total if np.isfinite(total) else np.inf

    warm = optimize.nelder_mead(
        objective,
        x0,
        optimize.OptimizeOptions(
            max_evals=options.nm_warmup_evals,
            f_tol=options.f_tol,
            g_tol=options.g_tol,
            fd_step_scale=options.fd_step_scale,
        ),
    )
    refine = optimize.bfgs_fd(
        objective,
        warm.x,
        optimize.OptimizeOptions(
            max_iters=options.max_iters,
            f_tol=options.f_tol,
            g_tol=options.g_tol,
            fd_step_scale=options.fd_step_scale,
        ),
    )

    hessian_pd = False
    std_errors = np.full(len(names), np.nan)
    message = refine.message
    try:
        hessian = optimize.finite_diff_hessian(
            objective, refine.x, options.hessian_step_scale
        )
        chol = np.linalg.cholesky(hessian)
        inv = np.linalg.inv(chol)
        std_errors = np.sqrt(np.sum(inv**2, axis=0))
        hessian_pd = True
    except (np.linalg.LinAlgError, optimize.FiniteDifferenceError):
        message = refine.message + "; Hessian not positive definite"

    return FitResult(
        estimates=unpack_params(refine.x, model),
        std_errors=std_errors,
        loglik=-refine.f,
        converged=bool(refine.converged and hessian_pd),
        n_iterations=refine.n_iters,
        gradient_norm=refine.gradient_norm,
        parameter_names=names,
        model=model,
        message=message,
    )
