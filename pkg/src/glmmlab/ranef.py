"""Random-effects distribution families.

Every family a mixed model in this package can assume or simulate from is
described here: sampling, moments, standardization to mean 0 / variance 1,
and the z-space representation that the quadrature-based likelihood uses.

Scalar families are defined through a base variate ``T = tau(Z)`` with
``Z ~ N(0, 1)``; standardization turns that into a random intercept
``b = sigma_b * (T - mean) / sd`` so that ``E[b] = 0`` and
``var(b) = sigma_b**2`` hold exactly.  The Tukey(g, h) family never gets a
closed-form density: all likelihood and prediction work routes through the
z-space map, which is exact for every (g, h) including h < 0.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Union

import numpy as np
from scipy.integrate import quad
from scipy.special import log_ndtr, ndtri

__all__ = [
    "MomentError",
    "UnsupportedFamilyError",
    "FamilyParseError",
    "Normal",
    "CenteredExponential",
    "TukeyGH",
    "DiscreteK",
    "BivariateNormal",
    "BivariateNormalMixture",
    "RanefFamily",
    "StandardizedRanef",
    "tukey_transform",
    "raw_moment",
    "central_stats",
    "standardize",
    "sample",
    "z_representation",
    "log_density",
    "bivariate_mixture_from_moments",
    "parse_family",
    "format_family",
]

# Parameters closer to zero than this use the analytic limit branch of the
# Tukey transform (avoids catastrophic cancellation in expm1(g z)/g).
LIMIT_EPS = 1e-8

# Moment quadrature range; standard-normal mass beyond +/-12 is < 1e-30.
Z_RANGE = 12.0

_LOG_2PI = math.log(2.0 * math.pi)


class MomentError(ValueError):
    """Requested moment does not exist for the family."""


class UnsupportedFamilyError(TypeError):
    """Operation is not defined for this random-effects family."""


class FamilyParseError(ValueError):
    """Family specification string could not be parsed."""


# --------------------------------------------------------------------- #
# Family descriptions
# --------------------------------------------------------------------- #


@dataclass(frozen=True)
class Normal:
    """Standard normal base variate."""


@dataclass(frozen=True)
class CenteredExponential:
    """Unit exponential base variate; standardization centers it at zero."""


@dataclass(frozen=True)
class TukeyGH:
    """Tukey(g, h) base variate: tau(z) = expm1(g z)/g * exp(h z^2 / 2).

    g controls skewness and h tail weight; (g, h) = (0, 0) is the standard
    normal.  h < 0 gives a bounded-range distribution and is admitted for
    sampling, moments and z-space likelihoods.
    """

    g: float
    h: float


@dataclass(frozen=True)
class DiscreteK:
    """Discrete distribution on K support points.

    ``logit_weights`` holds K-1 free logits; the last logit is pinned at 0
    and the probabilities are their softmax, so every weight lies in (0, 1)
    and the weights sum to one by construction.
    """

    locations: tuple[float, ...]
    logit_weights: tuple[float, ...]

    def __post_init__(self):
        if len(self.logit_weights) != len(self.locations) - 1:
            raise ValueError(
                "need exactly K-1 logit weights for K locations, got "
                f"{len(self.logit_weights)} for K={len(self.locations)}"
            )

    @property
    def weights(self) -> np.ndarray:
        logits = np.append(np.asarray(self.logit_weights, dtype=float), 0.0)
        logits = logits - logits.max()
        w = np.exp(logits)
        return w / w.sum()


@dataclass(frozen=True)
class BivariateNormal:
    """Mean-zero bivariate normal for (intercept, slope) random effects.

    Parameterized on unconstrained scales: log standard deviations and the
    Fisher-z (atanh) of the correlation, so any real triple is valid and
    the covariance is positive definite by construction.
    """

    log_sd_intercept: float
    log_sd_slope: float
    atanh_correlation: float

    def _sds_rho(self) -> tuple[float, float, float]:
        # Guard rails: standard deviations clamp to [e^-5, e^5] and |rho|
        # below tanh(6).  Logit-scale effects far outside that range are
        # not statistically meaningful, and the clamp keeps optimizer
        # probes on covariances every integration scheme can evaluate;
        # beyond the rails the likelihood surface is flat, which the
        # fitter reports as non-convergence when it matters.
        s0 = math.exp(min(max(self.log_sd_intercept, -5.0), 5.0))
        s1 = math.exp(min(max(self.log_sd_slope, -5.0), 5.0))
        rho = math.tanh(min(max(self.atanh_correlation, -6.0), 6.0))
        return s0, s1, rho

    @property
    def covariance(self) -> np.ndarray:
        s0, s1, rho = self._sds_rho()
        return np.array([[s0 * s0, rho * s0 * s1], [rho * s0 * s1, s1 * s1]])

    @property
    def cholesky(self) -> np.ndarray:
        s0, s1, rho = self._sds_rho()
        return np.array([[s0, 0.0], [rho * s1, s1 * math.sqrt(1.0 - rho * rho)]])


@dataclass(frozen=True)
class BivariateNormalMixture:
    """Fair two-component mixture of bivariate normals at +/- the centers.

    Component means are ``+(center_intercept, center_slope)`` and its
    negation, each with standard deviations ``(sd_intercept, sd_slope)``
    and within-component correlation ``component_correlation``.  The
    mixture has mean zero by symmetry.
    """

    center_intercept: float
    center_slope: float
    sd_intercept: float
    sd_slope: float
    component_correlation: float

    @property
    def component_cholesky(self) -> np.ndarray:
        s0, s1 = self.sd_intercept, self.sd_slope
        rho = self.component_correlation
        return np.array([[s0, 0.0], [rho * s1, s1 * math.sqrt(1.0 - rho * rho)]])

    @property
    def covariance(self) -> np.ndarray:
        """Marginal covariance of the mixture."""
        s0, s1 = self.sd_intercept, self.sd_slope
        m0, m1 = self.center_intercept, self.center_slope
        rho = self.component_correlation
        return np.array(
            [
                [s0 * s0 + m0 * m0, rho * s0 * s1 + m0 * m1],
                [rho * s0 * s1 + m0 * m1, s1 * s1 + m1 * m1],
            ]
        )


RanefFamily = Union[
    Normal,
    CenteredExponential,
    TukeyGH,
    DiscreteK,
    BivariateNormal,
    BivariateNormalMixture,
]

SCALAR_CONTINUOUS = (Normal, CenteredExponential, TukeyGH)
BIVARIATE = (BivariateNormal, BivariateNormalMixture)


@dataclass(frozen=True)
class StandardizedRanef:
    """A family shifted/scaled to mean 0, variance 1, then scaled by sigma_b.

    For scalar families the generated effect is
    ``b = sigma_b * (T - location_shift) / scale_divisor``.  Bivariate
    families carry their own covariance, so shift is 0, divisor 1 and
    sigma_b is fixed at 1.
    """

    family: RanefFamily
    location_shift: float
    scale_divisor: float
    sigma_b: float

    @property
    def is_bivariate(self) -> bool:
        return isinstance(self.family, BIVARIATE)


# --------------------------------------------------------------------- #
# Tukey transform
# --------------------------------------------------------------------- #


def tukey_transform(z, g: float, h: float):
    """Evaluate tau(z) = expm1(g z)/g * exp(h z^2 / 2).

    Total function of real z; |g| < LIMIT_EPS switches to the analytic
    limit ``z * exp(h z^2 / 2)``.  Strictly increasing in z when h >= 0.
    Accepts scalars or arrays.
    """
    z_arr = np.asarray(z, dtype=float)
    tail = np.exp(0.5 * h * z_arr * z_arr)
    if abs(g) < LIMIT_EPS:
        core = z_arr
    else:
        core = np.expm1(g * z_arr) / g
    out = core * tail
    return float(out) if out.ndim == 0 else out


def _tukey_d1(z, g: float, h: float):
    """First derivative of the Tukey transform with respect to z."""
    z = np.asarray(z, dtype=float)
    tail = np.exp(0.5 * h * z * z)
    expgz = np.exp(g * z)
    core = z if abs(g) < LIMIT_EPS else np.expm1(g * z) / g
    return tail * (expgz + h * z * core)


def _tukey_d2(z, g: float, h: float):
    """Second derivative of the Tukey transform with respect to z."""
    z = np.asarray(z, dtype=float)
    tail = np.exp(0.5 * h * z * z)
    expgz = np.exp(g * z)
    core = z if abs(g) < LIMIT_EPS else np.expm1(g * z) / g
    return tail * ((g + 2.0 * h * z) * expgz + h * (1.0 + h * z * z) * core)


def _exp_quantile_of_phi(z):
    """Unit-exponential quantile at Phi(z), i.e. -log(1 - Phi(z)), stably."""
    z = np.asarray(z, dtype=float)
    return -log_ndtr(-z)


def _exp_quantile_d1(z):
    """Derivative of the exponential quantile map: the normal hazard phi/(1-Phi)."""
    z = np.asarray(z, dtype=float)
    return np.exp(-0.5 * z * z - 0.5 * _LOG_2PI - log_ndtr(-z))


# --------------------------------------------------------------------- #
# Moments
# --------------------------------------------------------------------- #


def _phi(z):
    return np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def raw_moment(family: RanefFamily, order: int) -> float:
    """E[T^order] of the family's base variate, order in 1..4.

    Continuous families integrate tau(z)^order * phi(z) adaptively over
    [-Z_RANGE, Z_RANGE]; DiscreteK uses the exact weighted sum.  Tukey
    moments of a given order exist only when h < 1/order.
    """
    if not 1 <= order <= 4:
        raise ValueError(f"order must be in 1..4, got {order}")
    if isinstance(family, Normal):
        return (0.0, 1.0, 0.0, 3.0)[order - 1]
    if isinstance(family, CenteredExponential):
        return float(math.factorial(order))
    if isinstance(family, DiscreteK):
        locs = np.asarray(family.locations, dtype=float)
        return float(np.sum(family.weights * locs**order))
    if isinstance(family, TukeyGH):
        if family.h * order >= 1.0:
            raise MomentError(
                f"Tukey moment of order {order} does not exist for "
                f"h={family.h} (requires h < 1/{order})"
            )
        g, h = family.g, family.h

        def integrand(z):
            return tukey_transform(z, g, h) ** order * _phi(z)

        # The integrand's Gaussian envelope exp(k g z - (1 - k h) z^2 / 2)
        # recenters and widens as k h approaches 1; the integration range
        # must follow it or moments near the existence boundary are
        # silently truncated.
        width = 1.0 / math.sqrt(1.0 - order * h)
        center = order * g * width * width
        lo = min(-Z_RANGE, center - Z_RANGE * width)
        hi = max(Z_RANGE, center + Z_RANGE * width)
        value, _ = quad(integrand, lo, hi, epsabs=1e-13, epsrel=1e-11, limit=400)
        return float(value)
    raise UnsupportedFamilyError(
        f"raw_moment is not defined for {type(family).__name__}"
    )


def central_stats(family: RanefFamily) -> tuple[float, float, float, float]:
    """(mean, variance, skewness, kurtosis) of the base variate.

    Kurtosis uses the raw convention mu4 / mu2^2 (normal = 3); that is the
    convention under which the Tukey(0.5, 0.1) family shows kurtosis 44.24.
    """
    m1 = raw_moment(family, 1)
    m2 = raw_moment(family, 2)
    m3 = raw_moment(family, 3)
    m4 = raw_moment(family, 4)
    var = m2 - m1 * m1
    mu3 = m3 - 3.0 * m2 * m1 + 2.0 * m1**3
    mu4 = m4 - 4.0 * m3 * m1 + 6.0 * m2 * m1 * m1 - 3.0 * m1**4
    return m1, var, mu3 / var**1.5, mu4 / (var * var)


@lru_cache(maxsize=512)
def _standardization(family: RanefFamily) -> tuple[float, float]:
    """(mean, sd) of the base variate, cached per family."""
    m1 = raw_moment(family, 1)
    m2 = raw_moment(family, 2)
    var = m2 - m1 * m1
    if not var > 0.0:
        raise MomentError(f"{type(family).__name__} has non-positive variance {var}")
    return m1, math.sqrt(var)


def standardize(family: RanefFamily, sigma_b: float) -> StandardizedRanef:
    """Build the mean-0, variance sigma_b**2 version of the family.

    Scalar families get shift = mean and divisor = sd of the base variate,
    both from :func:`raw_moment`.  Bivariate families already carry their
    covariance, so they pass through untouched.
    """
    if isinstance(family, BIVARIATE):
        return StandardizedRanef(family, 0.0, 1.0, 1.0)
    if sigma_b < 0.0:
        raise ValueError(f"sigma_b must be >= 0, got {sigma_b}")
    shift, divisor = _standardization(family)
    return StandardizedRanef(family, shift, divisor, float(sigma_b))


# --------------------------------------------------------------------- #
# z-space representation and sampling
# --------------------------------------------------------------------- #


def _base_map(family: RanefFamily) -> Callable[[np.ndarray], np.ndarray]:
    """z -> T map of a scalar continuous family."""
    if isinstance(family, Normal):
        return lambda z: np.asarray(z, dtype=float)
    if isinstance(family, CenteredExponential):
        return _exp_quantile_of_phi
    if isinstance(family, TukeyGH):
        g, h = family.g, family.h
        return lambda z: np.asarray(tukey_transform(z, g, h))
    raise UnsupportedFamilyError(
        f"z-space representation is not defined for {type(family).__name__}"
    )


def z_representation(dist: StandardizedRanef) -> Callable[[np.ndarray], np.ndarray]:
    """Return b(z) = sigma_b * (tau(z) - shift) / divisor.

    Composing with Z ~ N(0, 1) reproduces the law of b; this is the
    density-free path the quadrature likelihood integrates along.  Only
    scalar continuous families have one.
    """
    base = _base_map(dist.family)
    scale = dist.sigma_b / dist.scale_divisor
    shift = dist.location_shift

    def b_of_z(z):
        return (base(np.asarray(z, dtype=float)) - shift) * scale

    return b_of_z


def _z_map_derivs(dist: StandardizedRanef, z: np.ndarray):
    """(b, db/dz, d2b/dz2) at z for a scalar continuous family."""
    z = np.asarray(z, dtype=float)
    scale = dist.sigma_b / dist.scale_divisor
    fam = dist.family
    if isinstance(fam, Normal):
        b = (z - dist.location_shift) * scale
        return b, np.full_like(z, scale), np.zeros_like(z)
    if isinstance(fam, CenteredExponential):
        t = _exp_quantile_of_phi(z)
        d1 = _exp_quantile_d1(z)
        # hazard' = hazard * (hazard - z)
        d2 = d1 * (d1 - z)
        return (t - dist.location_shift) * scale, d1 * scale, d2 * scale
    if isinstance(fam, TukeyGH):
        g, h = fam.g, fam.h
        t = np.asarray(tukey_transform(z, g, h))
        return (
            (t - dist.location_shift) * scale,
            _tukey_d1(z, g, h) * scale,
            _tukey_d2(z, g, h) * scale,
        )
    raise UnsupportedFamilyError(
        f"z-space representation is not defined for {type(fam).__name__}"
    )


def discrete_support(dist: StandardizedRanef) -> tuple[np.ndarray, np.ndarray]:
    """Standardized support points and weights of a DiscreteK family."""
    fam = dist.family
    if not isinstance(fam, DiscreteK):
        raise UnsupportedFamilyError("discrete_support requires a DiscreteK family")
    locs = np.asarray(fam.locations, dtype=float)
    b = (locs - dist.location_shift) * dist.sigma_b / dist.scale_divisor
    return b, fam.weights


def sample(dist: StandardizedRanef, rng: np.random.Generator, size=None):
    """Draw from the standardized family.

    Scalar continuous families draw z via the inverse normal CDF of one
    uniform each and map through b(z); DiscreteK consumes one uniform per
    draw; bivariate families consume (coin,) z-pair uniforms per draw.
    Returns a scalar (or length-2 array) when size is None.
    """
    scalar_out = size is None
    n = 1 if scalar_out else int(size)
    fam = dist.family
    if isinstance(fam, SCALAR_CONTINUOUS):
        z = ndtri(rng.random(n))
        out = z_representation(dist)(z)
        return float(out[0]) if scalar_out else out
    if isinstance(fam, DiscreteK):
        support, weights = discrete_support(dist)
        edges = np.cumsum(weights)
        idx = np.searchsorted(edges, rng.random(n), side="right")
        idx = np.minimum(idx, len(support) - 1)
        out = support[idx]
        return float(out[0]) if scalar_out else out
    if isinstance(fam, BivariateNormal):
        z = ndtri(rng.random((n, 2)))
        out = z @ fam.cholesky.T
        return out[0] if scalar_out else out
    if isinstance(fam, BivariateNormalMixture):
        sign = np.where(rng.random(n) < 0.5, 1.0, -1.0)
        z = ndtri(rng.random((n, 2)))
        center = np.array([fam.center_intercept, fam.center_slope])
        out = sign[:, None] * center[None, :] + z @ fam.component_cholesky.T
        return out[0] if scalar_out else out
    raise UnsupportedFamilyError(f"cannot sample from {type(fam).__name__}")


def log_density(dist: StandardizedRanef, b: float) -> float:
    """Log density (or log mass) of b under the standardized family.

    Defined for Normal, CenteredExponential and DiscreteK; returns -inf
    outside the support.  TukeyGH has no usable closed-form density (the
    transform cannot be inverted globally for h < 0), so its likelihood
    and prediction paths use z-space instead.
    """
    fam = dist.family
    sigma = dist.sigma_b
    if isinstance(fam, Normal):
        if sigma == 0.0:
            return math.inf if b == 0.0 else -math.inf
        return -0.5 * _LOG_2PI - math.log(sigma) - 0.5 * (b / sigma) ** 2
    if isinstance(fam, CenteredExponential):
        # b = sigma * (E - 1) with E ~ Exp(1): support [-sigma, inf).
        if sigma == 0.0 or b < -sigma:
            return -math.inf
        return -math.log(sigma) - (b / sigma + 1.0)
    if isinstance(fam, DiscreteK):
        support, weights = discrete_support(dist)
        match = np.isclose(support, b, rtol=1e-12, atol=1e-12)
        if not match.any():
            return -math.inf
        return float(np.log(weights[match][0]))
    raise UnsupportedFamilyError(
        f"log_density is not available for {type(fam).__name__}"
    )


# --------------------------------------------------------------------- #
# Bivariate mixture construction
# --------------------------------------------------------------------- #


def bivariate_mixture_from_moments(
    var_intercept: float,
    var_slope: float,
    correlation: float,
    component_correlation: float | None = None,
) -> BivariateNormalMixture:
    """Two-point bivariate normal mixture matching target marginal moments.

    The base shape is a fair mixture of unit-sd normals centered at +/-2 in
    each coordinate (marginal variance 1 + 4 = 5).  Each coordinate is
    scaled by sqrt(var/5), and unless given explicitly the within-component
    correlation is solved so the mixture's cross-correlation matches the
    target: rho_c = 5 * correlation - 4.
    """
    if var_intercept <= 0 or var_slope <= 0:
        raise ValueError("target variances must be positive")
    s0 = math.sqrt(var_intercept / 5.0)
    s1 = math.sqrt(var_slope / 5.0)
    if component_correlation is None:
        component_correlation = 5.0 * correlation - 4.0
    if not -1.0 < component_correlation < 1.0:
        raise ValueError(
            "infeasible moment target: implied component correlation "
            f"{component_correlation:.4f} is outside (-1, 1)"
        )
    return BivariateNormalMixture(
        center_intercept=2.0 * s0,
        center_slope=2.0 * s1,
        sd_intercept=s0,
        sd_slope=s1,
        component_correlation=component_correlation,
    )


# --------------------------------------------------------------------- #
# Family specification strings
# --------------------------------------------------------------------- #

# Free parameter names for fit-time families, keyed by spec keyword.
_FREE_TUKEY = ("g", "h")
_FREE_DISCRETE = ("locations", "logit_weights")
_FREE_BVNORMAL = ("log_sd_intercept", "log_sd_slope", "atanh_correlation")

_SPEC_RE = re.compile(r"^\s*([a-z_]+)\s*(?:\(\s*(.*?)\s*\))?\s*$", re.IGNORECASE)


def _parse_kwargs(body: str, spec: str) -> dict[str, float]:
    out: dict[str, float] = {}
    for part in body.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise FamilyParseError(f"expected key=value in family spec {spec!r}")
        key, _, val = part.partition("=")
        try:
            out[key.strip().lower()] = float(val)
        except ValueError as exc:
            raise FamilyParseError(
                f"bad numeric value {val.strip()!r} in family spec {spec!r}"
            ) from exc
    return out


def parse_family(spec: str) -> tuple[RanefFamily, tuple[str, ...]]:
    """Parse a family spec string into (family, free parameter names).

    Accepted forms (case-insensitive, whitespace-tolerant)::

        normal
        exp
        tukey(g=0.5, h=0.1)
        tukey(free)
        discrete(k=3)
        bvnormal
        bvnormal(var0=5, varw=5, corr=0.9)
        bvmix(var0=5, varw=0.08, corr=0.9[, component_corr=0.5])

    A bare ``bvnormal`` or ``tukey(free)`` has free parameters estimated at
    fit time (listed in the returned tuple); fully-parameterized forms are
    fixed.
    """
    match = _SPEC_RE.match(spec)
    if not match:
        raise FamilyParseError(f"cannot parse family spec {spec!r}")
    name = match.group(1).lower()
    body = match.group(2)

    if name == "normal":
        if body:
            raise FamilyParseError("normal takes no parameters")
        return Normal(), ()
    if name == "exp":
        if body:
            raise FamilyParseError("exp takes no parameters")
        return CenteredExponential(), ()
    if name == "tukey":
        if body is None:
            raise FamilyParseError("tukey needs (g=..., h=...) or (free)")
        if body.strip().lower() == "free":
            # Starting values for the free fit; overwritten by auto_start.
            return TukeyGH(g=0.1, h=0.05), _FREE_TUKEY
        kwargs = _parse_kwargs(body, spec)
        if set(kwargs) != {"g", "h"}:
            raise FamilyParseError(f"tukey needs exactly g and h, got {sorted(kwargs)}")
        return TukeyGH(g=kwargs["g"], h=kwargs["h"]), ()
    if name == "discrete":
        kwargs = _parse_kwargs(body or "", spec)
        if set(kwargs) != {"k"}:
            raise FamilyParseError("discrete needs exactly k, e.g. discrete(k=3)")
        k = int(kwargs["k"])
        if k < 2:
            raise FamilyParseError("discrete needs k >= 2")
        locations = tuple(np.linspace(-1.0, 1.0, k))
        return DiscreteK(locations, (0.0,) * (k - 1)), _FREE_DISCRETE
    if name == "bvnormal":
        if body is None or not body.strip():
            return BivariateNormal(0.0, 0.0, 0.0), _FREE_BVNORMAL
        kwargs = _parse_kwargs(body, spec)
        if set(kwargs) != {"var0", "varw", "corr"}:
            raise FamilyParseError("bvnormal takes var0, varw, corr")
        if not -1.0 < kwargs["corr"] < 1.0:
            raise FamilyParseError("bvnormal corr must lie in (-1, 1)")
        return (
            BivariateNormal(
                0.5 * math.log(kwargs["var0"]),
                0.5 * math.log(kwargs["varw"]),
                math.atanh(kwargs["corr"]),
            ),
            (),
        )
    if name == "bvmix":
        kwargs = _parse_kwargs(body or "", spec)
        allowed = {"var0", "varw", "corr", "component_corr"}
        if not {"var0", "varw", "corr"} <= set(kwargs) or not set(kwargs) <= allowed:
            raise FamilyParseError(
                "bvmix takes var0, varw, corr and optional component_corr"
            )
        try:
            return (
                bivariate_mixture_from_moments(
                    kwargs["var0"],
                    kwargs["varw"],
                    kwargs["corr"],
                    kwargs.get("component_corr"),
                ),
                (),
            )
        except ValueError as exc:
            raise FamilyParseError(str(exc)) from exc
    raise FamilyParseError(f"unknown family {name!r}")


def format_family(family: RanefFamily, free: tuple[str, ...] = ()) -> str:
    """Canonical spec string for a family (inverse of :func:`parse_family`)."""
    if isinstance(family, Normal):
        return "normal"
    if isinstance(family, CenteredExponential):
        return "exp"
    if isinstance(family, TukeyGH):
        if free:
            return "tukey(free)"
        return f"tukey(g={family.g!r}, h={family.h!r})"
    if isinstance(family, DiscreteK):
        return f"discrete(k={len(family.locations)})"
    if isinstance(family, BivariateNormal):
        if free:
            return "bvnormal"
        cov = family.covariance
        rho = float(cov[0, 1] / math.sqrt(cov[0, 0] * cov[1, 1]))
        return (
            f"bvnormal(var0={float(cov[0, 0])!r}, varw={float(cov[1, 1])!r}, "
            f"corr={rho!r})"
        )
    if isinstance(family, BivariateNormalMixture):
        cov = family.covariance
        rho = float(cov[0, 1] / math.sqrt(cov[0, 0] * cov[1, 1]))
        return (
            f"bvmix(var0={float(cov[0, 0])!r}, varw={float(cov[1, 1])!r}, "
            f"corr={rho!r}, component_corr={float(family.component_correlation)!r})"
        )
    raise UnsupportedFamilyError(f"cannot format {type(family).__name__}")
