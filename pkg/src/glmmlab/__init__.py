"""Maximum-likelihood GLMMs with pluggable random-effects distributions.

The package fits Bernoulli-logit and Gaussian-identity mixed models whose
random intercepts (or intercept/slope pairs) follow normal, centered
exponential, Tukey(g, h), discrete mass-point or bivariate-normal mixing
distributions, and ships a simulation laboratory for studying what happens
when the assumed mixing distribution is wrong.
"""

from .glmm import (
    BERNOULLI_LOGIT,
    GAUSSIAN_IDENTITY,
    Cluster,
    DataError,
    Dataset,
    FitOptions,
    FitResult,
    ModelSpec,
    ParamVector,
    auto_start,
    cluster_loglik_given_b,
    fit,
    marginal_cluster_loglik,
    total_loglik,
)
from .asymptotics import Archetype, LimitProblem, expected_loglik, kl_limit
from .config import (
    ConfigError,
    FittedFamily,
    LimitConfig,
    ScenarioConfig,
    apply_desk_preset,
    parse_limit_config,
    parse_scenario_config,
)
from .predict import (
    MissingTruthError,
    PredictionSet,
    msep,
    posterior_mean,
    posterior_mode,
    predict_dataset,
)
from .quadrature import QuadratureRule, adaptive_recenter, gauss_hermite, tensor_grid
from .rng import replication_rng
from .simlab import (
    ReplicationResult,
    SummaryTable,
    gen_covariates,
    gen_dataset,
    run_scenario,
    run_slopes_scenario,
    summarize,
)
from .ranef import (
    BivariateNormal,
    BivariateNormalMixture,
    CenteredExponential,
    DiscreteK,
    FamilyParseError,
    MomentError,
    Normal,
    StandardizedRanef,
    TukeyGH,
    UnsupportedFamilyError,
    bivariate_mixture_from_moments,
    central_stats,
    format_family,
    log_density,
    parse_family,
    raw_moment,
    sample,
    standardize,
    tukey_transform,
    z_representation,
)

__version__ = "0.1.0"
