"""Flat key-value configuration files for scenario and limit runs.

Format: one ``key = value`` pair per line, ``#`` starts a comment, arrays
are comma separated.  List values containing parenthesized family specs
split on top-level commas only, so ``tukey(g=0.5, h=0.1)`` survives inside
a list.  Parse errors carry the offending line number.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .ranef import BIVARIATE, FamilyParseError, RanefFamily, format_family, parse_family

__all__ = [
    "ConfigError",
    "FittedFamily",
    "ScenarioConfig",
    "LimitConfig",
    "parse_scenario_config",
    "emit_scenario_config",
    "apply_desk_preset",
    "parse_limit_config",
    "emit_limit_config",
]

WITHIN_BETWEEN = "within_between"
SLOPES_DESIGN = "slopes_design"


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


@dataclass(frozen=True)
class FittedFamily:
    """One fitted arm of a scenario: a family plus its free-parameter flags."""

    label: str
    family: RanefFamily
    free: tuple[str, ...]


@dataclass(frozen=True)
class ScenarioConfig:
    """Full description of a simulation study.

    ``base_seed`` keys the common-random-numbers streams; data generation
    for a replication depends only on (base_seed, replication), never on
    cluster size or fitted family.
    """

    m: int
    cluster_sizes: tuple[int, ...]
    true_betas: tuple[float, ...]
    sigma_b: float
    true_family: RanefFamily
    fitted_families: tuple[FittedFamily, ...]
    n_replications: int
    base_seed: int
    covariate_scheme: str
    quad_points: int | None = None
    quad_adaptive: bool | None = None
    skip_free_shape_sizes: tuple[int, ...] = ()

    def __post_init__(self):
        if self.m < 2:
            raise ConfigError(f"m must be >= 2, got {self.m}")
        if not self.cluster_sizes or any(n < 1 for n in self.cluster_sizes):
            raise ConfigError("every cluster size must be >= 1")
        if self.n_replications < 1:
            raise ConfigError("n_replications must be >= 1")
        if self.covariate_scheme not in (WITHIN_BETWEEN, SLOPES_DESIGN):
            raise ConfigError(
                f"covariate_scheme must be {WITHIN_BETWEEN} or {SLOPES_DESIGN}"
            )
        if len(self.true_betas) != 3:
            raise ConfigError(
                "true_betas needs 3 values: intercept, between, within"
            )


@dataclass(frozen=True)
class LimitConfig:
    """Description of a small-design asymptotic-limit computation."""

    n: int
    true_betas: tuple[float, ...]
    sigma_b: float
    true_family: RanefFamily
    assumed_family: RanefFamily
    assumed_free: tuple[str, ...]
    quad_points: int = 40

    def __post_init__(self):
        if not 1 <= self.n <= 12:
            raise ConfigError(f"n must be in 1..12 (pattern enumeration), got {self.n}")
        if len(self.true_betas) != 3:
            raise ConfigError("true_betas needs 3 values: intercept, between, within")


# --------------------------------------------------------------------- #
# Key-value scanning
# --------------------------------------------------------------------- #


def _scan(text: str) -> dict[str, tuple[str, int]]:
    out: dict[str, tuple[str, int]] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {raw.strip()!r}", line_no)
        key, _, value = line.partition("=")
        key = key.strip().lower()
        value = value.strip()
        if not key:
            raise ConfigError("empty key", line_no)
        if key in out:
            raise ConfigError(f"duplicate key: {key}", line_no)
        out[key] = (value, line_no)
    return out


def _split_top_level(value: str) -> list[str]:
    """Split on commas not nested inside parentheses."""
    parts: list[str] = []
    depth = 0
    current: list[str] = []
    for ch in value:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth = max(0, depth - 1)
        if ch == "," and depth == 0:
            parts.append("".join(current).strip())
            current = []
        else:
            current.append(ch)
    tail = "".join(current).strip()
    if tail:
        parts.append(tail)
    return parts


class _Reader:
    def __init__(self, entries: dict[str, tuple[str, int]], known: set[str]):
        self.entries = entries
        self.known = known

    def check_unknown(self):
        for key, (_, line_no) in self.entries.items():
            if key not in self.known:
                raise ConfigError(f"unknown key: {key}", line_no)

    def require(self, key: str) -> tuple[str, int]:
        if key not in self.entries:
            raise ConfigError(f"missing key: {key}")
        return self.entries[key]

    def get_int(self, key: str, default=None):
        if key not in self.entries:
            if default is not None:
                return default
            self.require(key)
        value, line_no = self.entries[key]
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got {value!r}", line_no)

    def get_float(self, key: str):
        value, line_no = self.require(key)
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {value!r}", line_no)

    def get_bool(self, key: str):
        value, line_no = self.entries[key]
        lowered = value.lower()
        if lowered in ("true", "yes", "1"):
            return True
        if lowered in ("false", "no", "0"):
            return False
        raise ConfigError(f"{key} must be true or false, got {value!r}", line_no)

    def get_int_list(self, key: str) -> tuple[int, ...]:
        value, line_no = self.require(key)
        try:
            return tuple(int(v) for v in _split_top_level(value))
        except ValueError:
            raise ConfigError(f"{key} must be a list of integers, got {value!r}", line_no)

    def get_float_list(self, key: str) -> tuple[float, ...]:
        value, line_no = self.require(key)
        try:
            return tuple(float(v) for v in _split_top_level(value))
        except ValueError:
            raise ConfigError(f"{key} must be a list of numbers, got {value!r}", line_no)

    def get_family(self, key: str):
        value, line_no = self.require(key)
        try:
            return parse_family(value)
        except FamilyParseError as exc:
            raise ConfigError(str(exc), line_no)

    def get_family_list(self, key: str) -> tuple[FittedFamily, ...]:
        value, line_no = self.require(key)
        out = []
        for part in _split_top_level(value):
            try:
                family, free = parse_family(part)
            except FamilyParseError as exc:
                raise ConfigError(str(exc), line_no)
            out.append(FittedFamily(format_family(family, free), family, free))
        if not out:
            raise ConfigError(f"{key} must list at least one family", line_no)
        return tuple(out)

    def get_str(self, key: str) -> str:
        value, _ = self.require(key)
        return value


# --------------------------------------------------------------------- #
# Scenario configs
# --------------------------------------------------------------------- #

_SCENARIO_KEYS = {
    "m",
    "cluster_sizes",
    "true_betas",
    "sigma_b",
    "true_family",
    "fitted_families",
    "n_replications",
    "base_seed",
    "covariate_scheme",
    "quad_points",
    "quad_adaptive",
    "skip_free_shape_sizes",
}


def parse_scenario_config(text: str) -> ScenarioConfig:
    reader = _Reader(_scan(text), _SCENARIO_KEYS)
    reader.check_unknown()
    m = reader.get_int("m")
    cluster_sizes = reader.get_int_list("cluster_sizes")
    true_betas = reader.get_float_list("true_betas")
    true_family, _ = reader.get_family("true_family")
    fitted = reader.get_family_list("fitted_families")
    n_replications = reader.get_int("n_replications")
    base_seed = reader.get_int("base_seed")
    scheme = reader.get_str("covariate_scheme").lower()
    sigma_b = 1.0
    if "sigma_b" in reader.entries:
        sigma_b = reader.get_float("sigma_b")
    elif not isinstance(true_family, BIVARIATE):
        # Bivariate truths carry their covariance in the family itself.
        raise ConfigError("missing key: sigma_b")
    quad_points = None
    if "quad_points" in reader.entries:
        quad_points = reader.get_int("quad_points")
    quad_adaptive = None
    if "quad_adaptive" in reader.entries:
        quad_adaptive = reader.get_bool("quad_adaptive")
    skip = ()
    if "skip_free_shape_sizes" in reader.entries:
        skip = reader.get_int_list("skip_free_shape_sizes")
    return ScenarioConfig(
        m=m,
        cluster_sizes=cluster_sizes,
        true_betas=true_betas,
        sigma_b=sigma_b,
        true_family=true_family,
        fitted_families=fitted,
        n_replications=n_replications,
        base_seed=base_seed,
        covariate_scheme=scheme,
        quad_points=quad_points,
        quad_adaptive=quad_adaptive,
        skip_free_shape_sizes=skip,
    )


def emit_scenario_config(config: ScenarioConfig) -> str:
    lines = [
        f"m = {config.m}",
        "cluster_sizes = " + ", ".join(str(n) for n in config.cluster_sizes),
        "true_betas = " + ", ".join(repr(b) for b in config.true_betas),
        f"sigma_b = {config.sigma_b!r}",
        f"true_family = {format_family(config.true_family)}",
        "fitted_families = " + ", ".join(f.label for f in config.fitted_families),
        f"n_replications = {config.n_replications}",
        f"base_seed = {config.base_seed}",
        f"covariate_scheme = {config.covariate_scheme}",
    ]
    if config.quad_points is not None:
        lines.append(f"quad_points = {config.quad_points}")
    if config.quad_adaptive is not None:
        lines.append(f"quad_adaptive = {'true' if config.quad_adaptive else 'false'}")
    if config.skip_free_shape_sizes:
        lines.append(
            "skip_free_shape_sizes = "
            + ", ".join(str(n) for n in config.skip_free_shape_sizes)
        )
    return "\n".join(lines) + "\n"


def apply_desk_preset(config: ScenarioConfig) -> ScenarioConfig:
    """Desk-scale preset: 200 replications, sizes {2, 10, 40}, and free-shape
    fits skipped at cluster size 2, where the data carry almost no
    information about shape parameters."""
    sizes = tuple(n for n in (2, 10, 40) if n in config.cluster_sizes) or (2, 10, 40)
    return replace(
        config,
        n_replications=min(config.n_replications, 200),
        cluster_sizes=sizes,
        skip_free_shape_sizes=tuple(sorted(set(config.skip_free_shape_sizes) | {2})),
    )


# --------------------------------------------------------------------- #
# Limit configs
# --------------------------------------------------------------------- #

_LIMIT_KEYS = {
    "n",
    "true_betas",
    "sigma_b",
    "true_family",
    "assumed_family",
    "quad_points",
}


def parse_limit_config(text: str) -> LimitConfig:
    reader = _Reader(_scan(text), _LIMIT_KEYS)
    reader.check_unknown()
    n = reader.get_int("n")
    true_betas = reader.get_float_list("true_betas")
    sigma_b = reader.get_float("sigma_b")
    true_family, true_free = reader.get_family("true_family")
    if true_free:
        raise ConfigError("true_family must be fully specified (no free parameters)")
    assumed_family, assumed_free = reader.get_family("assumed_family")
    quad_points = reader.get_int("quad_points", default=40)
    return LimitConfig(
        n=n,
        true_betas=true_betas,
        sigma_b=sigma_b,
        true_family=true_family,
        assumed_family=assumed_family,
        assumed_free=assumed_free,
        quad_points=quad_points,
    )


def emit_limit_config(config: LimitConfig) -> str:
    lines = [
        f"n = {config.n}",
        "true_betas = " + ", ".join(repr(b) for b in config.true_betas),
        f"sigma_b = {config.sigma_b!r}",
        f"true_family = {format_family(config.true_family)}",
        f"assumed_family = {format_family(config.assumed_family, config.assumed_free)}",
        f"quad_points = {config.quad_points}",
    ]
    return "\n".join(lines) + "\n"
