"""
Pipeline Configuration

Validated settings for every pipeline stage. Config files use the TOML-like
grammar in grammar/config_grammar.py; the parsed dictionary is validated here
with pydantic. Process-level defaults come from the environment (`.env` is
loaded by the CLI and the API at start-up).
"""

import os
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from grammar.config_grammar import ConfigSyntaxError, load_config

DEFAULT_TIER_EDGES = [0.0, 8.0, 12.0, 20.0, 25.0, 30.0, 50.0, 75.0, 100.0, 1000.0]

CONTINUOUS_COVARIATES = ("tier_mbps", "rwnd_bytes", "min_rtt_ms", "mss_bytes", "client_limited_frac")
EXACT_COVARIATES = ("os_class", "peak_flag")

DEFAULT_SEED = 42


class ConfigError(ValueError):
    """Raised when a config file is unreadable or fails validation."""


# =============================================================================
# Environment
# =============================================================================

def env_log_level() -> str:
    return os.getenv("ISPM_LOG_LEVEL", "INFO").upper()


def env_seed() -> int:
    value = os.getenv("ISPM_SEED")
    if value is None or value.strip() == "":
        return DEFAULT_SEED
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"ISPM_SEED must be an integer, got {value!r}")


def env_artifact_dir() -> Path:
    return Path(os.getenv("ISPM_ARTIFACT_DIR", "artifacts"))


# =============================================================================
# Stage settings
# =============================================================================

class _Settings(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TierSettings(_Settings):
    """Household isolation and speed-tier estimation."""
    min_tests: dict[str, int] = Field(
        default_factory=lambda: {"AU": 20, "GB": 20, "UK": 20, "US": 50},
        description="Annual test-count threshold per country",
    )
    default_min_tests: int = Field(default=20, ge=1)
    bins: list[float] = Field(default_factory=lambda: list(DEFAULT_TIER_EDGES))
    tau_alpha: float = Field(default=0.05, gt=0, lt=1)
    refine: bool = True
    rho_bin_width: float = Field(default=0.1, gt=0, le=2)

    @field_validator("bins")
    @classmethod
    def _check_bins(cls, edges: list[float]) -> list[float]:
        if len(edges) < 2 or edges[0] != 0:
            raise ValueError("bins need at least two edges starting at 0")
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError("bin edges must be strictly increasing")
        return edges

    def threshold_for(self, country: str) -> int:
        return self.min_tests.get(country.upper(), self.default_min_tests)


class ImportanceSettings(_Settings):
    enabled: bool = True
    country: str | None = None
    trees: int = Field(default=200, ge=1)
    max_depth: int = Field(default=12, ge=1)
    min_leaf: int = Field(default=5, ge=1)
    features_per_split: int | None = Field(default=None, ge=1)
    repeats: int = Field(default=5, ge=1)
    seed: int | None = None


class MatchSettings(_Settings):
    caliper_sd: float = Field(default=0.2, gt=0)
    continuous: list[str] = Field(default_factory=lambda: ["tier_mbps", "rwnd_bytes", "min_rtt_ms", "mss_bytes"])
    exact: list[str] = Field(default_factory=lambda: ["os_class"])
    unit: Literal["test", "household"] = "test"
    bootstrap: int = Field(default=1000, ge=1)
    workers: int = Field(default=1, ge=1)
    seed: int | None = None

    @model_validator(mode="after")
    def _check_covariates(self) -> "MatchSettings":
        unknown = [c for c in self.continuous if c not in CONTINUOUS_COVARIATES]
        unknown += [c for c in self.exact if c not in EXACT_COVARIATES]
        if unknown:
            raise ValueError(f"unknown covariates: {unknown}")
        if not self.continuous:
            raise ValueError("at least one continuous covariate is required")
        return self


class PairSpec(_Settings):
    """One ISP comparison: treatment minus control within a tier bin."""
    treat: str
    control: str
    bin: str
    year: int | None = None
    id: str | None = None

    @model_validator(mode="after")
    def _check_pair(self) -> "PairSpec":
        if self.treat == self.control:
            raise ValueError(f"treat and control are both {self.treat!r}")
        return self

    @property
    def pair_id(self) -> str:
        if self.id:
            return self.id
        year = f"/{self.year}" if self.year is not None else ""
        return f"{self.treat} vs {self.control} [{self.bin}]{year}"


class InputSettings(_Settings):
    """Either a normalized record file, or a raw export plus its side tables."""
    records: Path | None = None
    raw: Path | None = None
    prefix_map: Path | None = None
    tz: Path | None = None
    os_rules: Path | None = None

    @model_validator(mode="after")
    def _check_sources(self) -> "InputSettings":
        if (self.records is None) == (self.raw is None):
            raise ValueError("set exactly one of input.records or input.raw")
        if self.raw is not None and (self.prefix_map is None or self.tz is None):
            raise ValueError("input.raw needs input.prefix_map and input.tz")
        return self

    def resolved(self, base: Path) -> "InputSettings":
        values = {
            name: (base / value if value is not None and not value.is_absolute() else value)
            for name, value in self.model_dump().items()
        }
        return InputSettings(**values)


class ReportSettings(_Settings):
    format: Literal["csv", "json"] = "csv"
    countries: list[str] = Field(default_factory=list)
    scatter_ip: str | None = None
    scatter_month: str | None = None


class PipelineConfig(_Settings):
    seed: int = Field(default_factory=env_seed)
    years: list[int] = Field(default_factory=list)
    input: InputSettings
    tiers: TierSettings = Field(default_factory=TierSettings)
    importance: ImportanceSettings = Field(default_factory=ImportanceSettings)
    match: MatchSettings = Field(default_factory=MatchSettings)
    pair: list[PairSpec] = Field(default_factory=list)
    report: ReportSettings = Field(default_factory=ReportSettings)

    @property
    def pairs(self) -> list[PairSpec]:
        return self.pair


# =============================================================================
# Loading
# =============================================================================

def _format_validation(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        location = ".".join(str(p) for p in item["loc"]) or "<root>"
        parts.append(f"{location}: {item['msg']}")
    return "; ".join(parts)


def validate(model: type[BaseModel], data: dict[str, Any], source: str = "<config>") -> Any:
    try:
        return model.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"{source}: {_format_validation(e)}") from e


def read_config_file(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        return load_config(path)
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror or e}") from e
    except ConfigSyntaxError as e:
        raise ConfigError(f"{path}: {e}") from e


def load_pipeline_config(path: str | Path) -> PipelineConfig:
    """
    Read and validate a pipeline config.

    Relative input paths are resolved against the config file's directory.
    """
    path = Path(path)
    config = validate(PipelineConfig, read_config_file(path), str(path))
    config.input = config.input.resolved(path.parent)
    return config


def load_suite(path: str | Path) -> tuple[MatchSettings, list[PairSpec], int]:
    """
    Read a ranking suite: optional `seed`, a `[match]` table and `[[pair]]` entries.
    """
    path = Path(path)
    data = read_config_file(path)
    unknown = set(data) - {"seed", "match", "pair"}
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    settings = validate(MatchSettings, data.get("match", {}), str(path))
    pairs = [validate(PairSpec, entry, str(path)) for entry in data.get("pair", [])]
    if not pairs:
        raise ConfigError(f"{path}: suite defines no [[pair]] entries")
    seed = data.get("seed", env_seed())
    if not isinstance(seed, int):
        raise ConfigError(f"{path}: seed must be an integer")
    return settings, pairs, seed
