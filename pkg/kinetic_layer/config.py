"""
Configuration management for the kinetic layer solver
"""

import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic import ValidationError as PydanticValidationError

from .utils.exceptions import ConfigurationError

ENV_PREFIX = "KLAYER_"


class GridSpec(BaseModel):
    """Discrete velocity space."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    v_max: float = Field(default=6.0, gt=0, description="Velocity cutoff in thermal units (uniform rule)")
    n_per_axis: int = Field(default=16, ge=4, description="Nodes per velocity axis, even")
    rule: Literal["gauss", "uniform"] = Field(default="gauss", description="Gauss-Hermite or uniform midpoint rule")
    drift: Tuple[float, float, float] = Field(default=(0.0, 0.0, 0.0), description="Background velocity, third component zero")

    @field_validator("n_per_axis")
    @classmethod
    def validate_even(cls, v: int) -> int:
        if v % 2:
            raise ValueError(f"n_per_axis must be even so that v3 = 0 is never a node, got {v}")
        return v

    @field_validator("drift")
    @classmethod
    def validate_drift(cls, v: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if v[2] != 0.0:
            raise ValueError(f"drift must have zero normal component, got {v[2]}")
        return v


class WeightSpec(BaseModel):
    """Velocity weight w(v) = (1+|v|^2)^(beta/2) exp(varsigma |v-u|^2)."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    beta: float = Field(default=3.0, ge=3.0, description="Polynomial exponent")
    varsigma: float = Field(default=0.0, ge=0.0, lt=0.25, description="Gaussian exponent")


class SolveConfig(BaseModel):
    """Linear and nonlinear solver schedules and tolerances."""

    model_config = ConfigDict(extra="forbid")

    sigma0: float = Field(default=0.3, gt=0, description="Decay budget of the source")
    sigma: Optional[float] = Field(default=None, gt=0, description="Decay rate of the weighted norms, defaults to sigma0/2")

    lambda_steps: List[float] = Field(default_factory=lambda: [0.5, 1.0], description="Continuation targets in (0, 1], ending at 1")
    min_lambda_increment: float = Field(default=1.0 / 1024, gt=0, description="Smallest continuation increment before aborting")
    max_contraction: float = Field(default=0.5, gt=0, lt=1, description="Largest accepted contraction ratio per continuation step")

    n_schedule: Optional[List[int]] = Field(default=None, description="Damping levels; chosen from n0 when omitted")
    n0_candidates: List[int] = Field(default_factory=lambda: [4, 8, 16, 32, 64], description="Candidates for the smallest damping level")
    n_levels: int = Field(default=3, ge=2, description="Damping levels n0, 2 n0, ... when n_schedule is omitted")
    n_study: bool = Field(default=True, description="Measure the damped-specular limit at the first penalty")

    eps_schedule: List[float] = Field(default_factory=lambda: [1e-1, 1e-2, 1e-3, 1e-4], description="Decreasing penalties")
    d_schedule: List[float] = Field(default_factory=lambda: [4.0, 8.0, 16.0], description="Increasing slab lengths")

    x_spacing_fraction: float = Field(default=0.02, gt=0, le=0.5, description="Uniform x spacing as a fraction of d")
    x_max_spacing: Optional[float] = Field(default=None, gt=0, description="Absolute cap on the uniform x spacing")
    refine_ratio: float = Field(default=0.7, gt=0, lt=1, description="Geometric refinement ratio near the wall")
    refine_levels: int = Field(default=8, ge=0, description="Geometric refinement levels near the wall")

    inner_tol: float = Field(default=1e-10, gt=0, description="Fixed-point tolerance in the weighted sup norm")
    cauchy_tol: float = Field(default=1e-6, gt=0, description="Acceptance tolerance for limits and identities")
    cycle_tol: float = Field(default=1e-14, gt=0, lt=1, description="Back-cycle truncation weight")
    contraction_iterations: int = Field(default=5, ge=2, description="Fixed-point iterations measuring the contraction of each continuation step")
    continuation: Literal["first", "every"] = Field(default="first", description="Run lambda-continuation on the first stage only, or on every stage")
    compatibility_tol: float = Field(default=1e-10, gt=0, description="Relative tolerance of the boundary flux moments")
    fit_window: Tuple[float, float] = Field(default=(0.125, 0.5), description="Decay fit window as fractions of d; it starts at x = 2 or later")
    fit_floor: float = Field(default=1e-12, gt=0, lt=1, description="Profile values below this fraction of the maximum are left out of the decay fit")
    gmres_restart: int = Field(default=40, ge=1, description="GMRES restart length")
    gmres_maxiter: int = Field(default=400, ge=1, description="GMRES outer iterations")

    angular_rule: Tuple[int, int] = Field(default=(16, 8), description="Azimuthal x polar nodes for the collision integral")

    picard_tol: float = Field(default=1e-8, gt=0, description="Picard stop tolerance")
    picard_max_iter: int = Field(default=50, ge=1, description="Picard iteration cap")
    delta_threshold: float = Field(default=0.1, gt=0, description="Advisory smallness threshold")

    @field_validator("lambda_steps")
    @classmethod
    def validate_lambda_steps(cls, v: List[float]) -> List[float]:
        if not v or any(b <= a for a, b in zip(v, v[1:])) or v[0] <= 0 or v[-1] != 1.0:
            raise ValueError("lambda_steps must increase strictly within (0, 1] and end at 1")
        return v

    @field_validator("eps_schedule")
    @classmethod
    def validate_eps(cls, v: List[float]) -> List[float]:
        if len(v) < 2 or any(e <= 0 for e in v) or any(b >= a for a, b in zip(v, v[1:])):
            raise ValueError("eps_schedule needs at least two strictly decreasing positive penalties")
        return v

    @field_validator("d_schedule")
    @classmethod
    def validate_d(cls, v: List[float]) -> List[float]:
        if not v or v[0] < 1.0 or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("d_schedule must increase strictly and start at d >= 1")
        return v

    @field_validator("n_schedule")
    @classmethod
    def validate_n(cls, v: Optional[List[int]]) -> Optional[List[int]]:
        if v is not None and (len(v) < 2 or v[0] < 2 or any(b <= a for a, b in zip(v, v[1:]))):
            raise ValueError("n_schedule needs at least two strictly increasing levels >= 2")
        return v

    @model_validator(mode="after")
    def validate_sigma(self) -> "SolveConfig":
        if self.sigma is not None and self.sigma >= self.sigma0:
            raise ValueError(f"sigma ({self.sigma}) must be below sigma0 ({self.sigma0})")
        return self

    @property
    def decay_sigma(self) -> float:
        return self.sigma if self.sigma is not None else 0.5 * self.sigma0


class BoundarySpec(BaseModel):
    """Incoming boundary data f_b, supported on v3 < 0."""

    model_config = ConfigDict(extra="forbid")

    family: Literal["zero", "v1v2_gaussian", "v1_gaussian", "tabulated"] = Field(default="zero")
    amplitude: float = Field(default=0.05, ge=0, description="Target value of sup |w f_b|")
    path: Optional[str] = Field(default=None, description="Per-node .npy file for the tabulated family")

    @model_validator(mode="after")
    def validate_path(self) -> "BoundarySpec":
        if self.family == "tabulated" and not self.path:
            raise ValueError("tabulated boundary data needs a path")
        return self


class SourceSpec(BaseModel):
    """Interior source term, orthogonal to the collision invariants."""

    model_config = ConfigDict(extra="forbid")

    family: Literal["zero", "decaying_moment", "tabulated"] = Field(default="zero")
    amplitude: float = Field(default=0.0, ge=0, description="Target value of sup |nu^-1 w exp(sigma0 x) S|")
    rate: float = Field(default=1.0, gt=0, description="Spatial decay rate of the source")
    moment: Literal["A31", "B3"] = Field(default="A31", description="Velocity profile of the decaying source")
    path: Optional[str] = Field(default=None, description=".npz with arrays x and values for the tabulated family")

    @model_validator(mode="after")
    def validate_path(self) -> "SourceSpec":
        if self.family == "tabulated" and not self.path:
            raise ValueError("tabulated source needs a path")
        return self


class ProblemConfig(BaseModel):
    """Boundary data and source specification."""

    model_config = ConfigDict(extra="forbid")

    boundary: BoundarySpec = Field(default_factory=BoundarySpec)
    source: SourceSpec = Field(default_factory=SourceSpec)


class OutputConfig(BaseModel):
    """Output directory and artifact switches."""

    model_config = ConfigDict(extra="forbid")

    directory: str = Field(default="klayer-out", description="Directory for run artifacts")
    cache_dir: str = Field(default=".klayer-cache", description="Directory for cached operators")
    write_profiles: bool = Field(default=True, description="Write profiles.csv")
    write_snapshot: bool = Field(default=True, description="Write the binary field snapshot")
    write_report: bool = Field(default=True, description="Write report.json")


class PerformanceConfig(BaseModel):
    """Parallelism and progress reporting."""

    model_config = ConfigDict(extra="forbid")

    threads: int = Field(default=1, ge=1, description="Worker threads for assembly and collision batches")
    batch_size: int = Field(default=256, ge=1, description="Rows per assembly batch")
    enable_caching: bool = Field(default=True, description="Reuse cached operators")
    show_progress: bool = Field(default=True, description="Show progress bars over outer schedules")
    verbose_logging: bool = Field(default=False, description="Enable verbose logging for debugging")


class LoggingConfig(BaseModel):
    """Logging configuration."""

    model_config = ConfigDict(extra="forbid")

    level: str = Field(default="INFO", description="Logging level")
    format: Optional[str] = Field(default=None, description="Log format; the default adds run id and solver stage")
    file: Optional[str] = Field(default=None, description="Log file path")
    max_size_mb: int = Field(default=10, description="Maximum log file size in MB")
    backup_count: int = Field(default=5, description="Number of backup log files")


class RunConfig(BaseModel):
    """Main configuration class."""

    model_config = ConfigDict(extra="forbid")

    grid: GridSpec = Field(default_factory=GridSpec, description="Velocity grid")
    weight: WeightSpec = Field(default_factory=WeightSpec, description="Velocity weight")
    solver: SolveConfig = Field(default_factory=SolveConfig, description="Solver schedules")
    problem: ProblemConfig = Field(default_factory=ProblemConfig, description="Data of the layer problem")
    outputs: OutputConfig = Field(default_factory=OutputConfig, description="Artifacts")
    performance: PerformanceConfig = Field(default_factory=PerformanceConfig, description="Parallelism")
    logging: LoggingConfig = Field(default_factory=LoggingConfig, description="Logging")


def _format_validation_error(error: PydanticValidationError) -> str:
    parts = []
    for item in error.errors():
        location = ".".join(str(p) for p in item["loc"]) or "<root>"
        parts.append(f"{location}: {item['msg']}")
    return "; ".join(parts)


def _read_yaml(config_path: Path) -> Dict[str, Any]:
    try:
        with open(config_path, "r") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigurationError(f"Cannot parse {config_path}{where}: {e}") from e
    except OSError as e:
        raise ConfigurationError(f"Cannot read {config_path}: {e}") from e

    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{config_path} must contain a mapping of sections")
    return data


def _env_overrides() -> Dict[str, Dict[str, Any]]:
    overrides: Dict[str, Dict[str, Any]] = {}
    if os.environ.get(f"{ENV_PREFIX}OUT_DIR"):
        overrides.setdefault("outputs", {})["directory"] = os.environ[f"{ENV_PREFIX}OUT_DIR"]
    if os.environ.get(f"{ENV_PREFIX}CACHE_DIR"):
        overrides.setdefault("outputs", {})["cache_dir"] = os.environ[f"{ENV_PREFIX}CACHE_DIR"]
    if os.environ.get(f"{ENV_PREFIX}THREADS"):
        overrides.setdefault("performance", {})["threads"] = os.environ[f"{ENV_PREFIX}THREADS"]
    return overrides


def build_config(data: Dict[str, Any]) -> RunConfig:
    """Validate a raw mapping into a RunConfig, raising ConfigurationError."""

    try:
        return RunConfig.model_validate(data)
    except PydanticValidationError as e:
        raise ConfigurationError(f"Invalid configuration: {_format_validation_error(e)}") from e


def load_config(config_path: Optional[Path] = None) -> RunConfig:
    """Load configuration from a YAML file with environment overrides.

    Environment variables (``KLAYER_OUT_DIR``, ``KLAYER_CACHE_DIR``,
    ``KLAYER_THREADS``) take precedence over the file.
    """

    config_data: Dict[str, Any] = {}

    if config_path is not None:
        if not config_path.exists():
            raise ConfigurationError(f"Config file not found: {config_path}")
        if config_path.suffix.lower() not in (".yaml", ".yml"):
            raise ConfigurationError(f"Unsupported config file format: {config_path.suffix}")
        config_data = _read_yaml(config_path)

    for section, values in _env_overrides().items():
        current = config_data.get(section) or {}
        if not isinstance(current, dict):
            raise ConfigurationError(f"Section '{section}' must be a mapping")
        config_data[section] = {**current, **values}

    return build_config(config_data)


def save_config(config: RunConfig, config_path: Path) -> None:
    """Save configuration to a YAML file."""

    config_path.parent.mkdir(parents=True, exist_ok=True)

    with open(config_path, "w") as f:
        yaml.safe_dump(config.model_dump(mode="json"), f, default_flow_style=False, indent=2, sort_keys=False)


def get_default_config_path() -> Path:
    """Get default configuration file path."""

    locations = [
        Path.cwd() / "klayer.yaml",
        Path.cwd() / "klayer.yml",
        Path.home() / ".config" / "klayer" / "config.yaml",
    ]

    for location in locations:
        if location.exists():
            return location

    return locations[0]
