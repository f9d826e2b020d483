"""
Configuration models and loading

Config files use dotenv syntax with the section in front of a double
underscore, e.g.

    MESH__N_EDGE=5
    SOLVER__BACKEND__KIND=kmeans
    SOLVER__SCHEDULE__FD_FINAL=0.4

Values are merged as: model defaults < config file < DDSEARCH_* environment
variables (same key layout) < explicit overrides (CLI flags).
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from dotenv import dotenv_values, find_dotenv, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError
from .models import BackendKind, ConvergenceMode, MaterialParams

logger = logging.getLogger(__name__)

ENV_PREFIX = "DDSEARCH_"


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class MeshSettings(_Section):
    side: float = Field(10.0, gt=0, description="cube side length in mm")
    n_edge: int = Field(5, ge=1, description="elements per cube edge")
    theta: float = Field(2.0, description="twist of the top face in degrees")


class MaterialSettings(_Section):
    E: float = Field(1000.0, gt=0)
    alpha: float = 500.0

    def to_params(self) -> MaterialParams:
        return MaterialParams(E=self.E, alpha=self.alpha)


class DataSettings(_Section):
    n_points: int = Field(10_000, ge=1)
    seed: int = 0
    bound_lo: float = -0.025
    bound_hi: float = 0.025
    path: Optional[str] = Field(None, description="load this .mdd/.csv file instead of sampling")

    @model_validator(mode="after")
    def _check_bounds(self):
        if self.bound_lo > self.bound_hi:
            raise ValueError(f"bound_lo {self.bound_lo} exceeds bound_hi {self.bound_hi}")
        return self

    @property
    def bounds(self) -> Tuple[float, float]:
        return (self.bound_lo, self.bound_hi)


class MetricSettings(_Section):
    kind: Literal["pca", "identity"] = "pca"
    fallback_scale: float = Field(1000.0, gt=0, description="E0 of the E0*I fallback and of the identity metric")


class BackendSettings(_Section):
    kind: BackendKind = BackendKind.LINEAR
    leaf_size: int = Field(16, ge=1)
    branching: int = Field(4, ge=2)
    graph_k: int = Field(10, ge=1)
    builder: BackendKind = BackendKind.KMEANS
    builder_fd: float = Field(0.6, ge=0.0, le=1.0)
    f_s: Optional[int] = Field(None, ge=1)
    restarts: int = Field(0, ge=0)
    seed: int = 0
    index_path: Optional[str] = None

    @property
    def label(self) -> str:
        if self.kind is BackendKind.KDTREE:
            return f"kdtree-l{self.leaf_size}"
        if self.kind is BackendKind.KMEANS:
            return f"kmeans-k{self.branching}"
        if self.kind is BackendKind.GRAPH:
            bound = "inf" if self.f_s is None else self.f_s
            return f"graph-k{self.graph_k}-fs{bound}"
        return "linear"

    def index_kwargs(self) -> Dict[str, Any]:
        return {
            "leaf_size": self.leaf_size, "branching": self.branching, "graph_k": self.graph_k,
            "builder": self.builder, "builder_fd": self.builder_fd, "seed": self.seed,
        }


class ScheduleSettings(_Section):
    fd_start: float = Field(0.0, ge=0.0, le=1.0)
    fd_final: float = Field(1.0, ge=0.0, le=1.0)
    ramp: int = Field(1, ge=1, description="iterations to reach fd_final; 1 means constant")


class SkipSettings(_Section):
    enabled: bool = False
    max_delta: Optional[float] = Field(None, ge=0.0)
    allow_heuristic: bool = Field(False, description="allow skips based on an approximate runner-up distance")
    delta_as_printed: bool = False


class SolverSettings(_Section):
    """Settings of one DD run"""
    max_iterations: int = Field(30, ge=1)
    backend: BackendSettings = Field(default_factory=BackendSettings)
    schedule: ScheduleSettings = Field(default_factory=ScheduleSettings)
    skip: SkipSettings = Field(default_factory=SkipSettings)
    seed: int = 0
    convergence: ConvergenceMode = ConvergenceMode.AUTO
    stagnation_window: int = Field(3, ge=1)
    stagnation_rtol: float = Field(1e-10, ge=0.0)
    threads: int = Field(1, ge=1)
    scatter_iterations: List[int] = [1, 5, 20]

    @field_validator("scatter_iterations", mode="before")
    @classmethod
    def _parse_iterations(cls, value):
        return _split_list(value)

    @property
    def exact(self) -> bool:
        """Every query of the run is an exact nearest-neighbor query"""
        if self.backend.kind is BackendKind.GRAPH:
            return False
        if self.backend.kind is BackendKind.LINEAR:
            return True
        return self.schedule.fd_final == 1.0 and (self.schedule.ramp == 1 or self.schedule.fd_start == 1.0)


class RunSettings(_Section):
    mesh: MeshSettings = Field(default_factory=MeshSettings)
    material: MaterialSettings = Field(default_factory=MaterialSettings)
    data: DataSettings = Field(default_factory=DataSettings)
    metric: MetricSettings = Field(default_factory=MetricSettings)
    solver: SolverSettings = Field(default_factory=SolverSettings)
    out: str = "results"
    run_id: Optional[str] = None
    reference: bool = Field(False, description="also solve the model-based problem and compare strains")


class ExperimentSpec(_Section):
    """A grid of DD runs sharing one base configuration"""
    name: Literal["refinement-study", "fd-sweep", "kmeans-sweep", "graph-sweep", "backend-comparison"]
    sizes: List[int] = [1000, 10_000]
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2], min_length=1)
    fd_values: List[float] = [0.0, 0.2, 0.4, 0.6, 1.0]
    branchings: List[int] = [4]
    graph_ks: List[int] = [10]
    step_bounds: List[Optional[int]] = [None]
    backends: List[BackendSettings] = []
    out: str = "bench"
    base: RunSettings = Field(default_factory=RunSettings)

    @field_validator("sizes", "seeds", "fd_values", "branchings", "graph_ks", mode="before")
    @classmethod
    def _parse_lists(cls, value):
        return _split_list(value)

    @field_validator("step_bounds", mode="before")
    @classmethod
    def _parse_step_bounds(cls, value):
        value = _split_list(value)
        return [None if str(v).lower() in ("none", "inf", "") else v for v in value]

    @field_validator("backends", mode="before")
    @classmethod
    def _parse_backends(cls, value):
        return parse_backend_grid(value) if isinstance(value, str) else value

    @field_validator("sizes", "branchings", "graph_ks")
    @classmethod
    def _positive(cls, value):
        if any(v < 1 for v in value):
            raise ValueError(f"values must be >= 1, got {value}")
        return value

    @field_validator("fd_values")
    @classmethod
    def _unit_interval(cls, value):
        if any(not 0.0 <= v <= 1.0 for v in value):
            raise ValueError(f"f_d values must lie in [0, 1], got {value}")
        return value


def parse_backend_grid(text: str) -> List[Dict[str, Any]]:
    """`kdtree:leaf_size=16;kmeans:branching=4,seed=1` -> list of BackendSettings fields"""
    grid = []
    for entry in filter(None, (part.strip() for part in text.split(";"))):
        kind, _, rest = entry.partition(":")
        fields: Dict[str, Any] = {"kind": kind.strip()}
        for pair in filter(None, (p.strip() for p in rest.split(","))):
            key, sep, value = pair.partition("=")
            if not sep:
                raise ConfigError(f"backend grid entry '{pair}' is not key=value")
            fields[key.strip().lower()] = value.strip()
        grid.append(fields)
    return grid


def _nest(flat: Dict[str, Optional[str]], source: str) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        if value is None:
            raise ConfigError(f"{source}: key '{key}' has no value")
        parts = [p.lower() for p in key.split("__")]
        if not all(parts):
            raise ConfigError(f"{source}: malformed key '{key}'")
        node = nested
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{source}: key '{key}' conflicts with a plain value")
        node[parts[-1]] = value
    return nested


def _merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Nested dict of a dotenv-syntax config file"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return _nest(dict(dotenv_values(path)), str(path))


def environment_overrides(model=RunSettings) -> Dict[str, Any]:
    """DDSEARCH_SECTION__KEY variables (after loading a .env file, if present)"""
    load_dotenv(find_dotenv(usecwd=True))
    flat = {}
    for key, value in os.environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX):]
        # plain DDSEARCH_* switches (e.g. DDSEARCH_RUN_SLOW) are not settings
        if "__" not in name and name.lower() not in model.model_fields:
            continue
        flat[name] = value
    return _nest(flat, "environment")


def _validate(model, values: Dict[str, Any], source: str):
    try:
        return model.model_validate(values)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration in {source}:\n{exc}") from exc


def load_settings(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Dict[str, Any]] = None,
    use_env: bool = True,
) -> RunSettings:
    """RunSettings from defaults, a config file, the environment and overrides"""
    values: Dict[str, Any] = {}
    source = "defaults"
    if path is not None:
        values = read_config_file(path)
        source = str(path)
    if use_env:
        values = _merge(values, environment_overrides())
    if overrides:
        values = _merge(values, overrides)
    settings = _validate(RunSettings, values, source)
    logger.debug("settings from %s: %s", source, settings.model_dump())
    return settings


def load_experiment(path: Union[str, Path], overrides: Optional[Dict[str, Any]] = None, use_env: bool = True) -> ExperimentSpec:
    """ExperimentSpec from an EXPERIMENT__* section plus base run sections"""
    values = read_config_file(path)
    experiment = values.pop("experiment", None)
    if not isinstance(experiment, dict):
        raise ConfigError(f"{path}: missing EXPERIMENT__NAME")
    if use_env:
        values = _merge(values, environment_overrides())
    if overrides:
        values = _merge(values, overrides)
    experiment["base"] = values
    return _validate(ExperimentSpec, experiment, str(path))
