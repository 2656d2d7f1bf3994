"""
Experiment configuration.

An experiment is a JSON document validated by the pydantic models below.
Unknown keys are rejected and every default is written back out in the
resolved copy, so a run can always be repeated from its output directory.
"""

import json
import logging
import os
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from errors import ConfigError
from estimators import EstimatorKind, EstimatorSpec
from mixtures import MixtureKind
from objectives import MG1Config, ObjectiveKind, Oracle, create_oracle
from optimizers import FWSA, ScheduleConfig
from subproblems import ProxConfig, SetKind

logger = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).resolve().parent / "configs"
THREADS_ENV_VAR = "SIMPLEXGRAD_THREADS"

Axis = Literal["sigma", "R", "c", "n"]


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ObjectiveSpec(_Model):
    kind: ObjectiveKind = ObjectiveKind.QUADRATIC
    n: int = Field(20, ge=2, description="Dimension of a single block")
    blocks: Optional[List[int]] = Field(None, description="Block dimensions; overrides n")
    sigma: float = Field(0.0, ge=0, description="Gaussian evaluation noise")
    mg1: MG1Config = Field(default_factory=MG1Config)
    command: Optional[str] = None
    url: Optional[str] = None
    accepts_off_simplex: bool = False
    concurrent_safe: bool = False

    @model_validator(mode="after")
    def _check(self):
        if self.blocks is not None and (not self.blocks or min(self.blocks) < 2):
            raise ValueError("blocks must be a nonempty list of dimensions >= 2")
        if self.kind == ObjectiveKind.CUSTOM and not (self.command or self.url):
            raise ValueError("custom objectives need a command or a url")
        return self

    def block_dims(self, n: Optional[int] = None) -> Tuple[int, ...]:
        if self.kind == ObjectiveKind.MG1:
            return (self.mg1.n_support,)
        if n is not None:
            return (n,)
        return tuple(self.blocks) if self.blocks else (self.n,)

    def build(self, n: Optional[int] = None, sigma: Optional[float] = None) -> Oracle:
        """Oracle for this objective, optionally at another dimension or noise level."""
        return create_oracle(
            self.kind,
            self.block_dims(n),
            sigma=self.sigma if sigma is None else sigma,
            mg1=self.mg1,
            command=self.command,
            url=self.url,
            accepts_off_simplex=self.accepts_off_simplex,
            concurrent_safe=self.concurrent_safe,
        )


class MomentsSpec(_Model):
    mixture: MixtureKind = MixtureKind.DELTA_STAR
    n: int = Field(10, ge=2)
    base: Optional[List[float]] = Field(None, description="Base point; drawn from Dir(concentration * 1) when absent")
    base_concentration: float = Field(10.0, gt=0)
    eta: float = -1.0
    c_margin: float = Field(2.0, gt=1.0)
    repetitions: int = Field(100, ge=2, description="Samples for the empirical moment estimates")


class PointSpec(_Model):
    """One parameter point of the variance study."""

    sigma: float = Field(0.05, ge=0)
    R: int = Field(15, ge=1)
    c: float = Field(0.05, gt=0, lt=1)
    n: int = Field(20, ge=2)

    def with_value(self, axis: str, value: float) -> "PointSpec":
        cast = int if axis in ("R", "n") else float
        return PointSpec.model_validate({**self.model_dump(), axis: cast(value)})


class SweepSpec(_Model):
    axis: Axis
    values: List[float] = Field(..., min_length=1)
    at: PointSpec = Field(default_factory=PointSpec, description="Values of the other parameters")

    @model_validator(mode="after")
    def _check(self):
        for v in self.values:
            try:
                self.at.with_value(self.axis, v)
            except ValidationError as e:
                msg = e.errors()[0]["msg"]
                raise ValueError(f"sweep value {v} is out of range for '{self.axis}': {msg}")
        return self

    def points(self) -> List[PointSpec]:
        return [self.at.with_value(self.axis, v) for v in self.values]


def table_sweeps() -> List[SweepSpec]:
    """The four one-at-a-time sweeps of the variance study."""
    c_grid = [round(0.1 * (0.0141 / 0.1) ** (i / 9), 4) for i in range(10)]
    return [
        SweepSpec(axis="sigma", values=[round(0.01 * i, 2) for i in range(1, 11)]),
        SweepSpec(axis="R", values=list(range(10, 25, 2))),
        SweepSpec(axis="c", values=sorted(c_grid)),
        SweepSpec(axis="n", values=list(range(10, 100, 10)), at=PointSpec(R=30, c=0.1)),
    ]


class EstimateSpec(_Model):
    estimators: List[EstimatorSpec] = Field(default_factory=lambda: [EstimatorSpec()])
    point: PointSpec = Field(default_factory=PointSpec)
    sweeps: List[SweepSpec] = Field(default_factory=list, description="Empty runs the single point")
    points: int = Field(20, ge=1, description="Base points per parameter point")
    base_concentration: float = Field(10.0, gt=0)
    trials: int = Field(50, ge=2)


class SetSpec(_Model):
    kind: SetKind = SetKind.SIMPLEX
    baseline: Optional[List[float]] = Field(None, description="Defaults to the uniform vector")
    baseline_kind: Literal["fixed", "shifted_uniform"] = Field(
        "fixed", description="shifted_uniform draws q_i = 1 + U(0,1), normalized, afresh for every trial"
    )
    radius: float = Field(0.05, ge=0)
    powers: List[int] = Field(default_factory=lambda: [1, 2])
    lower: float = 0.8
    upper: float = 1.2
    support: Optional[List[float]] = Field(None, description="Defaults to the queue support points, else 1..n")

    @model_validator(mode="after")
    def _check(self):
        if self.baseline_kind == "shifted_uniform" and self.baseline is not None:
            raise ValueError("a fixed baseline cannot be combined with baseline_kind 'shifted_uniform'")
        return self


class OptimizeSpec(_Model):
    algorithm: Literal["fwsa", "mdsa"] = FWSA
    estimator: EstimatorSpec = Field(default_factory=EstimatorSpec)
    set: SetSpec = Field(default_factory=SetSpec)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    prox: ProxConfig = Field(default_factory=ProxConfig)
    p_init: Optional[List[float]] = Field(None, description="Defaults to the set baseline or the uniform vector")
    trials: int = Field(1, ge=1)


class OrderingSpec(_Model):
    reference: EstimatorSpec = Field(default_factory=EstimatorSpec)
    others: List[EstimatorSpec] = Field(
        default_factory=lambda: [
            EstimatorSpec(kind=EstimatorKind.SFE, mixture=MixtureKind.DELTA_STAR),
            EstimatorSpec(kind=EstimatorKind.FFE, mixture=MixtureKind.DELTA_STAR),
        ]
    )
    point: PointSpec = Field(default_factory=PointSpec)
    factor: float = Field(10.0, gt=0)


class BenchSpec(_Model):
    estimator: EstimatorSpec = Field(default_factory=EstimatorSpec)
    sweeps: List[SweepSpec] = Field(default_factory=table_sweeps)
    points: int = Field(20, ge=1)
    base_concentration: float = Field(10.0, gt=0)
    trials: int = Field(20, ge=2)
    expected: Dict[str, float] = Field(default_factory=lambda: {"sigma": 2.0, "R": -1.0, "c": -2.0, "n": 2.0})
    tolerance: Dict[str, float] = Field(default_factory=lambda: {"sigma": 0.3, "R": 0.3, "c": 0.3, "n": 0.4})
    ordering: Optional[OrderingSpec] = None


class ExperimentConfig(_Model):
    seed: int = Field(0, ge=0, lt=2**64)
    objective: ObjectiveSpec = Field(default_factory=ObjectiveSpec)
    moments: MomentsSpec = Field(default_factory=MomentsSpec)
    estimate: EstimateSpec = Field(default_factory=EstimateSpec)
    optimize: OptimizeSpec = Field(default_factory=OptimizeSpec)
    bench: BenchSpec = Field(default_factory=BenchSpec)
    output: str = "results"


def parse_config(data: Union[str, dict]) -> ExperimentConfig:
    """
    Validate a configuration given as a JSON string or a dict.

    Raises:
        ConfigError: malformed JSON or a value that fails validation
    """
    try:
        if isinstance(data, str):
            return ExperimentConfig.model_validate_json(data)
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}")


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"configuration file '{path}' does not exist")
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"could not read {path}: {e}")
    return parse_config(text)


def load_config_template(template_name: str) -> ExperimentConfig:
    """
    Load one of the bundled configurations from the configs directory.

    Args:
        template_name: File name without the .json suffix

    Returns:
        ExperimentConfig: the parsed configuration
    """
    path = CONFIG_DIR / f"{template_name}.json"
    if not path.exists():
        available = ", ".join(sorted(p.stem for p in CONFIG_DIR.glob("*.json")))
        raise ConfigError(f"no bundled configuration '{template_name}' (available: {available})")
    return load_config(path)


def dump_config(cfg: ExperimentConfig) -> str:
    """Resolved configuration with every default materialized."""
    return json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def resolve_threads(threads: Optional[int]) -> int:
    """Worker count from --threads, else SIMPLEXGRAD_THREADS, else 1."""
    if threads is not None:
        if threads < 1:
            raise ConfigError("--threads must be at least 1")
        return threads
    raw = os.getenv(THREADS_ENV_VAR)
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV_VAR} must be an integer, got {raw!r}")
    if value < 1:
        raise ConfigError(f"{THREADS_ENV_VAR} must be at least 1")
    return value
