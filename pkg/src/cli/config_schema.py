#!/usr/bin/env python3
"""
Experiment configuration schema - stochesp
YAML experiment files validated by pydantic models that forbid unknown keys.
Every violated constraint is reported at once, with the line of the offending key.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from core.error_handler import ConfigError
from core.settings import settings
from core.utilities import HashUtilities
from services.input_service import POINTWISE_MAPS, CausalFilter, HiddenSampler
from services.sequence_space import BaseMetric, WeightVector, default_horizon, make_weights
from services.state_models import StateModel, build_model

EXPERIMENT_NAMES = ("converge", "certify", "consistency", "counterexample_d", "esn_gap", "stationarity")

REQUIRED_SECTIONS: Dict[str, Tuple[str, ...]] = {
    "converge": ("model", "inputs", "weights"),
    "certify": ("model", "inputs", "weights"),
    "consistency": ("model", "inputs", "weights"),
    "counterexample_d": ("counterexample",),
    "esn_gap": ("inputs", "weights"),
    "stationarity": ("model", "inputs", "weights"),
}


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GarchSpec(StrictModel):
    kind: Literal["garch"]
    omega: float = Field(ge=0)
    alpha: float = Field(ge=0)
    beta: float = Field(ge=0)


class LinearTestSpec(StrictModel):
    kind: Literal["linear_test"]
    a: float


class EsnSpec(StrictModel):
    kind: Literal["esn"]
    A: List[List[float]]
    C: List[List[float]]
    b: Optional[List[float]] = None


class AffineSpec(StrictModel):
    kind: Literal["affine"]
    input_dim: int = Field(ge=1)
    a_coeffs: List[Any] = Field(min_length=1, max_length=3)
    b_coeffs: List[Any] = Field(min_length=1, max_length=3)


class EulerSdeSpec(StrictModel):
    kind: Literal["euler_sde"]
    h: float = Field(gt=0)
    alpha_knots: List[float] = Field(min_length=2)
    alpha_values: List[float] = Field(min_length=2)
    beta_knots: List[float] = Field(min_length=2)
    beta_values: List[float] = Field(min_length=2)
    euler_form: Literal["paper", "drifted"] = "drifted"


ModelSpec = Annotated[Union[GarchSpec, LinearTestSpec, EsnSpec, AffineSpec, EulerSdeSpec],
                      Field(discriminator="kind")]


class SamplerSpec(StrictModel):
    dist: Literal["std_normal", "uniform", "rademacher", "student_t"] = "std_normal"
    dim: int = Field(default=1, ge=1)
    low: float = 0.0
    high: float = 1.0
    nu: float = Field(default=5.0, gt=0)
    scale: float = Field(default=1.0, gt=0)


class FilterSpec(StrictModel):
    kind: Literal["identity", "fir", "pointwise", "compose", "time_scale"] = "identity"
    kernel: Optional[List[Any]] = None
    phi: Optional[str] = None
    stages: Optional[List["FilterSpec"]] = None
    start: float = 1.0
    end: float = 1.0

    @model_validator(mode="after")
    def _kind_fields(self):
        if self.kind == "fir" and not self.kernel:
            raise ValueError("fir filter needs a kernel")
        if self.kind == "pointwise" and self.phi not in POINTWISE_MAPS:
            raise ValueError(f"pointwise filter needs phi in {sorted(POINTWISE_MAPS)}")
        if self.kind == "compose" and not self.stages:
            raise ValueError("compose filter needs a non-empty stages list")
        return self


FilterSpec.model_rebuild()


class InputSpec(StrictModel):
    sampler: SamplerSpec = SamplerSpec()
    filter: FilterSpec = FilterSpec()


class WeightSpec(StrictModel):
    gamma: float = Field(gt=1)
    horizon: Optional[int] = Field(default=None, ge=1)
    tail_tol: Optional[float] = Field(default=None, gt=0, lt=1)


class MetricSpec(StrictModel):
    kind: Literal["euclidean", "diag_scaled"] = "euclidean"
    scale: Optional[List[float]] = None

    @model_validator(mode="after")
    def _scale_present(self):
        if self.kind == "diag_scaled" and not self.scale:
            raise ValueError("diag_scaled metric needs a scale list")
        return self


class RunSpec(StrictModel):
    p: float = Field(default=1.0, ge=1)
    n_paths: int = Field(default=1024, ge=1)
    tol: Optional[float] = Field(default=None, gt=0)
    max_steps: Optional[int] = Field(default=None, ge=1)
    ot: Literal["auto", "quantile", "assignment", "sinkhorn"] = "auto"
    threads: Optional[int] = Field(default=None, ge=1)
    state_metric: MetricSpec = MetricSpec()
    output_dir: str = "results"
    dump_paths: int = Field(default=256, ge=0)
    certified: bool = False


class ChecksSpec(StrictModel):
    expected_mean: Optional[float] = None
    mean_rel_tol: float = Field(default=0.05, gt=0)
    fit_q_max: Optional[float] = Field(default=None, gt=0)
    envelope_slack: float = Field(default=0.2, ge=0)
    ergodic_steps: Optional[int] = Field(default=None, ge=1)
    uniqueness: bool = False
    uniqueness_factor: float = Field(default=3.0, gt=0)
    stationarity: bool = False
    max_lag: int = Field(default=3, ge=0)
    max_distance: Optional[float] = Field(default=None, gt=0)
    self_consistency: bool = True


class CertifySpec(StrictModel):
    garch_kappa: bool = True
    contractivity: bool = True
    bounded_input: bool = True
    theorem: bool = True
    lipschitz: bool = False
    monte_carlo: bool = False
    n_samples: Optional[int] = Field(default=None, ge=2)
    n_state_pairs: Optional[int] = Field(default=None, ge=1)


class CounterexampleSpec(StrictModel):
    alpha: float
    gamma: float
    p: float
    horizon: int = Field(default=24, ge=2)
    threshold: float = Field(default=1e6, gt=0)


class EsnGapSpec(StrictModel):
    c: float = Field(default=0.01, gt=0)
    C: Optional[List[List[float]]] = None
    b: Optional[List[float]] = None
    d_grid: int = Field(default=81, ge=3)


class ExperimentConfig(StrictModel):
    experiment: Literal["converge", "certify", "consistency", "counterexample_d", "esn_gap", "stationarity"]
    seeds: List[int] = Field(default_factory=lambda: [0], min_length=1)
    model: Optional[ModelSpec] = None
    inputs: Optional[InputSpec] = None
    weights: Optional[WeightSpec] = None
    run: RunSpec = RunSpec()
    checks: ChecksSpec = ChecksSpec()
    certify: Optional[CertifySpec] = None
    counterexample: Optional[CounterexampleSpec] = None
    esn_gap: Optional[EsnGapSpec] = None

    @field_validator("seeds")
    @classmethod
    def _seed_range(cls, seeds):
        for seed in seeds:
            if not 0 <= seed < 2 ** 64:
                raise ValueError(f"seed {seed} is not a 64-bit unsigned integer")
        return seeds


@dataclass
class LoadedConfig:
    config: ExperimentConfig
    path: Path
    text: str

    @property
    def config_hash(self) -> str:
        return HashUtilities.sha256_text(self.text)


def _line_map(node, prefix: tuple = (), lines: Optional[Dict[tuple, int]] = None) -> Dict[tuple, int]:
    """(key path) -> 1-based line of the key (or sequence item) in the YAML source"""
    lines = {} if lines is None else lines
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = prefix + (key_node.value,)
            lines[path] = key_node.start_mark.line + 1
            _line_map(value_node, path, lines)
    elif isinstance(node, yaml.SequenceNode):
        for index, item in enumerate(node.value):
            path = prefix + (index,)
            lines[path] = item.start_mark.line + 1
            _line_map(item, path, lines)
    return lines


def _locate(loc: tuple, lines: Dict[tuple, int]) -> int:
    """Deepest line known along a pydantic error location; union tags are skipped"""
    best = 1
    path: tuple = ()
    for part in loc:
        candidate = path + (part,)
        if candidate in lines:
            path = candidate
            best = lines[path]
    return best


def _format_loc(loc: tuple) -> str:
    return ".".join(str(part) for part in loc) or "<root>"


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark or e.context_mark
        line = mark.line + 1 if mark is not None else 1
        raise ConfigError(f"{source}: YAML syntax error", [f"line {line}: {e.problem or e}"]) from e
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: expected a mapping of sections", ["line 1: document is not a mapping"])

    lines = _line_map(root) if root is not None else {}
    diagnostics: List[str] = []
    experiment = data.get("experiment")
    for section in REQUIRED_SECTIONS.get(experiment, ()):
        if section not in data:
            diagnostics.append(f"line {lines.get(('experiment',), 1)}: experiment '{experiment}' "
                               f"requires a '{section}' section")
    try:
        config = ExperimentConfig.model_validate(data)
    except ValidationError as e:
        for error in e.errors():
            loc = tuple(error["loc"])
            diagnostics.append(f"line {_locate(loc, lines)}: {_format_loc(loc)}: {error['msg']}")
        config = None
    if diagnostics:
        raise ConfigError(f"{source}: {len(diagnostics)} configuration problem(s)", diagnostics)
    return config


def load_config(config_path) -> LoadedConfig:
    path = Path(config_path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    return LoadedConfig(config=parse_config_text(text, str(path)), path=path, text=text)


def apply_overrides(config: ExperimentConfig, out: Optional[str] = None, seed: Optional[int] = None,
                    ot: Optional[str] = None, threads: Optional[int] = None) -> ExperimentConfig:
    """CLI flags win over the file"""
    run_updates: Dict[str, Any] = {}
    if out is not None:
        run_updates["output_dir"] = out
    if ot is not None:
        run_updates["ot"] = ot
    if threads is not None:
        run_updates["threads"] = threads
    updates: Dict[str, Any] = {"run": config.run.model_copy(update=run_updates)}
    if seed is not None:
        updates["seeds"] = [seed]
    return config.model_copy(update=updates)


# ---- builders: validated specs -> library objects ----

def build_state_model(spec) -> StateModel:
    params = spec.model_dump(exclude={"kind"})
    if spec.kind == "esn" and params.get("b") is None:
        params["b"] = np.zeros(len(spec.A))
    return build_model(spec.kind, **params)


def build_sampler(spec: SamplerSpec, seed: int) -> HiddenSampler:
    return HiddenSampler(dist=spec.dist, dim=spec.dim, seed=seed, low=spec.low, high=spec.high,
                         nu=spec.nu, scale=spec.scale)


def build_filter(spec: FilterSpec, dim: int) -> CausalFilter:
    if spec.kind == "identity":
        return CausalFilter.identity(dim)
    if spec.kind == "fir":
        return CausalFilter.fir(spec.kernel)
    if spec.kind == "pointwise":
        return CausalFilter.pointwise(spec.phi, dim)
    if spec.kind == "time_scale":
        return CausalFilter.time_scale(spec.start, spec.end, dim)
    stages = []
    for stage in spec.stages:
        built = build_filter(stage, dim)
        stages.append(built)
        dim = built.output_dim
    return CausalFilter.compose(*stages)


def build_weights(spec: WeightSpec) -> WeightVector:
    horizon = spec.horizon
    if horizon is None:
        horizon = default_horizon(spec.gamma, spec.tail_tol or settings.truncation_tol)
    return make_weights(spec.gamma, horizon)


def build_metric(spec: MetricSpec) -> BaseMetric:
    if spec.kind == "diag_scaled":
        return BaseMetric.diag_scaled(spec.scale)
    return BaseMetric.euclidean()
