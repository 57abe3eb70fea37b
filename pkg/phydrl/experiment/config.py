"""
Experiment configuration.

Config files are flat ``section.key=value`` text files read with
`dotenv.dotenv_values`; values are JSON where they parse as JSON (numbers,
booleans, bracketed row lists) and plain strings otherwise. Environment
variables ``PHYDRL_<SECTION>__<KEY>`` override file values.
"""

import json
import logging
import os
from pathlib import Path
from typing import Dict, List, Literal, Mapping, Optional

from deepdiff import DeepDiff
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from phydrl.agents.ddpg import AgentConfig
from phydrl.agents.trainer import TrainingSection
from phydrl.analysis.theorem import AnalysisSection
from phydrl.core.phy_core import RewardConfig
from phydrl.experiment import published
from phydrl.plant.cartpole import PlantParams, linearize
from phydrl.safety.safety_sets import SafetySpec, build_normalized
from phydrl.synthesis.lmi import SynthesisOptions, SynthesisProblem
from phydrl.util.errors import ConfigError, PhyDrlError

logger = logging.getLogger(__name__)

ENV_PREFIX = "PHYDRL_"
RESOLVED_CONFIG = "resolved_config.env"


class ExperimentSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "cartpole"
    seed: int = 0
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    out: str = "runs/cartpole"


class SafetySection(BaseModel):
    """Safe set ``v_lower <= D s - v <= v_upper``; defaults to ``|x| <= 0.6``, ``|theta| <= 0.4``."""

    model_config = ConfigDict(extra="forbid")

    D: List[List[float]] = Field(default_factory=lambda: published.safety_spec().D.tolist())
    v: List[float] = Field(default_factory=lambda: [0.0, 0.0])
    v_upper: List[float] = Field(default_factory=lambda: [published.POSITION_BOUND, published.ANGLE_BOUND])
    v_lower: List[float] = Field(default_factory=lambda: [-published.POSITION_BOUND, -published.ANGLE_BOUND])

    def spec(self) -> SafetySpec:
        return SafetySpec(D=self.D, v=self.v, v_upper=self.v_upper, v_lower=self.v_lower)


class SynthesisSection(SynthesisOptions):
    model_config = ConfigDict(extra="forbid")

    alpha: float = Field(published.ALPHA, gt=0.0, lt=1.0)
    model: Literal["published", "linearized"] = "published"


class EvalSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    episodes: int = Field(10, ge=1)
    horizon: int = Field(1_000, ge=0)
    seed: int = 12345


class CompareSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    threshold: float = -2_000.0


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    experiment: ExperimentSection = Field(default_factory=ExperimentSection)
    plant: PlantParams = Field(default_factory=PlantParams)
    safety: SafetySection = Field(default_factory=SafetySection)
    synthesis: SynthesisSection = Field(default_factory=SynthesisSection)
    agent: AgentConfig = Field(default_factory=AgentConfig)
    reward: RewardConfig = Field(default_factory=RewardConfig)
    training: TrainingSection = Field(default_factory=TrainingSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    analysis: AnalysisSection = Field(default_factory=AnalysisSection)
    compare: CompareSection = Field(default_factory=CompareSection)

    @model_validator(mode="after")
    def check_safety(self):
        spec = self.safety.spec()
        if spec.n != 4:
            raise ValueError(f"Safety constraints must act on the 4-dimensional cart-pole state, got {spec.n}")
        return self

    @model_validator(mode="after")
    def tie_action_scale(self):
        # The actor saturates where the plant clamps.
        limit = self.plant.force_limit
        if self.agent.action_scale == limit:
            return self
        if "action_scale" in self.agent.model_fields_set:
            raise ValueError(f"agent.action_scale={self.agent.action_scale} must equal plant.force_limit={limit}")
        self.agent = self.agent.model_copy(update={"action_scale": limit})
        return self

    @property
    def alpha(self) -> float:
        return self.synthesis.alpha

    @property
    def residual(self) -> bool:
        return self.training.residual

    def nominal_model(self) -> tuple:
        if self.synthesis.model == "linearized":
            return linearize(self.plant)
        return published.A.copy(), published.B.copy()

    def synthesis_problem(self) -> SynthesisProblem:
        A, B = self.nominal_model()
        return SynthesisProblem(A=A, B=B, alpha=self.alpha, ns=build_normalized(self.safety.spec()))


SECTIONS = {name: field.annotation for name, field in ExperimentConfig.model_fields.items()}


def parse_value(raw: Optional[str]):
    if raw is None:
        return None
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _assign(nested: Dict[str, dict], section: str, key: str, raw, source: str) -> None:
    if section not in SECTIONS:
        raise ConfigError(f"Unknown config section '{section}' in {source}")
    fields = {name.lower(): name for name in SECTIONS[section].model_fields}
    if key.lower() not in fields:
        raise ConfigError(f"Unknown config key '{section}.{key}' in {source}")
    key = fields[key.lower()]
    nested.setdefault(section, {})[key] = parse_value(raw)


def load_config(
    path=None,
    environ: Optional[Mapping[str, str]] = None,
    seed: Optional[int] = None,
) -> ExperimentConfig:
    """
    Build the experiment config from `path`, environment overrides and an
    optional seed override.

    Raises:
        ConfigError: The file is missing, names an unknown key, or a value
            fails validation.
    """
    nested: Dict[str, dict] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file {path} does not exist")
        for dotted, raw in dotenv_values(path).items():
            section, _, key = dotted.partition(".")
            if not key:
                raise ConfigError(f"Config key '{dotted}' in {path} lacks a section prefix")
            _assign(nested, section, key, raw, str(path))

    environ = os.environ if environ is None else environ
    for name, raw in environ.items():
        if name.startswith(ENV_PREFIX) and "__" in name:
            section, _, key = name[len(ENV_PREFIX):].partition("__")
            _assign(nested, section.lower(), key.lower(), raw, f"environment variable {name}")

    if seed is not None:
        nested.setdefault("experiment", {})["seed"] = seed

    try:
        return ExperimentConfig(**nested)
    except (ValidationError, PhyDrlError, ValueError) as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def flatten(cfg: ExperimentConfig) -> Dict[str, object]:
    """Every config value keyed by ``section.key``, defaults included."""
    flat = {}
    for section, values in cfg.model_dump(mode="json").items():
        for key, value in values.items():
            flat[f"{section}.{key}"] = value
    return flat


def _format(value) -> str:
    if isinstance(value, str):
        return value
    return json.dumps(value)


def write_resolved(cfg: ExperimentConfig, out_dir) -> Path:
    """
    Write `resolved_config.env`. An existing snapshot that differs is
    reported as a warning before being replaced.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_CONFIG
    new = flatten(cfg)
    if path.exists():
        old = {key: parse_value(raw) for key, raw in dotenv_values(path).items()}
        diff = DeepDiff(old, new, ignore_order=True)
        if diff:
            logger.warning(f"Overwriting {path}, which differs from this run: {diff.to_json()}")
    lines = [f"{key}={_format(value)}" for key, value in new.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def config_for(cfg: ExperimentConfig, **updates: dict) -> ExperimentConfig:
    """Copy of `cfg` with per-section field updates, revalidated."""
    data = cfg.model_dump()
    for section, values in updates.items():
        data[section].update(values)
    if "action_scale" not in updates.get("agent", {}):
        data["agent"]["action_scale"] = data["plant"]["force_limit"]
    return ExperimentConfig(**data)
