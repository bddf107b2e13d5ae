"""YAML run configuration, validated before any work starts.

A file holds any subset of the sections ``seed``, ``output``, ``classes``,
``channel``, ``scenario``, ``slicing``, ``train``, ``oracle`` and ``mdp``.
Unknown keys are errors; every error names the offending key path.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import Literal

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .env import ChannelProcess, ServiceClassSpec, TrafficModel, default_class, load_trace_mix
from .oracle import TabularMDP
from .scheduler import RBProfile, ScenarioSpec, Slice, SliceConfig, UEConfig, canonical_policy
from .trainer import TrainConfig

ClassId = Literal["embb", "urllc", "mmtc", "xr"]


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _check_weights(w):
    if w is not None and abs(sum(w) - 1.0) > 1e-9:
        raise ValueError(f"weights {tuple(w)} must sum to 1 within 1e-9")
    return w


class ClassOverride(_Strict):
    tpt_bound_B: float | None = Field(None, ge=0, le=1)
    tsls_bound_L: int | None = Field(None, ge=1)
    weights: tuple[float, float, float] | None = None
    rate_mbps: float | None = Field(None, ge=0)
    burst_prob: float | None = Field(None, gt=0, le=1)
    learning_rate: float | None = Field(None, gt=0)
    max_buffer_bytes: float | None = Field(None, gt=0)

    @field_validator("weights")
    @classmethod
    def _weights(cls, v):
        return _check_weights(v)


class ChannelSection(_Strict):
    source: Literal["random_walk", "constant", "trace"] = "random_walk"
    cqi: int | None = Field(None, ge=1, le=15)
    cqi_min: int = Field(1, ge=1, le=15)
    cqi_max: int = Field(15, ge=1, le=15)
    step_prob: float = Field(0.5, ge=0, le=1)
    start: int | None = Field(None, ge=1, le=15)
    traces: list[str] = []
    column: str = "cqi"

    @model_validator(mode="after")
    def _consistent(self):
        if self.cqi_min > self.cqi_max:
            raise ValueError("cqi_min must not exceed cqi_max")
        if self.source == "constant" and self.cqi is None:
            raise ValueError("constant channel needs 'cqi'")
        if self.source == "trace" and not self.traces:
            raise ValueError("trace channel needs 'traces'")
        return self

    def build(self, base_dir: Path | None = None) -> ChannelProcess:
        if self.source == "constant":
            return ChannelProcess.constant(self.cqi)
        if self.source == "trace":
            paths = [Path(p) if Path(p).is_absolute() or base_dir is None else base_dir / p for p in self.traces]
            return load_trace_mix(paths, self.column)
        return ChannelProcess.random_walk(self.cqi_min, self.cqi_max, self.step_prob, self.start)


class UEGroup(_Strict):
    class_id: ClassId = Field(alias="class")
    count: int = Field(1, ge=1)
    model: str = "oracle"
    channel: ChannelSection | None = None


class RBProfileSection(_Strict):
    high: int = Field(9, ge=1)
    low: int = Field(2, ge=0)
    zero: int = Field(0, ge=0)


class ScenarioSection(_Strict):
    name: str = ""
    total_rbgs: int = Field(ge=1)
    rb_profile: RBProfileSection = RBProfileSection()
    top_R: int | None = Field(None, ge=1)
    horizon: int = Field(10_000, ge=0)
    window: int = Field(1, ge=1)
    eta: float = Field(0.05, gt=0)
    tpt_bound_B: float = Field(0.9, ge=0, le=1)
    ues: list[UEGroup] = Field(min_length=1)


class SliceSection(_Strict):
    name: str
    classes: list[ClassId] = Field(min_length=1)
    rbgs: int = Field(ge=0)
    scheduler: str = "prop_fair"
    top_R: int | None = Field(None, ge=1)

    @field_validator("scheduler")
    @classmethod
    def _known(cls, v):
        return canonical_policy(v)


class SlicingSection(_Strict):
    total_rbgs: int | None = Field(None, ge=1)
    slices: list[SliceSection] = Field(min_length=1)

    @model_validator(mode="after")
    def _shares(self):
        total = sum(s.rbgs for s in self.slices)
        if self.total_rbgs is not None and total != self.total_rbgs:
            raise ValueError(f"slice shares sum to {total}, expected total_rbgs={self.total_rbgs}")
        return self


class TrainSection(_Strict):
    class_id: ClassId = Field("embb", alias="class")
    episodes_total: int = Field(20_000, ge=1)
    episode_len: int = Field(5_000, ge=1)
    batch_size: int = Field(20, ge=1)
    lr: float | None = Field(None, gt=0)
    lr_decay: bool = False
    m: float = Field(5.0, gt=0)
    gamma: float = Field(0.99, ge=0, lt=1)
    weights: tuple[float, float, float] | None = None
    reward_violations: Literal["constant", "realized"] = "constant"
    fixed_violations: tuple[float, float] | None = None
    common_random_numbers: bool = False
    tpt_bound_B: float = Field(0.9, ge=0, le=1)

    @field_validator("weights")
    @classmethod
    def _weights(cls, v):
        return _check_weights(v)


class LambdaGrid(_Strict):
    start: float = Field(0.0, ge=0)
    stop: float = Field(3.0, gt=0)
    points: int = Field(20, ge=2)

    def values(self) -> np.ndarray:
        return np.linspace(self.start, self.stop, self.points)


class OracleSection(_Strict):
    instances: int = Field(50, ge=1)
    max_queue_max: int = Field(30, ge=2)
    lambda_grid: LambdaGrid = LambdaGrid()
    tol: float = Field(1e-9, gt=0)
    slack: float = Field(1e-8, ge=0)


class MDPSection(_Strict):
    max_queue: int = Field(ge=1)
    beta: float = Field(ge=0, le=1)
    gamma: float = Field(gt=0, lt=1)
    r0: int = Field(0, ge=0)
    r1: int = Field(1, ge=1)
    mu_r: float = Field(0.0, ge=0)
    mu_l: float = Field(0.0, ge=0)

    def build(self) -> TabularMDP:
        return TabularMDP(**self.model_dump())


class Config(_Strict):
    seed: int = Field(0, ge=0, lt=2**64)
    output: str | None = None
    classes: dict[ClassId, ClassOverride] = {}
    channel: ChannelSection = ChannelSection()
    scenario: ScenarioSection | None = None
    slicing: SlicingSection | None = None
    train: TrainSection | None = None
    oracle: OracleSection | None = None
    mdp: MDPSection | None = None

    # builders -----------------------------------------------------------

    def class_spec(self, class_id: str, tpt_bound_B: float) -> ServiceClassSpec:
        base = default_class(class_id, tpt_bound_B)
        o = self.classes.get(class_id)
        if o is None:
            return base
        traffic = base.traffic
        if o.rate_mbps is not None or o.burst_prob is not None:
            rate = o.rate_mbps if o.rate_mbps is not None else traffic.rate_mbps
            if traffic.kind == "bursty":
                traffic = TrafficModel.bursty(rate, o.burst_prob or traffic.burst_prob)
            else:
                traffic = TrafficModel.cbr(rate)
        return ServiceClassSpec(
            class_id, traffic,
            o.tpt_bound_B if o.tpt_bound_B is not None else base.tpt_bound_B,
            o.tsls_bound_L if o.tsls_bound_L is not None else base.tsls_bound_L,
            tuple(o.weights) if o.weights is not None else base.weights,
            o.learning_rate if o.learning_rate is not None else base.learning_rate,
            o.max_buffer_bytes if o.max_buffer_bytes is not None else base.max_buffer_bytes,
        )

    def scenario_spec(self, base_dir: Path | None = None) -> ScenarioSpec:
        if self.scenario is None:
            raise ConfigError("config has no 'scenario' section")
        sc = self.scenario
        ues = []
        for g in sc.ues:
            spec = self.class_spec(g.class_id, sc.tpt_bound_B)
            ch = (g.channel or self.channel).build(base_dir)
            ues.extend(UEConfig(spec, ch.copy(), g.model) for _ in range(g.count))
        return ScenarioSpec(ues, sc.total_rbgs, RBProfile(**sc.rb_profile.model_dump()), sc.top_R,
                            sc.horizon, sc.window, sc.eta, sc.name)

    def slice_config(self) -> SliceConfig | None:
        if self.slicing is None:
            return None
        return SliceConfig(tuple(Slice(s.name, tuple(s.classes), s.rbgs, s.scheduler, s.top_R)
                                 for s in self.slicing.slices))

    def train_config(self, seed: int | None = None) -> tuple[TrainConfig, ServiceClassSpec]:
        if self.train is None:
            raise ConfigError("config has no 'train' section")
        t = self.train
        spec = self.class_spec(t.class_id, t.tpt_bound_B)
        cfg = TrainConfig(
            class_id=t.class_id, episodes_total=t.episodes_total, episode_len=t.episode_len,
            batch_size=t.batch_size, lr=t.lr, lr_decay=t.lr_decay, m=t.m, gamma=t.gamma,
            weights=t.weights, seed=self.seed if seed is None else seed,
            reward_violations=t.reward_violations, fixed_violations=t.fixed_violations,
            common_random_numbers=t.common_random_numbers,
        )
        return cfg, spec


def _format_errors(err: ValidationError, source: str) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        lines.append(f"{source}: {loc}: {e['msg']} (got {e.get('input')!r})")
    return "\n".join(lines)


def parse_config_text(text: str, source: str = "<string>") -> Config:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{source}: not valid YAML: {e}") from None
    if data is None:
        raise ConfigError(f"{source}: empty config")
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping, got {type(data).__name__}")
    try:
        return Config.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_format_errors(e, source)) from None


def parse_config(path: str | Path) -> Config:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config_text(text, str(path))


def shipped_config(name: str) -> Path:
    """Path of a config shipped with the package, e.g. ``scenario4.yaml``."""
    p = resources.files("whittlesched") / "configs" / name
    if not p.is_file():
        raise ConfigError(f"no shipped config named {name!r}")
    return Path(str(p))


def resolve_config_path(name_or_path: str | Path) -> Path:
    p = Path(name_or_path)
    if p.exists():
        return p
    name = p.name if p.suffix else p.name + ".yaml"
    return shipped_config(name)


