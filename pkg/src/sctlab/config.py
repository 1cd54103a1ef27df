"""Experiment configuration: one namespaced JSON document, validated up front.

Unknown keys anywhere are rejected; overrides use dotted paths
(``train.iters=0``) with JSON-parsed values.
"""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .net import ConsistencyNet
from .oracle import MixtureOracle
from .sampler import SamplePlan, make_edges
from .schedule import NoiseSchedule
from .trainer import EvalSettings, TrainPlan


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ComponentSpec(_Strict):
    mean: List[float]
    std: float = Field(ge=0)
    label: int = 0
    weight: float = Field(1.0, gt=0)


class OracleConfig(_Strict):
    kind: Literal["ring", "two_gaussians", "single_gaussian", "components"] = "ring"
    n: int = Field(8, ge=1)
    radius: float = Field(2.0, gt=0)
    std: float = Field(0.1, gt=0)
    separation: float = Field(1.0, gt=0)
    dim: int = Field(1, ge=1)
    components: Optional[List[ComponentSpec]] = None

    @model_validator(mode="after")
    def _components_given(self):
        if self.kind == "components" and not self.components:
            raise ValueError("oracle.kind='components' needs a components list")
        return self

    def build(self) -> MixtureOracle:
        if self.kind == "ring":
            return MixtureOracle.ring(self.n, self.radius, self.std)
        if self.kind == "two_gaussians":
            return MixtureOracle.two_gaussians(self.separation, self.std)
        if self.kind == "single_gaussian":
            return MixtureOracle.single_gaussian(self.dim, self.std)
        return MixtureOracle.from_spec({"components": [c.model_dump() for c in self.components]})


class ScheduleConfig(_Strict):
    kind: Literal["ve", "vp"] = "ve"
    t_min: Optional[float] = Field(None, ge=0)
    t_max: Optional[float] = Field(None, gt=0)

    def build(self) -> NoiseSchedule:
        base = NoiseSchedule.ve() if self.kind == "ve" else NoiseSchedule.vp()
        t_min = base.t_min if self.t_min is None else self.t_min
        t_max = base.t_max if self.t_max is None else self.t_max
        return NoiseSchedule(self.kind, t_min, t_max)


class NetConfig(_Strict):
    hidden: List[int] = Field(default_factory=lambda: [128, 128, 128])
    n_freq: int = Field(16, ge=0)
    freq_band: Tuple[float, float] = (0.05, 1.0)
    activation: Literal["silu", "tanh"] = "silu"
    class_dim: int = Field(16, ge=1)
    conditional: bool = False
    sigma_data: Optional[float] = Field(None, gt=0)

    @field_validator("hidden")
    @classmethod
    def _positive(cls, v):
        if not v or any(h < 1 for h in v):
            raise ValueError("hidden widths must be positive and non-empty")
        return v


class TrainConfig(_Strict):
    iters: int = Field(20_000, ge=0)
    batch_size: int = Field(256, ge=1)
    p_mean: float = -1.1
    p_std: float = Field(2.0, ge=0)
    q: float = Field(1.25, gt=1)
    d: int = Field(200, ge=1)
    n_fn: Literal["constant", "sigmoid"] = "constant"
    delta: float = Field(1e-4, gt=0)
    n_edges: Optional[int] = Field(None, ge=2)
    edge_spacing: Literal["uniform_t", "uniform_lambda"] = "uniform_t"
    fixed_partition: Optional[int] = Field(None, ge=1)
    target_mode: Literal["one_shot", "variance_reduced", "teacher_oracle"] = "variance_reduced"
    theta_minus_mode: Literal["stop_grad", "ema"] = "stop_grad"
    ref_size: Optional[int] = Field(None, ge=1)
    ref_source: Literal["in_batch", "pool"] = "in_batch"
    pool_size: int = Field(4096, ge=1)
    xr_mode: Literal["target_eps", "shared_noise"] = "target_eps"
    loss: Literal["pseudo_huber", "squared_l2"] = "pseudo_huber"
    huber_c: Optional[float] = Field(None, gt=0)
    lr: float = Field(1e-3, gt=0)
    warmup: int = Field(100, ge=0)
    ema_decays: List[float] = Field(default_factory=lambda: [0.999])
    eval_weights: Literal["ema", "raw"] = "ema"
    eval_every: int = Field(0, ge=0)
    eval_samples: int = Field(2000, ge=2)
    two_step_time: float = Field(1.5, gt=0)
    stop_sw_below: Optional[float] = Field(None, gt=0)

    @field_validator("ema_decays")
    @classmethod
    def _decays(cls, v):
        if any(not 0 <= b <= 1 for b in v):
            raise ValueError("EMA decays must lie in [0, 1]")
        return v


class SampleConfig(_Strict):
    mode: Literal["one_step", "stochastic_multistep", "phased_deterministic"] = "one_step"
    times: List[float] = Field(default_factory=list)
    n_edges: int = Field(4, ge=2)
    edge_spacing: Literal["uniform_t", "uniform_lambda"] = "uniform_t"
    eta: float = Field(1.0, gt=0, le=1)
    omega: Optional[float] = Field(None, ge=0)
    n: int = Field(10_000, ge=1)
    label: Optional[int] = None
    checkpoint: Optional[str] = None
    star_checkpoint: Optional[str] = None


class VarianceConfig(_Strict):
    modes: List[Literal["one_shot", "variance_reduced", "teacher_oracle"]] = Field(
        default_factory=lambda: ["one_shot", "variance_reduced", "teacher_oracle"])
    n_values: List[int] = Field(default_factory=lambda: [1, 4, 16, 64])
    t_grid: List[float] = Field(default_factory=lambda: [0.1, 0.3, 1.0, 3.0])
    trials: int = Field(10_000, ge=100)


class BellmanConfig(_Strict):
    t: float = Field(1.0, gt=0)
    r: float = Field(0.5, gt=0)
    n_points: int = Field(64, ge=1)
    substeps: int = Field(1024, ge=1)

    @model_validator(mode="after")
    def _order(self):
        if not self.r < self.t:
            raise ValueError("bellman needs r < t")
        return self


class MetricsConfig(_Strict):
    projections: int = Field(128, ge=1)
    n_samples: int = Field(10_000, ge=2)
    mmd_samples: int = Field(2000, ge=2)
    etas: List[float] = Field(default_factory=lambda: [0.7, 0.8, 0.9, 1.0])
    omegas: List[float] = Field(default_factory=lambda: [0.0, 1.0, 1.2, 1.5, 2.0])
    dump_t: List[float] = Field(default_factory=lambda: [0.01, 0.1, 0.5, 1.0, 5.0, 20.0, 80.0])
    dump_iters: List[int] = Field(default_factory=lambda: [0, 200, 1000, 5000, 20_000])
    variance: VarianceConfig = Field(default_factory=VarianceConfig)
    bellman: BellmanConfig = Field(default_factory=BellmanConfig)

    @field_validator("etas")
    @classmethod
    def _etas(cls, v):
        if any(not 0 < e <= 1 for e in v):
            raise ValueError("etas must lie in (0, 1]")
        return v


class ExperimentConfig(_Strict):
    oracle: OracleConfig = Field(default_factory=OracleConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    net: NetConfig = Field(default_factory=NetConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    sample: SampleConfig = Field(default_factory=SampleConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    seed: int = Field(0, ge=0)
    out: Optional[str] = None

    @model_validator(mode="after")
    def _cross_checks(self):
        sched = self.schedule.build()
        if self.sample.mode == "stochastic_multistep":
            if any(not sched.t_min <= t < sched.t_max for t in self.sample.times):
                raise ValueError("sample.times must lie in [t_min, t_max)")
        if self.train.two_step_time >= sched.t_max:
            raise ValueError("train.two_step_time must be below t_max")
        return self

    # builders
    def build_schedule(self) -> NoiseSchedule:
        return self.schedule.build()

    def build_oracle(self) -> MixtureOracle:
        return self.oracle.build()

    def build_net(self, oracle=None, schedule=None) -> ConsistencyNet:
        oracle = oracle or self.build_oracle()
        schedule = schedule or self.build_schedule()
        sd = self.net.sigma_data if self.net.sigma_data is not None else oracle.sigma_data()
        n_classes = len(oracle.class_labels) if self.net.conditional else 0
        if n_classes and oracle.class_labels != list(range(n_classes)):
            raise ConfigError("conditional nets need oracle labels 0..K-1")
        return ConsistencyNet(oracle.dim, schedule, sd, self.net.hidden, self.net.n_freq,
                              n_classes, self.net.class_dim, self.net.activation, seed=self.seed,
                              freq_band=self.net.freq_band)

    def train_edges(self, schedule=None):
        if self.train.n_edges is None:
            return None
        return [float(e) for e in make_edges(schedule or self.build_schedule(), self.train.n_edges,
                                             self.train.edge_spacing)]

    def build_plan(self, schedule=None) -> TrainPlan:
        t = self.train
        return TrainPlan(
            p_mean=t.p_mean, p_std=t.p_std, q=t.q, d=t.d, n_fn=t.n_fn, delta=t.delta,
            edges=self.train_edges(schedule), fixed_partition=t.fixed_partition,
            target_mode=t.target_mode, theta_minus_mode=t.theta_minus_mode, ref_size=t.ref_size,
            ref_source=t.ref_source, pool_size=t.pool_size, xr_mode=t.xr_mode,
            conditional=self.net.conditional, loss=t.loss, huber_c=t.huber_c, lr=t.lr,
            warmup=t.warmup, ema_decays=tuple(t.ema_decays), eval_weights=t.eval_weights)

    def build_eval(self) -> EvalSettings:
        b = self.metrics.bellman
        return EvalSettings(every=self.train.eval_every, n_samples=self.train.eval_samples,
                            projections=min(self.metrics.projections, 64),
                            two_step_time=self.train.two_step_time, bellman_t=b.t, bellman_r=b.r,
                            seed=self.seed + 12345, stop_sw_below=self.train.stop_sw_below)

    def build_sample_plan(self, schedule=None) -> SamplePlan:
        s = self.sample
        edges = None
        if s.mode == "phased_deterministic":
            edges = make_edges(schedule or self.build_schedule(), s.n_edges, s.edge_spacing)
        return SamplePlan(s.mode, list(s.times), edges, s.eta, s.omega)

    def canonical_json(self, include_out=False) -> str:
        data = self.model_dump(mode="json")
        if not include_out:
            data.pop("out", None)
        return json.dumps(data, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def parse_override(item: str):
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key or any(not part for part in key.split(".")):
        raise ConfigError(f"malformed override key {key!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(data: dict, overrides) -> dict:
    data = copy.deepcopy(data)
    for item in overrides or []:
        path, value = parse_override(item)
        node = data
        for part in path[:-1]:
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {item!r} descends into a non-object")
            node = nxt
        node[path[-1]] = value
    return data


def load_config(path=None, overrides=None, seed=None, out=None) -> ExperimentConfig:
    data = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
    data = apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        data["out"] = str(out)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        lines = [f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors()]
        raise ConfigError("invalid config: " + "; ".join(lines)) from exc
