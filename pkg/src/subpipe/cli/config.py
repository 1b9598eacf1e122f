"""Run configuration: a JSON document of nested sections, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from ..errors import ConfigError
from ..model import ModelDims
from ..optim import AdamConfig
from ..pipeline.runtime import TrainPlan
from ..pipeline.shaper import ShaperConfig
from ..pipeline.stage import Mode
from ..pipeline.transport import parse_endpoints


@dataclass
class DimsSection:
    d: int = 64
    d_ff: int = 256
    heads: int = 4
    layers: int = 4
    vocab: int = 256
    n: int = 32
    k: int = 8


@dataclass
class OptimSection:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 100
    total_steps: int = 0  # 0 means the plan's step count
    min_lr_ratio: float = 0.1
    conventional: bool = False
    clip_norm: float = 0.0


@dataclass
class PlanSection:
    steps: int = 200
    microbatches: int = 2
    batch: int = 16
    grassmann_period: int = 500
    grassmann_eta: float = 0.1


@dataclass
class ShaperSection:
    bandwidth: float = 80e6
    jitter: float = 0.2
    floor: float = 0.1
    seed: int = 0


@dataclass
class RunConfig:
    dims: DimsSection = field(default_factory=DimsSection)
    optim: OptimSection = field(default_factory=OptimSection)
    plan: PlanSection = field(default_factory=PlanSection)
    shaper: ShaperSection = field(default_factory=ShaperSection)
    mode: str = "compressed"
    stages: int = 1
    tcp: str | None = None
    corpus: str | None = None
    out: str = "runs/default"
    seed: int = 0
    realtime: bool = False
    compute_time: float = 0.0
    dtype: str = "float32"
    dump_frames: bool = False
    trials: int = 100
    checkpoint: str | None = None

    # --- derived views ---------------------------------------------------

    def model_dims(self) -> ModelDims:
        d = self.dims
        return ModelDims(d.d, d.d_ff, d.heads, d.layers, d.vocab, d.n, d.k)

    def adam(self) -> AdamConfig:
        o = dataclasses.asdict(self.optim)
        o["total_steps"] = o["total_steps"] or self.plan.steps
        return AdamConfig(**o)

    def train_plan(self, metrics_path=None) -> TrainPlan:
        p = self.plan
        return TrainPlan(p.steps, p.microbatches, p.batch, self.dims.n, p.grassmann_period, p.grassmann_eta,
                         metrics_path)

    def shaper_config(self) -> ShaperConfig:
        s = self.shaper
        return ShaperConfig(s.bandwidth, s.jitter, s.floor, s.seed)

    def run_mode(self) -> Mode:
        return Mode.parse(self.mode)

    def tcp_endpoints(self):
        if self.tcp is None:
            return None
        if self.tcp == "loopback":
            return True
        return parse_endpoints(self.tcp)

    def validate(self) -> "RunConfig":
        """Re-check every cross-field constraint; raises ConfigError naming the field."""
        _wrap("dims", self.model_dims().validate)
        _wrap("plan", self.train_plan().validate)
        _wrap("shaper", self.shaper_config().validate)
        _wrap("mode", self.run_mode)
        if not 1 <= self.stages <= self.dims.layers:
            raise ConfigError(f"stages: need 1 <= stages <= dims.layers={self.dims.layers}, got {self.stages}")
        if self.dims.vocab != 256:
            raise ConfigError("dims.vocab: the byte-level corpus needs vocab = 256")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype: expected float32 or float64, got {self.dtype!r}")
        if self.optim.lr <= 0 or not 0 <= self.optim.beta1 < 1 or not 0 <= self.optim.beta2 < 1:
            raise ConfigError("optim: need lr > 0 and betas in [0, 1)")
        if self.optim.weight_decay < 0 or self.optim.eps <= 0:
            raise ConfigError("optim: need weight_decay >= 0 and eps > 0")
        if self.compute_time < 0:
            raise ConfigError("compute_time: must be >= 0")
        if self.trials < 1:
            raise ConfigError("trials: must be >= 1")
        if self.tcp is not None:
            eps = _wrap("tcp", self.tcp_endpoints)
            if isinstance(eps, list) and len(eps) != self.stages - 1:
                raise ConfigError(f"tcp: need {self.stages - 1} endpoints for {self.stages} stages, got {len(eps)}")
        return self


def _wrap(name, fn):
    try:
        return fn()
    except ConfigError as exc:
        raise ConfigError(f"{name}: {exc}") from None


_SECTIONS = {"dims": DimsSection, "optim": OptimSection, "plan": PlanSection, "shaper": ShaperSection}


def _check_type(path, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif default is None or isinstance(default, str):
        ok = value is None or isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {value!r}")
    return value


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {unknown}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        where = f"{path}.{name}" if path else name
        if name in _SECTIONS and not path:
            kwargs[name] = _build(_SECTIONS[name], value, where)
        else:
            kwargs[name] = _check_type(where, value, getattr(defaults, name))
    return cls(**kwargs)


def parse_config(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return _build(RunConfig, data, "").validate()


def emit_config(cfg: RunConfig) -> str:
    return json.dumps(dataclasses.asdict(cfg), indent=2, sort_keys=True) + "\n"


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
