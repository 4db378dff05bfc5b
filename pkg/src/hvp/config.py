"""Flat ``section.key = value`` experiment configuration."""

from __future__ import annotations

import dataclasses
import hashlib
import types
import typing
from dataclasses import dataclass, field, fields

from .errors import ConfigError, ParameterError
from .training import RefineConfig, TrainConfig


@dataclass(frozen=True)
class PriorConfig:
    """Gaussian-mixture data prior with means drawn uniformly in ``[-spread, spread]``."""

    d: int = 16
    K: int = 4
    spread: float = 0.8
    variance: float = 0.05
    seed: int = 123
    denoiser: str = "oracle"
    denoiser_steps: int = 2000


@dataclass(frozen=True)
class TaskConfig:
    kind: str = "pool"
    factor: int = 2
    layout: str = "auto"
    drop_prob: float = 0.9
    sigma_y: float = 0.01
    alpha: float = 2.0
    beta: float = 0.0


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 8
    beta_min: float = 1e-4
    beta_max: float = 0.02
    eta: float = 0.5
    n_base: int = 1000
    final_std: float = 0.01


@dataclass(frozen=True)
class PolicyConfig:
    hidden: tuple[int, ...] = (64, 64)
    kappa: float = 0.05
    stochastic: bool = True
    gamma: float = 1.0


@dataclass(frozen=True)
class NoisePolicyConfig:
    hidden: tuple[int, ...] = (64, 64)


@dataclass(frozen=True)
class LossConfig:
    w_T: float = 50.0
    w_control: float | None = None
    w_score: float | None = None
    lambda2: float | None = None
    lambda3: float | None = None


@dataclass(frozen=True)
class EvalConfig:
    n_samples: int = 4
    modes: tuple[str, ...] = ("unguided", "stage1_only", "ahvp", "shvp")
    with_elbo: bool = False
    peak: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "runs"
    prior: PriorConfig = field(default_factory=PriorConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    noise_policy: NoisePolicyConfig = field(default_factory=NoisePolicyConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _parse_value(raw: str, tp, key: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        return _parse_value(raw, args[0], key)
    if origin is tuple:
        (inner, *_) = typing.get_args(tp)
        return tuple(_parse_value(p, inner, key) for p in raw.split(",") if p.strip())
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {tp.__name__}") from exc
    return raw


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse ``key = value`` lines over ``base`` (defaults). Unknown keys are errors."""
    cfg = base or ExperimentConfig()
    top = _hints(ExperimentConfig)
    sections: dict[str, dict] = {}
    scalars: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (p.strip() for p in line.split("=", 1))
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in top or not dataclasses.is_dataclass(top[sec]):
                raise ConfigError(f"line {lineno}: unknown section {sec!r}")
            hints = _hints(top[sec])
            if name not in hints:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            sections.setdefault(sec, {})[name] = _parse_value(raw, hints[name], key)
        else:
            if key not in top or dataclasses.is_dataclass(top[key]):
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            scalars[key] = _parse_value(raw, top[key], key)
    try:
        updates = {sec: dataclasses.replace(getattr(cfg, sec), **vals) for sec, vals in sections.items()}
        return dataclasses.replace(cfg, **updates, **scalars)
    except ParameterError as exc:
        raise ConfigError(str(exc)) from exc


def serialize_config(cfg: ExperimentConfig) -> str:
    """Every effective key, one per line, in declaration order."""
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            lines += [f"{f.name}.{g.name} = {_format_value(getattr(v, g.name))}" for g in fields(v)]
        else:
            lines.append(f"{f.name} = {_format_value(v)}")
    return "\n".join(lines) + "\n"


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()
