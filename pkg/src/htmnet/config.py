"""Run configuration and its ``key = value`` text format.

Example::

    # tiny ablation
    model.stage_widths = 16, 32, 64, 128
    bfm.num_blocks = 2
    decoder.msfm = off
    train.lr = 0.001

Keys are dotted ``section.field``; ``precision`` stands alone. Unknown
keys, repeated keys and malformed values are errors. Booleans accept
on/off, true/false, yes/no and 1/0. Lists are comma separated, with
optional brackets.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .losses import LossConfig
from .model import ModelConfig, tiny_config

PRECISIONS = ("f32", "f64")
SCOPES = ("mask", "all")
_TRUE = {"on", "true", "yes", "1"}
_FALSE = {"off", "false", "no", "0"}


class ConfigError(ValueError):
    """A configuration file or value is invalid."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 40
    seed: int = 0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    max_steps: int = 0   # 0 means no cap; otherwise stop after this many optimizer steps
    grad_clip: float = 0.0   # global gradient-norm limit; 0 disables clipping


@dataclass
class DataConfig:
    path: str = ""
    size: int = 64
    count: int = 8


@dataclass
class MetricsConfig:
    scope: str = "mask"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    precision: str = "f32"

    def validate(self) -> "RunConfig":
        t = self.train
        if not t.lr >= 0:
            raise ConfigError(f"train.lr must be non-negative, got {t.lr}")
        if t.batch_size <= 0 or t.epochs <= 0:
            raise ConfigError("train.batch_size and train.epochs must be positive")
        if not t.grad_clip >= 0:
            raise ConfigError("train.grad_clip must be non-negative")
        if t.max_steps < 0:
            raise ConfigError("train.max_steps must be non-negative")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}, got {self.precision!r}")
        if self.metrics.scope not in SCOPES:
            raise ConfigError(f"metrics.scope must be one of {SCOPES}, got {self.metrics.scope!r}")
        if self.model.d_max <= 0:
            raise ConfigError("model.d_max must be positive")
        try:
            # re-run the dataclass checks on values that were set after construction
            for sub in (self.model.encoder, self.model.fusion, self.loss):
                if hasattr(sub, "__post_init__"):
                    sub.__post_init__()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self


def tiny_run_config() -> RunConfig:
    return RunConfig(model=tiny_config())


def _sections(cfg: RunConfig) -> dict:
    """Section name -> dataclass instance holding its fields."""
    return {"model": cfg.model.encoder, "bfm": cfg.model.bfm, "ssm": cfg.model.ssm,
            "decoder": cfg.model.decoder, "fusion": cfg.model.fusion, "train": cfg.train,
            "loss": cfg.loss, "data": cfg.data, "metrics": cfg.metrics}


def _resolve(cfg: RunConfig, key: str):
    """Return (object, attribute) for a dotted key."""
    if key == "precision":
        return cfg, "precision"
    if key == "model.d_max":
        return cfg.model, "d_max"
    section, _, name = key.partition(".")
    target = _sections(cfg).get(section)
    if target is None or not name or name not in {f.name for f in dataclasses.fields(target)}:
        raise ConfigError(f"unknown config key {key!r}")
    return target, name


def _parse_scalar(text: str, like, key: str):
    if isinstance(like, bool):
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean (on/off), got {text!r}")
    try:
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(like).__name__}") from None
    return text


def _parse_value(text: str, current, key: str):
    if not text and not isinstance(current, str):
        raise ConfigError(f"{key}: missing value")
    if isinstance(current, list):
        body = text.strip()
        if body.startswith("[") and body.endswith("]"):
            body = body[1:-1]
        items = [s.strip() for s in body.split(",") if s.strip()]
        if not items:
            raise ConfigError(f"{key}: empty list")
        return [_parse_scalar(s, current[0], key) for s in items]
    return _parse_scalar(text, current, key)


def set_value(cfg: RunConfig, key: str, text: str) -> None:
    target, name = _resolve(cfg, key)
    setattr(target, name, _parse_value(text, getattr(target, name), key))


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        try:
            set_value(cfg, key, value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return cfg.validate()


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, list):
        return ", ".join(_format_value(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def format_config(cfg: RunConfig) -> str:
    """Every key with its value; ``parse_config`` of the result gives ``cfg`` back."""
    lines = []
    for section, obj in _sections(cfg).items():
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(obj, f.name))}")
        if section == "model":
            lines.append(f"model.d_max = {_format_value(cfg.model.d_max)}")
    lines.append(f"precision = {cfg.precision}")
    return "\n".join(lines) + "\n"
