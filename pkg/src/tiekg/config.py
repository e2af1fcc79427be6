"""Run configuration: nested dataclasses loaded from YAML with dotted
overrides. Unknown keys are rejected."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .core import Pattern
from .replay import DEFAULT_LAMBDA, STRATEGIES

STRATEGY_NAMES = ("ft", "tr", "tie", "fb", "fb_future")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    cache: str | None = None
    n_entities: int = 200
    n_relations: int = 6
    T: int = 20
    birth_rate: float = 0.08
    death_rate: float = 0.08
    replace_prob: float = 0.5
    n_initial: int | None = None


@dataclass
class ModelConfig:
    encoder: str = "de"
    decoder: str | None = None
    dim: int = 128
    gamma_de: float = 0.5


@dataclass
class LossConfig:
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 1.0
    alpha4: float = 1.0
    alpha5: float = 1.0
    rkd_form: str = "full"
    deleted_paired_positive: bool = False
    deleted_cap: int | None = None


@dataclass
class ReplayConfig:
    strategy: str = "freq"
    window: int = 10
    samples_per_step: int = 1000
    sigma: float = 10.0
    gamma: float = 0.5
    # keys are pattern labels such as "s,*,o"
    weights: dict = field(default_factory=lambda: {p.label: w for p, w in DEFAULT_LAMBDA.items()})

    def lambda_table(self) -> dict[Pattern, float]:
        return {Pattern.from_label(k): float(v) for k, v in self.weights.items()}


@dataclass
class NegConfig:
    rate_current: int = 500
    rate_replay: int = 50


@dataclass
class BatchConfig:
    max_size: int = 2048


@dataclass
class OptimConfig:
    optimizer: str = "sgd"
    lr: float = 1e-3
    agem: bool = False
    patience: int = 20
    max_epochs: int = 200
    pretrain_max_epochs: int | None = None


@dataclass
class EvalConfig:
    k: int = 10
    tau_d: int = 10
    filtered: bool = False
    exact_A: bool = True
    A_stride: int = 5


@dataclass
class RunSection:
    strategy: str = "tie"
    seed: int = 0
    seeds: list | None = None
    pretrain_fraction: float = 0.7
    threads: int = 0
    name: str | None = None
    save_params: bool = True


@dataclass
class Config:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    neg: NegConfig = field(default_factory=NegConfig)
    batch: BatchConfig = field(default_factory=BatchConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunSection = field(default_factory=RunSection)

    def validate(self) -> "Config":
        m = self.model
        if m.encoder not in ("de", "hyte", "static"):
            raise ConfigError(f"model.encoder: unknown encoder {m.encoder!r}")
        if m.decoder not in (None, "transe", "distmult", "complex"):
            raise ConfigError(f"model.decoder: unknown decoder {m.decoder!r}")
        if m.dim <= 0:
            raise ConfigError("model.dim must be positive")
        if not 0 <= m.gamma_de <= 1:
            raise ConfigError("model.gamma_de must lie in [0, 1]")
        if self.replay.strategy not in STRATEGIES:
            raise ConfigError(f"replay.strategy must be one of {STRATEGIES}")
        if self.replay.window < 1:
            raise ConfigError("replay.window must be >= 1")
        try:
            self.replay.lambda_table()
        except ValueError as exc:
            raise ConfigError(f"replay.weights: {exc}") from None
        if self.neg.rate_current < 1 or self.neg.rate_replay < 1:
            raise ConfigError("negative sampling rates must be >= 1")
        if self.batch.max_size < 1:
            raise ConfigError("batch.max_size must be >= 1")
        if self.optim.optimizer not in ("sgd", "adam"):
            raise ConfigError("optim.optimizer must be sgd or adam")
        if self.loss.rkd_form not in ("full", "scalar"):
            raise ConfigError("loss.rkd_form must be full or scalar")
        if self.run.strategy not in STRATEGY_NAMES:
            raise ConfigError(f"run.strategy must be one of {STRATEGY_NAMES}")
        if not 0 < self.run.pretrain_fraction < 1:
            raise ConfigError("run.pretrain_fraction must lie in (0, 1)")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    def seeds(self) -> list[int]:
        return [int(s) for s in self.run.seeds] if self.run.seeds else [int(self.run.seed)]


def _coerce(value: Any, current: Any, hint: str, where: str):
    if isinstance(value, str) and not isinstance(current, str):
        value = yaml.safe_load(value)
    if value is None:
        return None
    if isinstance(current, bool) or hint == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(current, int) or "int" in hint and "float" not in hint:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(current, float) or "float" in hint:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    return value


def _apply_section(section, data: dict, name: str) -> None:
    fields = {f.name: f for f in dataclasses.fields(section)}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {name}.{key}")
        cur = getattr(section, key)
        if key == "weights" and isinstance(section, ReplayConfig):
            if not isinstance(value, dict):
                raise ConfigError("replay.weights must be a mapping")
            merged = dict(cur)
            for k, v in value.items():
                merged[Pattern.from_label(str(k)).label if _is_pattern(k) else str(k)] = float(v)
            setattr(section, key, merged)
            continue
        setattr(section, key, _coerce(value, cur, str(fields[key].type), f"{name}.{key}"))


def _is_pattern(label) -> bool:
    try:
        Pattern.from_label(str(label))
        return True
    except ValueError:
        return False


def apply_dict(cfg: Config, data: dict) -> Config:
    if not isinstance(data, dict):
        raise ConfigError("config document must be a mapping of sections")
    for sec, values in data.items():
        if not hasattr(cfg, sec) or sec.startswith("_"):
            raise ConfigError(f"unknown config section {sec!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"section {sec!r} must be a mapping")
        _apply_section(getattr(cfg, sec), values, sec)
    return cfg


def apply_overrides(cfg: Config, overrides: list[str]) -> Config:
    """Apply `section.key=value` strings (YAML-parsed values)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        if parts[:2] == ["replay", "lambda"] and len(parts) == 3:
            apply_dict(cfg, {"replay": {"weights": {parts[2]: yaml.safe_load(raw)}}})
            continue
        if len(parts) != 2:
            raise ConfigError(f"override key {key!r} must be section.key")
        apply_dict(cfg, {parts[0]: {parts[1]: raw}})
    return cfg


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> Config:
    cfg = Config()
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        apply_dict(cfg, data)
    apply_overrides(cfg, overrides or [])
    return cfg.validate()
