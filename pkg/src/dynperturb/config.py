"""Run configuration: nested dataclasses loaded from YAML.

Unknown keys are rejected so that a typo cannot silently fall back to a
default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .adamask import CategorySpec
from .env import EpisodeConfig, RewardWeights
from .hppo import PPOConfig
from .taskgen import PretrainSettings
from .tinylm import ModelConfig, TrainSettings


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    n_subjects: int = 50
    n_relations: int = 4
    corruption_rate: float = 0.3
    n_answers: int = 32
    n_classes: int = 8
    n_options: int = 4
    train_fraction: float = 0.5
    min_pool: int = 10


@dataclass(frozen=True)
class MaskConfig:
    init_theta: float = 0.0
    tau_gate: float = 1.0
    lambda_sparse: float = 1e-3
    lambda_l0: float = 1e-3
    eps_th: float = 0.5
    ema_decay: float = 0.9
    lr: float = 0.01


@dataclass(frozen=True)
class JudgeSettings:
    partial_credit: float = 0.9


@dataclass(frozen=True)
class Stage2Config:
    updates: int = 30
    checkpoint_every: int = 10
    ig_steps: int = 16
    eval_steps: int = 1


@dataclass(frozen=True)
class BaselineConfig:
    coefficients: tuple[float, ...] = (0.0, 0.5, 1.0, 2.0, 4.0, 8.0)


@dataclass(frozen=True)
class BenchConfig:
    repetitions: int = 100
    warmup: int = 10


@dataclass(frozen=True)
class SweepConfig:
    counts: tuple[int, ...] = (0, 1, 2, 4, 8, 16, 32, 64)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    planted: bool = False
    deterministic_eval: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    categories: tuple | None = None
    # no early stop: ending on h == 0 made farming partial credit the better policy
    episode: EpisodeConfig = field(default_factory=lambda: EpisodeConfig(stop_h=-1.0))
    reward: RewardWeights = field(default_factory=RewardWeights)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    judge: JudgeSettings = field(default_factory=JudgeSettings)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def category_spec(self) -> CategorySpec:
        if self.categories is None:
            return CategorySpec.halves(self.model.n_layers, self.model.d_ff)
        return CategorySpec.from_list(self.categories)

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=seed, model=dataclasses.replace(self.model, seed=seed))

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, raw: Any, where: str):
    if not dataclasses.is_dataclass(cls):
        return raw
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}; allowed: {', '.join(sorted(fields))}")
    kwargs = {}
    hints = _field_types(cls)
    for name, value in raw.items():
        sub = hints.get(name)
        path = f"{where}.{name}" if where else name
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[name] = _build(sub, value, path)
        elif isinstance(value, list) and name != "categories":
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


_NESTED = {
    RunConfig: {"model": ModelConfig, "world": WorldConfig, "pretrain": PretrainSettings, "episode": EpisodeConfig,
                "reward": RewardWeights, "ppo": PPOConfig, "mask": MaskConfig, "judge": JudgeSettings,
                "stage2": Stage2Config, "baseline": BaselineConfig, "bench": BenchConfig, "sweep": SweepConfig},
    PretrainSettings: {"clean": TrainSettings, "plant": TrainSettings},
}


def _field_types(cls) -> dict:
    return _NESTED.get(cls, {})


def config_from_dict(raw: dict | None) -> RunConfig:
    cfg = _build(RunConfig, raw or {}, "")
    if cfg.model.seed != cfg.seed and not (raw or {}).get("model", {}).get("seed"):
        cfg = cfg.with_seed(cfg.seed)
    cfg.category_spec().validate(cfg.model.n_layers, cfg.model.d_ff)
    return cfg


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(raw)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
