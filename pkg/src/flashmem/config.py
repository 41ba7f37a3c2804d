"""Run configuration files (JSON).

Top-level training keys use the hyperparameter table names (optimizer,
learning_rate, weight_decay, grad_clip, batch_size, epochs, scheduler,
warmup_ratio, k_memory_tokens, consolidator_layers); nested objects hold the
backbone, task and generation settings.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .backbone import BackboneConfig
from .consolidator import ConsolidatorConfig
from .data import SyntheticTaskSpec, spec_to_dict
from .errors import ConfigError
from .monitor import DEFAULT_PERCENTILE, MonitorConfig
from .trainer import TrainConfig


@dataclass
class GenerationSettings:
    max_new_tokens: int = 64
    temperature: float = 0.0
    trigger_cooldown: int = 16
    min_trigger_step: int = 5


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    generation: GenerationSettings = field(default_factory=GenerationSettings)
    n_train: int = 2000
    n_heldout: int = 200
    entropy_threshold: float | None = None
    percentile_target: float = DEFAULT_PERCENTILE
    sink_indices: tuple[int, ...] = (0,)
    checkpoint: str | None = None

    def consolidator_config(self) -> ConsolidatorConfig:
        return ConsolidatorConfig(n_layers=self.train.consolidator_layers,
                                  n_memory_tokens=self.train.k_memory_tokens, d_model=self.backbone.d_model)

    def monitor_config(self) -> MonitorConfig:
        return MonitorConfig(sink_indices=frozenset(self.sink_indices), threshold=self.entropy_threshold,
                             percentile_target=self.percentile_target)

    def to_dict(self) -> dict:
        d = self.train.to_dict()
        d.update({
            "backbone": self.backbone.to_dict(),
            "task": spec_to_dict(self.task),
            "generation": asdict(self.generation),
            "n_train": self.n_train,
            "n_heldout": self.n_heldout,
            "entropy_threshold": self.entropy_threshold,
            "percentile_target": self.percentile_target,
            "sink_indices": list(self.sink_indices),
            "checkpoint": self.checkpoint,
        })
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        train_keys = {f.name for f in fields(TrainConfig)}
        own = {f.name for f in fields(cls)} - {"train"}
        unknown = set(d) - train_keys - own
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            train = TrainConfig(**{k: d.pop(k) for k in list(d) if k in train_keys})
            backbone = BackboneConfig.from_dict(d.pop("backbone", {}))
            task = SyntheticTaskSpec(**d.pop("task", {}))
            generation = GenerationSettings(**d.pop("generation", {}))
        except TypeError as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        if "sink_indices" in d:
            d["sink_indices"] = tuple(int(i) for i in d["sink_indices"])
        tau = d.get("entropy_threshold")
        if tau is not None and (not isinstance(tau, (int, float)) or not math.isfinite(tau)):
            raise ConfigError(f"entropy_threshold must be a finite number, got {tau!r}")
        return cls(train=train, backbone=backbone, task=task, generation=generation, **d)


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return RunConfig.from_dict(raw)


def save_config(path, config: RunConfig) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
