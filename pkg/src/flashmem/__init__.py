"""Entropy-gated latent memory with shared-KV consolidation, at desk scale."""

from .backbone import Backbone, BackboneConfig, KvCache, StepOutput, init_backbone, kv_bytes
from .checkpoint import load_checkpoint, save_checkpoint
from .consolidator import Consolidator, ConsolidatorConfig, LatentMemory, inherit_weights, param_count
from .engine import GenerationConfig, RunTrace, TriggerEvent, inject, run, run_segregated_baseline
from .errors import (
    CapacityError,
    ConfigError,
    ContractError,
    DimensionError,
    FlashMemError,
    FormatError,
    FrozenParameterError,
    NonFiniteError,
)
from .monitor import EntropyRecord, Monitor, MonitorConfig, aggregate_entropy, calibrate_threshold, mask_and_renormalize, should_trigger

__all__ = [
    "Backbone", "BackboneConfig", "CapacityError", "ConfigError", "Consolidator", "ConsolidatorConfig",
    "ContractError", "DimensionError", "EntropyRecord", "FlashMemError", "FormatError", "FrozenParameterError",
    "GenerationConfig", "KvCache", "LatentMemory", "Monitor", "MonitorConfig", "NonFiniteError", "RunTrace",
    "StepOutput", "TriggerEvent", "aggregate_entropy", "calibrate_threshold", "inherit_weights", "init_backbone",
    "inject", "kv_bytes", "load_checkpoint", "mask_and_renormalize", "param_count", "run",
    "run_segregated_baseline", "save_checkpoint", "should_trigger",
]
