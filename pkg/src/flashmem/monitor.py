"""Parameter-free cognitive monitor: sink-masked, head-averaged attention entropy."""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

DEFAULT_PERCENTILE = 85.0


@dataclass(frozen=True)
class MonitorConfig:
    sink_indices: frozenset[int] = frozenset({0})
    threshold: float | None = None
    percentile_target: float = DEFAULT_PERCENTILE
    epsilon_mass: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "sink_indices", frozenset(int(i) for i in self.sink_indices))
        if self.threshold is not None and not math.isinf(self.threshold) and self.threshold < 0:
            raise ConfigError(f"entropy threshold must be >= 0, got {self.threshold}")
        if not 0.0 < self.percentile_target <= 100.0:
            raise ConfigError(f"percentile_target must lie in (0, 100], got {self.percentile_target}")

    @classmethod
    def first_n_sinks(cls, n: int, **kwargs) -> "MonitorConfig":
        return cls(sink_indices=frozenset(range(n)), **kwargs)

    def with_threshold(self, tau: float | None) -> "MonitorConfig":
        return replace(self, threshold=tau)


@dataclass
class EntropyRecord:
    step: int
    entropy: float
    triggered: bool
    per_head_entropy: list[float] = field(default_factory=list)
    degenerate: bool = False


def mask_and_renormalize(attn, sinks: Iterable[int] = (0,), epsilon_mass: float = 1e-8) -> np.ndarray:
    """Zero the sink columns of ``attn`` [n_heads, cache_len] and renormalise each row.

    A head whose non-sink mass is below ``epsilon_mass`` comes back as an
    all-zero row; :func:`aggregate_entropy` scores such a head as 0.
    """
    a = np.array(attn, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] == 0:
        raise DimensionError(f"attention must be [n_heads, cache_len], got {a.shape}")
    cols = [j for j in sinks if 0 <= j < a.shape[1]]
    if cols:
        a[:, cols] = 0.0
    mass = a.sum(axis=1, keepdims=True)
    degenerate = mass[:, 0] < epsilon_mass
    a[degenerate] = 0.0
    np.divide(a, mass, out=a, where=~degenerate[:, None])
    return a


def degenerate_heads(attn, sinks: Iterable[int] = (0,), epsilon_mass: float = 1e-8) -> np.ndarray:
    a = np.asarray(attn, dtype=np.float64)
    keep = np.ones(a.shape[1], dtype=bool)
    keep[[j for j in sinks if 0 <= j < a.shape[1]]] = False
    return a[:, keep].sum(axis=1) < epsilon_mass


def head_entropies(masked) -> np.ndarray:
    """Shannon entropy (nats) of each row, with 0 ln 0 = 0."""
    p = np.asarray(masked, dtype=np.float64)
    logp = np.zeros_like(p)
    np.log(p, out=logp, where=p > 0)
    return 0.0 - (p * logp).sum(axis=-1)  # 0.0 - x avoids a signed zero


def aggregate_entropy(masked, sinks: Iterable[int] = ()) -> tuple[float, list[float]]:
    """Mean over heads of the per-head entropy of sink-masked distributions.

    Sink columns are ignored even if ``masked`` still carries mass there.
    """
    p = np.array(masked, dtype=np.float64)
    cols = [j for j in sinks if 0 <= j < p.shape[-1]]
    if cols:
        p[:, cols] = 0.0
    per_head = head_entropies(p)
    return float(per_head.mean()), per_head.tolist()


def should_trigger(entropy: float, config: MonitorConfig) -> bool:
    if config.threshold is None:
        raise ConfigError("entropy threshold is not set; calibrate or pass one explicitly")
    return entropy > config.threshold


def calibrate_threshold(entropies: Sequence[float], percentile_target: float = DEFAULT_PERCENTILE) -> float:
    """Nearest-rank percentile: the ceil(P/100 * N)-th smallest value (1-based, clamped)."""
    values = sorted(float(e) for e in entropies)
    if not values:
        raise ContractError("cannot calibrate a threshold from an empty sample")
    if not 0.0 < percentile_target <= 100.0:
        raise ConfigError(f"percentile must lie in (0, 100], got {percentile_target}")
    n = len(values)
    # exact rational arithmetic keeps ceil() off float noise
    rank = math.ceil(Fraction(str(percentile_target)) * n / 100)
    return values[min(max(rank, 1), n) - 1]


class Monitor:
    """Stateless wrapper binding a :class:`MonitorConfig` to the entropy pipeline."""

    def __init__(self, config: MonitorConfig | None = None):
        self.config = config or MonitorConfig()

    def parameters(self) -> list:
        return []

    def measure(self, attn) -> tuple[float, list[float], bool]:
        cfg = self.config
        masked = mask_and_renormalize(attn, cfg.sink_indices, cfg.epsilon_mass)
        degenerate = bool(degenerate_heads(attn, cfg.sink_indices, cfg.epsilon_mass).any())
        h, per_head = aggregate_entropy(masked, cfg.sink_indices)
        return h, per_head, degenerate

    def observe(self, attn, step: int, threshold: float | None = None) -> EntropyRecord:
        tau = self.config.threshold if threshold is None else threshold
        h, per_head, degenerate = self.measure(attn)
        triggered = should_trigger(h, self.config.with_threshold(tau)) if tau is not None else False
        return EntropyRecord(step, h, triggered, per_head, degenerate)
