"""Window-based entropy-reduction statistics over paired traces.

For every valid trigger step t of a memory-augmented trace, compare the mean
aggregated entropy over the closed window [t, t + L] with the vanilla trace
of the same prompt at the same step indices.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .engine import RunTrace
from .errors import ConfigError, ContractError


@dataclass
class TriggerDelta:
    prompt_id: str | None
    step: int
    vanilla_mean: float
    flashmem_mean: float

    @property
    def delta(self) -> float:
        return self.vanilla_mean - self.flashmem_mean

    @property
    def relative_pct(self) -> float:
        return self.delta / self.vanilla_mean * 100.0 if self.vanilla_mean else math.nan


@dataclass
class EntropyStats:
    mean_delta: float
    mean_relative_pct: float
    delta_range: tuple[float, float]
    prob_reduction: float
    prob_significant: float
    n_triggers: int
    std_delta: float = math.nan
    std_relative_pct: float = math.nan
    deltas: list[TriggerDelta] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return self.n_triggers == 0

    def as_row(self) -> dict:
        return {
            "n_triggers": self.n_triggers,
            "mean_delta": self.mean_delta,
            "std_delta": self.std_delta,
            "mean_relative_pct": self.mean_relative_pct,
            "std_relative_pct": self.std_relative_pct,
            "delta_min": self.delta_range[0],
            "delta_max": self.delta_range[1],
            "prob_reduction": self.prob_reduction,
            "prob_significant": self.prob_significant,
        }


def _pair(vanilla: Sequence[RunTrace], flashmem: Sequence[RunTrace]) -> list[tuple[RunTrace, RunTrace]]:
    def key(tr, i):
        return tr.prompt_id if tr.prompt_id is not None else f"#{i}"

    v = {}
    for i, tr in enumerate(vanilla):
        k = key(tr, i)
        if k in v:
            raise ContractError(f"duplicate vanilla trace for prompt {k}")
        v[k] = tr
    pairs = []
    seen = set()
    for i, tr in enumerate(flashmem):
        k = key(tr, i)
        if k not in v:
            raise ContractError(f"memory trace for prompt {k} has no vanilla counterpart")
        if k in seen:
            raise ContractError(f"duplicate memory trace for prompt {k}")
        seen.add(k)
        pairs.append((v[k], tr))
    missing = set(v) - seen
    if missing:
        raise ContractError(f"vanilla trace for prompt {sorted(missing)[0]} has no memory counterpart")
    return pairs


def trigger_deltas(vanilla: Sequence[RunTrace], flashmem: Sequence[RunTrace], *, window_len: int = 10,
                   min_step: int = 5, truncate: str = "drop") -> list[TriggerDelta]:
    if window_len < 0:
        raise ConfigError(f"window_len must be >= 0, got {window_len}")
    if truncate not in ("drop", "clip"):
        raise ConfigError(f"truncate must be 'drop' or 'clip', got {truncate!r}")
    out = []
    for van, mem in _pair(vanilla, flashmem):
        hv = np.asarray(van.entropy_values, dtype=np.float64)
        hm = np.asarray(mem.entropy_values, dtype=np.float64)
        n = min(len(hv), len(hm))
        for t in mem.trigger_steps:
            if t <= min_step:
                continue
            end = t + window_len + 1  # closed window [t, t + L]
            if end > n:
                if truncate == "drop" or t >= n:
                    continue
                end = n
            out.append(TriggerDelta(mem.prompt_id, t, float(hv[t:end].mean()), float(hm[t:end].mean())))
    return out


def summarize(deltas: Sequence[TriggerDelta], tau_sig: float = 0.5) -> EntropyStats:
    if not deltas:
        return EntropyStats(math.nan, math.nan, (math.nan, math.nan), math.nan, math.nan, 0)
    d = np.array([x.delta for x in deltas])
    rel = np.array([x.relative_pct for x in deltas])
    n = len(d)
    return EntropyStats(
        mean_delta=float(d.mean()),
        mean_relative_pct=float(np.nanmean(rel)) if np.isfinite(rel).any() else math.nan,
        delta_range=(float(d.min()), float(d.max())),
        prob_reduction=float((d > 0).sum()) / n,
        prob_significant=float((d > tau_sig).sum()) / n,
        n_triggers=n,
        std_delta=float(d.std()),
        std_relative_pct=float(np.nanstd(rel)) if np.isfinite(rel).any() else math.nan,
        deltas=list(deltas),
    )


def entropy_stats(vanilla_traces: Sequence[RunTrace], flashmem_traces: Sequence[RunTrace], window_len: int = 10,
                  min_step: int = 5, tau_sig: float = 0.5, truncate: str = "drop") -> EntropyStats:
    """Aggregate entropy reduction after triggers; an empty result (n_triggers == 0) is not an error."""
    deltas = trigger_deltas(vanilla_traces, flashmem_traces, window_len=window_len, min_step=min_step,
                            truncate=truncate)
    return summarize(deltas, tau_sig)


def write_stats_csv(path, stats: EntropyStats) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        row = stats.as_row()
        w = csv.DictWriter(fh, fieldnames=list(row))
        w.writeheader()
        w.writerow(row)


def write_deltas_csv(path, stats: EntropyStats) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["prompt_id", "step", "vanilla_mean", "flashmem_mean", "delta", "relative_pct"])
        for x in stats.deltas:
            w.writerow([x.prompt_id, x.step, repr(x.vanilla_mean), repr(x.flashmem_mean), repr(x.delta),
                        repr(x.relative_pct)])
