"""Cyclic efficiency benchmark and consolidator depth sweep.

The cyclic protocol prefills a synthetic context and then runs 8 cycles of
32 greedy text steps followed by one forced consolidation of K latents.
Memory is reported as a deterministic cache-byte ledger; wall times come
from a monotonic clock.
"""

from __future__ import annotations

import csv
import math
import resource
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .backbone import Backbone, BackboneConfig, init_backbone
from .consolidator import Consolidator, ConsolidatorConfig, inherit_weights
from .data import SyntheticTaskSpec, make_synthetic_dataset
from .engine import MODES, SEGREGATED, VANILLA, Session, normalize_mode, sample_token
from .errors import CapacityError, ConfigError, FormatError
from .trainer import TrainConfig, evaluate, train

DEFAULT_CONTEXTS = (256, 512, 1024, 2048, 4096)
BENCH_COLUMNS = (
    "context_len", "mode", "cache_bytes_peak", "consolidation_ms_mean", "consolidation_ms_std",
    "step_ms_mean", "effective_throughput_tokens_per_s", "n_runs", "rss_bytes_advisory",
)
TIMING_COLUMNS = ("consolidation_ms_mean", "consolidation_ms_std", "step_ms_mean",
                  "effective_throughput_tokens_per_s", "rss_bytes_advisory")


@dataclass
class RunSample:
    """One repetition of one (context, mode) cell."""

    consolidation_ms: list[float]
    step_ms: list[float]
    total_s: float
    cache_bytes_peak: int
    final_cache_len: int
    text_tokens: int

    @property
    def throughput(self) -> float:
        return self.text_tokens / self.total_s if self.total_s > 0 else math.inf


@dataclass
class BenchRow:
    context_len: int
    mode: str
    cache_bytes_peak: int
    consolidation_ms_mean: float
    consolidation_ms_std: float
    step_ms_mean: float
    effective_throughput_tokens_per_s: float
    n_runs: int
    rss_bytes_advisory: int = 0
    runs: list[RunSample] = field(default_factory=list, repr=False, compare=False)

    def values(self) -> list:
        return [getattr(self, c) for c in BENCH_COLUMNS]


@dataclass
class BenchReport:
    rows: list[BenchRow]

    def row(self, context_len: int, mode: str) -> BenchRow:
        mode = normalize_mode(mode)
        for r in self.rows:
            if r.context_len == context_len and r.mode == mode:
                return r
        raise KeyError((context_len, mode))

    def deterministic_view(self) -> list[tuple]:
        keep = [c for c in BENCH_COLUMNS if c not in TIMING_COLUMNS]
        return [tuple(getattr(r, c) for c in keep) for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(BENCH_COLUMNS)
            for r in self.rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in r.values()])

    @classmethod
    def read_csv(cls, path) -> "BenchReport":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != BENCH_COLUMNS:
                raise FormatError(f"{path}: unexpected bench header {reader.fieldnames}")
            rows = []
            for rec in reader:
                rows.append(BenchRow(
                    context_len=int(rec["context_len"]), mode=rec["mode"],
                    cache_bytes_peak=int(rec["cache_bytes_peak"]),
                    consolidation_ms_mean=float(rec["consolidation_ms_mean"]),
                    consolidation_ms_std=float(rec["consolidation_ms_std"]),
                    step_ms_mean=float(rec["step_ms_mean"]),
                    effective_throughput_tokens_per_s=float(rec["effective_throughput_tokens_per_s"]),
                    n_runs=int(rec["n_runs"]), rss_bytes_advisory=int(rec["rss_bytes_advisory"]),
                ))
        return cls(rows)


def synthetic_prompt(context_len: int, vocab_size: int, seed: int) -> list[int]:
    rng = np.random.default_rng([seed, context_len])
    return [int(t) for t in rng.integers(0, vocab_size, size=context_len)]


def _rss_bytes() -> int:
    # ru_maxrss is in KiB on Linux; a process-wide high-water mark, hence advisory only
    return int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss) * 1024


def _one_run(backbone: Backbone, consolidator: Consolidator, prompt, base_cache, base_out, mode: str,
             cycles: int, span: int) -> RunSample:
    session = Session(backbone, prompt, cache=base_cache.copy(), out=base_out)
    cons_ms, step_ms = [], []
    t_start = time.perf_counter()
    for _ in range(cycles):
        for _ in range(span):
            t0 = time.perf_counter()
            session.feed(sample_token(session.out.logits, 0.0, None))
            step_ms.append((time.perf_counter() - t0) * 1000.0)
        if mode != VANILLA:
            event = session.consolidate(consolidator, segregated=(mode == SEGREGATED))
            cons_ms.append(event.consolidation_wall_time * 1000.0)
    total = time.perf_counter() - t_start
    return RunSample(cons_ms, step_ms, total, session.peak_bytes, len(session.cache), cycles * span)


def bench_cyclic(backbone: Backbone, consolidator: Consolidator, contexts: Sequence[int] = DEFAULT_CONTEXTS,
                 modes: Sequence[str] = MODES, n_runs: int = 30, seed: int = 0, *, cycles: int = 8,
                 span: int = 32) -> BenchReport:
    """Run the cyclic protocol for every (context, mode) cell, ``n_runs`` times each.

    Each context is prefilled once; every run starts from a private copy of
    that cache, so only the cyclic phase is timed.
    """
    if n_runs < 1:
        raise ConfigError(f"n_runs must be >= 1, got {n_runs}")
    modes = [normalize_mode(m) for m in modes]
    k = consolidator.config.n_memory_tokens
    rows = []
    for ctx in contexts:
        extra = cycles * span + (cycles * k if any(m != VANILLA for m in modes) else 0)
        if ctx < 1 or ctx + extra > backbone.config.max_positions:
            raise CapacityError(
                f"context {ctx} plus {extra} generated positions exceeds max_positions="
                f"{backbone.config.max_positions}"
            )
        prompt = synthetic_prompt(ctx, backbone.config.vocab_size, seed)
        base_cache, base_out = backbone.prefill(prompt)
        for mode in modes:
            samples = [_one_run(backbone, consolidator, prompt, base_cache, base_out, mode, cycles, span)
                       for _ in range(n_runs)]
            per_run_cons = [float(np.mean(s.consolidation_ms)) if s.consolidation_ms else 0.0 for s in samples]
            peaks = {s.cache_bytes_peak for s in samples}
            if len(peaks) != 1:
                raise AssertionError(f"cache ledger differs across runs: {sorted(peaks)}")
            rows.append(BenchRow(
                context_len=ctx, mode=mode, cache_bytes_peak=peaks.pop(),
                consolidation_ms_mean=float(np.mean(per_run_cons)),
                consolidation_ms_std=float(np.std(per_run_cons, ddof=1)) if n_runs > 1 else 0.0,
                step_ms_mean=float(np.mean([np.mean(s.step_ms) for s in samples])),
                effective_throughput_tokens_per_s=float(np.mean([s.throughput for s in samples])),
                n_runs=n_runs, rss_bytes_advisory=_rss_bytes(), runs=samples,
            ))
    return BenchReport(rows)


# ------------------------------------------------------------------ depth sweep

DEPTH_COLUMNS = ("L", "heldout_accuracy", "heldout_loss", "consolidation_ms", "param_count")


@dataclass
class DepthRow:
    L: int
    heldout_accuracy: float
    heldout_loss: float
    consolidation_ms: float
    param_count: int


@dataclass
class DepthBudget:
    """Training budget shared by every depth in the sweep."""

    n_train: int = 128
    n_heldout: int = 64
    batch_size: int = 16
    epochs: int = 1
    learning_rate: float = 1e-3
    timing_context: int = 512
    timing_repeats: int = 15


def time_consolidation(backbone: Backbone, consolidators: Sequence[Consolidator], context_len: int, repeats: int,
                       seed: int = 0) -> list[float]:
    """Minimum wall time (ms) of project + generate per consolidator over one prefilled context.

    Consolidators are timed round-robin, so a slow spell on a shared machine
    affects every entry of a round instead of one depth.
    """
    cache, out = backbone.prefill(synthetic_prompt(context_len, backbone.config.vocab_size, seed))
    best = [math.inf] * len(consolidators)
    for cons in consolidators:
        cons.generate(out.last_hidden, cache)  # warm-up
    for _ in range(repeats):
        for i, cons in enumerate(consolidators):
            t0 = time.perf_counter()
            cons.generate(out.last_hidden, cache)
            best[i] = min(best[i], time.perf_counter() - t0)
    return [b * 1000.0 for b in best]


def depth_sweep(Ls: Sequence[int], task: SyntheticTaskSpec, seed: int = 0, *,
                backbone_config: BackboneConfig | None = None, k: int = 8,
                budget: DepthBudget | None = None) -> list[DepthRow]:
    """Train a fresh consolidator per depth under one budget; report accuracy, latency and size."""
    budget = budget or DepthBudget()
    Ls = list(Ls)
    if not Ls:
        raise ConfigError("depth sweep needs at least one depth")
    bc = backbone_config or BackboneConfig(n_layers=max(Ls) + 1)
    if max(Ls) >= bc.n_layers:
        raise ConfigError(f"depth {max(Ls)} needs a backbone with more than {max(Ls)} layers")
    backbone = init_backbone(bc, seed)
    train_set, heldout = make_synthetic_dataset(task, budget.n_train, budget.n_heldout)
    cfg = TrainConfig(learning_rate=budget.learning_rate, batch_size=budget.batch_size, epochs=budget.epochs,
                      k_memory_tokens=k)
    trained, evals = [], []
    for L in Ls:
        cons = inherit_weights(backbone, ConsolidatorConfig(n_layers=L, n_memory_tokens=k, d_model=bc.d_model),
                               seed=seed)
        train(backbone, cons, train_set, cfg, seed=seed)
        trained.append(cons)
        evals.append(evaluate(backbone, cons, heldout))
    ms = time_consolidation(backbone, trained, budget.timing_context, budget.timing_repeats, seed)
    return [DepthRow(L, ev.accuracy, ev.loss, t, cons.param_count())
            for L, ev, t, cons in zip(Ls, evals, ms, trained)]


def write_depth_csv(path, rows: Sequence[DepthRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(DEPTH_COLUMNS)
        for r in rows:
            w.writerow([r.L, repr(r.heldout_accuracy), repr(r.heldout_loss), repr(r.consolidation_ms), r.param_count])


def read_depth_csv(path) -> list[DepthRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != DEPTH_COLUMNS:
            raise FormatError(f"{path}: unexpected depth-sweep header {reader.fieldnames}")
        return [DepthRow(int(r["L"]), float(r["heldout_accuracy"]), float(r["heldout_loss"]),
                         float(r["consolidation_ms"]), int(r["param_count"])) for r in reader]
