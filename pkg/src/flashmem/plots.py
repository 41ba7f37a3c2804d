"""SVG figures. Every figure is rendered from files already written (CSV or trace)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .bench import BenchReport, read_depth_csv  # noqa: E402
from .engine import RunTrace  # noqa: E402

_SVG_META = {"Date": None}  # keeps output byte-stable across runs


def _save(fig, path) -> None:
    fig.tight_layout()
    # a fixed salt makes the generated clip-path ids repeatable
    with matplotlib.rc_context({"svg.hashsalt": "flashmem"}):
        fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def plot_entropy_trace(trace_paths, svg_path, tau: float | None = None) -> None:
    """Entropy against step for one or more traces, trigger steps marked."""
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for p in trace_paths:
        tr = RunTrace.read_jsonl(p)
        steps = [r.step for r in tr.entropies]
        line, = ax.plot(steps, tr.entropy_values, lw=1.2, label=f"{tr.prompt_id or ''} {tr.mode}".strip())
        by_step = dict(zip(steps, tr.entropy_values))
        marks = [s for s in tr.trigger_steps if s in by_step]
        if marks:
            ax.scatter(marks, [by_step[s] for s in marks], marker="v", color=line.get_color(), zorder=3)
    if tau is not None:
        ax.axhline(tau, ls="--", lw=0.8, color="grey", label="threshold")
    ax.set_xlabel("generation step")
    ax.set_ylabel("attention entropy (nats)")
    ax.legend(fontsize=7)
    _save(fig, svg_path)


def plot_depth(csv_path, svg_path) -> None:
    """Consolidation latency and trainable size against depth."""
    rows = read_depth_csv(csv_path)
    Ls = [r.L for r in rows]
    fig, ax1 = plt.subplots(figsize=(6, 3.5))
    ax1.plot(Ls, [r.consolidation_ms for r in rows], "o-", color="tab:blue")
    ax1.set_xlabel("consolidator layers")
    ax1.set_ylabel("consolidation latency (ms)", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(Ls, [r.param_count for r in rows], "s--", color="tab:red")
    ax2.set_ylabel("trainable parameters", color="tab:red")
    _save(fig, svg_path)


def plot_bench(csv_path, svg_path) -> None:
    """Per-mode consolidation latency and peak cache bytes against context length."""
    report = BenchReport.read_csv(csv_path)
    modes = sorted({r.mode for r in report.rows})
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for m in modes:
        rows = sorted((r for r in report.rows if r.mode == m), key=lambda r: r.context_len)
        ctx = [r.context_len for r in rows]
        ax1.plot(ctx, [r.consolidation_ms_mean for r in rows], "o-", label=m)
        ax2.plot(ctx, [r.cache_bytes_peak / 2 ** 20 for r in rows], "o-", label=m)
    ax1.set_xlabel("context length")
    ax1.set_ylabel("consolidation (ms)")
    ax2.set_xlabel("context length")
    ax2.set_ylabel("peak cache (MiB)")
    ax1.legend(fontsize=7)
    _save(fig, svg_path)
