"""Command-line entry point: ``flashmem <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

from .backbone import init_backbone
from .bench import DepthBudget, bench_cyclic, depth_sweep, write_depth_csv
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, save_config
from .consolidator import inherit_weights
from .data import BOS, make_synthetic_dataset
from .engine import GenerationConfig, RunTrace, VANILLA, run
from .errors import ConfigError, ContractError, FlashMemError
from .monitor import Monitor, calibrate_threshold
from .stats import entropy_stats, write_deltas_csv, write_stats_csv
from .trainer import evaluate, train


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _models(cfg: RunConfig, seed: int, checkpoint: str | None):
    path = checkpoint or cfg.checkpoint
    if path:
        backbone, consolidator = load_checkpoint(path)
        if consolidator is None:
            consolidator = inherit_weights(backbone, cfg.consolidator_config(), seed=seed)
        return backbone, consolidator
    backbone = init_backbone(cfg.backbone, seed)
    return backbone, inherit_weights(backbone, cfg.consolidator_config(), seed=seed)


def _read_prompt(path: str | None, cfg: RunConfig) -> list[int]:
    if path is None:
        _, heldout = make_synthetic_dataset(cfg.task, 1, 1)
        return list(heldout[0].x)
    raw = Path(path).read_bytes()
    try:
        tokens = json.loads(raw)
        if isinstance(tokens, list) and all(isinstance(t, int) for t in tokens):
            return tokens
    except (json.JSONDecodeError, UnicodeDecodeError):
        pass
    return [BOS] + list(raw.rstrip(b"\n"))


def _read_floats(path: str) -> list[float]:
    text = Path(path).read_text(encoding="utf-8").strip()
    if text.startswith("["):
        return [float(v) for v in json.loads(text)]
    return [float(v) for v in text.replace(",", " ").split()]


def _generation_config(cfg: RunConfig, mode: str, max_new: int | None, seed: int) -> GenerationConfig:
    g = cfg.generation
    return GenerationConfig(max_new_tokens=max_new or g.max_new_tokens, temperature=g.temperature,
                            sampling_seed=seed, trigger_cooldown=g.trigger_cooldown,
                            min_trigger_step=g.min_trigger_step, mode=mode)


# ------------------------------------------------------------------ commands


def cmd_train(args, cfg: RunConfig) -> int:
    backbone, consolidator = _models(cfg, args.seed, args.checkpoint)
    train_set, heldout = make_synthetic_dataset(cfg.task, cfg.n_train, cfg.n_heldout)

    def log(step, m):
        if args.verbose:
            print(f"step {step} loss {m.loss:.4f} grad_norm {m.grad_norm_pre_clip:.4f} lr {m.lr:.2e}", flush=True)

    history = train(backbone, consolidator, train_set, cfg.train, seed=args.seed, log=log)
    with_mem = evaluate(backbone, consolidator, heldout)
    without = evaluate(backbone, None, heldout, memory="none")
    save_checkpoint(args.out, backbone, consolidator)
    if args.metrics_csv:
        with open(args.metrics_csv, "w", encoding="utf-8") as fh:
            fh.write("step,loss,grad_norm,grad_norm_pre_clip,lr\n")
            for i, m in enumerate(history, 1):
                fh.write(f"{i},{m.loss!r},{m.grad_norm!r},{m.grad_norm_pre_clip!r},{m.lr!r}\n")
    print(json.dumps({"steps": len(history), "final_loss": history[-1].loss,
                      "heldout_loss_memory": with_mem.loss, "heldout_loss_no_memory": without.loss,
                      "heldout_accuracy_memory": with_mem.accuracy, "checkpoint": str(args.out)}))
    return 0


def cmd_generate(args, cfg: RunConfig) -> int:
    backbone, consolidator = _models(cfg, args.seed, args.checkpoint)
    prompt = _read_prompt(args.prompt_file, cfg)
    gen = _generation_config(cfg, args.mode, args.max_new_tokens, args.seed)
    mcfg = cfg.monitor_config()
    if args.tau is not None:
        mcfg = mcfg.with_threshold(args.tau)
    if gen.mode != VANILLA and mcfg.threshold is None:
        raise ConfigError("no entropy threshold: pass --tau or run calibrate first")
    trace = run(prompt, backbone, Monitor(mcfg), consolidator, gen, prompt_id=args.prompt_id)
    if args.trace_out:
        trace.write_jsonl(args.trace_out)
    if args.svg:
        if not args.trace_out:
            raise ContractError("--svg renders from the trace file; pass --trace-out as well")
        from .plots import plot_entropy_trace
        plot_entropy_trace([args.trace_out], args.svg, tau=None if gen.mode == VANILLA else mcfg.threshold)
    print(json.dumps({"mode": trace.mode, "tokens": trace.generated_tokens, "triggers": trace.trigger_steps,
                      "final_cache_len": trace.final_cache_len}))
    return 0


def cmd_calibrate(args, cfg: RunConfig) -> int:
    if args.config is None:
        raise ConfigError("calibrate writes the threshold into the config; pass --config")
    if args.entropies:
        values = _read_floats(args.entropies)
    else:
        backbone, _ = _models(cfg, args.seed, args.checkpoint)
        _, heldout = make_synthetic_dataset(cfg.task, 1, args.n_prompts)
        gen = _generation_config(cfg, VANILLA, None, args.seed)
        monitor = Monitor(cfg.monitor_config())
        values = []
        for ex in heldout:
            tr = run(list(ex.x), backbone, monitor, None, gen)
            values += [r.entropy for r in tr.entropies if r.step > gen.min_trigger_step]
    tau = calibrate_threshold(values, args.percentile)
    cfg.entropy_threshold = tau
    cfg.percentile_target = args.percentile
    save_config(args.config, cfg)
    print(json.dumps({"entropy_threshold": tau, "percentile": args.percentile, "n": len(values)}))
    return 0


def cmd_bench(args, cfg: RunConfig) -> int:
    backbone, consolidator = _models(cfg, args.seed, args.checkpoint)
    report = bench_cyclic(backbone, consolidator, args.contexts, args.modes.split(","), args.runs, args.seed)
    report.write_csv(args.out)
    if args.svg:
        from .plots import plot_bench
        plot_bench(args.out, args.svg)
    print(json.dumps({"rows": len(report.rows), "csv": str(args.out)}))
    return 0


def cmd_entropy_stats(args, cfg: RunConfig) -> int:
    vanilla = [RunTrace.read_jsonl(p) for p in args.vanilla]
    memory = [RunTrace.read_jsonl(p) for p in args.flashmem]
    stats = entropy_stats(vanilla, memory, window_len=args.window, min_step=args.min_step, tau_sig=args.tau_sig,
                          truncate=args.truncate)
    if args.out:
        write_stats_csv(args.out, stats)
    if args.deltas_out:
        write_deltas_csv(args.deltas_out, stats)
    row = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in stats.as_row().items()}
    print(json.dumps(row))
    return 0


def cmd_depth_sweep(args, cfg: RunConfig) -> int:
    budget = DepthBudget(n_train=args.n_train, n_heldout=args.n_heldout, epochs=args.epochs,
                         learning_rate=cfg.train.learning_rate)
    # the deepest consolidator must still be shallower than the backbone
    bc = replace(cfg.backbone, n_layers=max(cfg.backbone.n_layers, max(args.layers) + 1))
    rows = depth_sweep(args.layers, cfg.task, args.seed, backbone_config=bc, k=cfg.train.k_memory_tokens,
                       budget=budget)
    write_depth_csv(args.out, rows)
    if args.svg:
        from .plots import plot_depth
        plot_depth(args.out, args.svg)
    print(json.dumps({"rows": len(rows), "csv": str(args.out)}))
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flashmem", description="Entropy-gated shared-KV latent memory.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=fn)
        return p

    p = add("train", cmd_train, "train the consolidator on the configured synthetic task")
    p.add_argument("--out", default="flashmem.ckpt", help="checkpoint to write")
    p.add_argument("--checkpoint", default=None, help="start from this checkpoint")
    p.add_argument("--metrics-csv", default=None)
    p.add_argument("--verbose", action="store_true")

    p = add("generate", cmd_generate, "run the inference loop on one prompt")
    p.add_argument("--mode", choices=["vanilla", "flashmem", "segregated"], default="flashmem")
    p.add_argument("--tau", type=float, default=None, help="entropy threshold (ignored in vanilla mode)")
    p.add_argument("--prompt-file", default=None, help="JSON token list or raw text")
    p.add_argument("--prompt-id", default=None)
    p.add_argument("--trace-out", default=None, help="write a .trace.jsonl file")
    p.add_argument("--svg", default=None, help="entropy-vs-step figure rendered from the trace")
    p.add_argument("--max-new-tokens", type=int, default=None)
    p.add_argument("--checkpoint", default=None)

    p = add("calibrate", cmd_calibrate, "set the entropy threshold to a percentile of validation entropies")
    p.add_argument("--percentile", type=float, default=85.0)
    p.add_argument("--entropies", default=None, help="file of entropy values (JSON list or whitespace separated)")
    p.add_argument("--n-prompts", type=int, default=16)
    p.add_argument("--checkpoint", default=None)

    p = add("bench-cyclic", cmd_bench, "cyclic consolidation benchmark")
    p.add_argument("--contexts", type=_int_list, default=[256, 512, 1024, 2048, 4096])
    p.add_argument("--modes", default="vanilla,flashmem,segregated")
    p.add_argument("--runs", type=int, default=30)
    p.add_argument("--out", default="bench_cyclic.csv")
    p.add_argument("--svg", default=None)
    p.add_argument("--checkpoint", default=None)

    p = add("entropy-stats", cmd_entropy_stats, "window-based entropy reduction statistics")
    p.add_argument("--vanilla", nargs="+", required=True, help="vanilla .trace.jsonl files")
    p.add_argument("--flashmem", nargs="+", required=True, help="memory-mode .trace.jsonl files")
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--min-step", type=int, default=5)
    p.add_argument("--tau-sig", type=float, default=0.5)
    p.add_argument("--truncate", choices=["drop", "clip"], default="drop")
    p.add_argument("--out", default=None)
    p.add_argument("--deltas-out", default=None)

    p = add("depth-sweep", cmd_depth_sweep, "train and time consolidators of increasing depth")
    p.add_argument("--layers", type=_int_list, default=[1, 2, 3, 4, 5, 6])
    p.add_argument("--n-train", type=int, default=128)
    p.add_argument("--n-heldout", type=int, default=64)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--out", default="depth_sweep.csv")
    p.add_argument("--svg", default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # usage errors exit with status 2
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (FlashMemError, OSError) as exc:
        print("flashmem: error: " + " ".join(str(exc).split()), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
