"""Entropy-gated inference loop with soft memory injection.

Per generated step: read the backbone's current output, score its
last-layer attention with the monitor, and if the entropy exceeds the
threshold (and the step is eligible) consolidate memory, inject it into the
cache, and only then sample the next token from the post-injection logits.

``segregated_baseline`` mode has the same trigger semantics but rebuilds a
private cache over the whole history before every consolidation, which is
the cost profile of a memory generator that keeps its own encoder state.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .backbone import Backbone, KvCache, StepOutput
from .consolidator import Consolidator, LatentMemory
from .errors import CapacityError, ConfigError, ContractError, DimensionError
from .monitor import EntropyRecord, Monitor

VANILLA = "vanilla"
FLASHMEM = "flashmem"
SEGREGATED = "segregated_baseline"
MODES = (VANILLA, FLASHMEM, SEGREGATED)
_MODE_ALIASES = {"segregated": SEGREGATED}


def normalize_mode(mode: str) -> str:
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    return mode


@dataclass
class GenerationConfig:
    max_new_tokens: int = 64
    temperature: float = 0.0  # 0 means greedy
    sampling_seed: int = 0
    trigger_cooldown: int = 16
    min_trigger_step: int = 5
    mode: str = FLASHMEM
    keep_attention: bool = False

    def __post_init__(self):
        self.mode = normalize_mode(self.mode)
        if self.max_new_tokens < 1:
            raise ConfigError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")
        if self.trigger_cooldown < 0:
            raise ConfigError(f"trigger_cooldown must be >= 0, got {self.trigger_cooldown}")
        if self.temperature < 0:
            raise ConfigError(f"temperature must be >= 0, got {self.temperature}")


@dataclass
class TriggerEvent:
    step: int
    entropy_at_trigger: float
    memory: LatentMemory | None
    cache_len_before: int
    consolidation_wall_time: float  # seconds
    k: int = 0
    private_cache_bytes: int = 0


@dataclass
class RunTrace:
    prompt_tokens: list[int]
    mode: str
    prompt_id: str | None = None
    threshold: float | None = None
    generated_tokens: list[int] = field(default_factory=list)
    entropies: list[EntropyRecord] = field(default_factory=list)
    triggers: list[TriggerEvent] = field(default_factory=list)
    step_ms: list[float] = field(default_factory=list)
    cache_lens: list[int] = field(default_factory=list)
    cache_bytes_peak: int = 0
    latent_flags: list[bool] = field(default_factory=list)
    attention: list[np.ndarray] | None = None

    @property
    def trigger_steps(self) -> list[int]:
        return [e.step for e in self.triggers]

    @property
    def entropy_values(self) -> list[float]:
        return [r.entropy for r in self.entropies]

    @property
    def final_cache_len(self) -> int:
        return self.cache_lens[-1] if self.cache_lens else len(self.prompt_tokens)

    def deterministic_view(self) -> dict:
        """Everything except wall-clock timings; equal for replayed runs."""
        return {
            "prompt": list(self.prompt_tokens),
            "mode": self.mode,
            "tokens": list(self.generated_tokens),
            "entropies": [r.entropy for r in self.entropies],
            "per_head": [r.per_head_entropy for r in self.entropies],
            "triggers": [(e.step, e.entropy_at_trigger, e.cache_len_before, e.k) for e in self.triggers],
            "memories": [e.memory.embeddings.data.tobytes() if e.memory is not None else b"" for e in self.triggers],
            "cache_lens": list(self.cache_lens),
            "cache_bytes_peak": self.cache_bytes_peak,
            "latent_flags": list(self.latent_flags),
        }

    # ---------------------------------------------------------------- jsonl

    def records(self) -> Iterable[dict]:
        yield {"prompt_id": self.prompt_id, "mode": self.mode, "prompt_tokens": list(self.prompt_tokens),
               "threshold": _json_float(self.threshold)}
        by_step = {e.step: e for e in self.triggers}
        for i, rec in enumerate(self.entropies):
            yield {"step": rec.step, "token": self.generated_tokens[i], "entropy": rec.entropy,
                   "triggered": rec.step in by_step, "wall_ms": self.step_ms[i], "cache_len": self.cache_lens[i]}
            if rec.step in by_step:
                e = by_step[rec.step]
                yield {"step": e.step, "entropy": e.entropy_at_trigger, "k": e.k,
                       "consolidation_ms": e.consolidation_wall_time * 1000.0}

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "RunTrace":
        trace = None
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                if "prompt_tokens" in rec:
                    tau = rec.get("threshold")
                    trace = cls(prompt_tokens=rec["prompt_tokens"], mode=rec["mode"], prompt_id=rec["prompt_id"],
                                threshold=None if tau is None else float(tau))
                    continue
                if trace is None:
                    raise ContractError(f"{path}:{lineno}: trace record before header")
                if "k" in rec:
                    trace.triggers.append(TriggerEvent(rec["step"], rec["entropy"], None, -1,
                                                       rec["consolidation_ms"] / 1000.0, k=rec["k"]))
                else:
                    trace.entropies.append(EntropyRecord(rec["step"], rec["entropy"], bool(rec["triggered"])))
                    trace.generated_tokens.append(rec["token"])
                    trace.step_ms.append(rec["wall_ms"])
                    trace.cache_lens.append(rec["cache_len"])
        if trace is None:
            raise ContractError(f"{path}: empty trace file")
        return trace


def _json_float(x):
    if x is None or not math.isfinite(x):
        return None if x is None else str(x)
    return x


# -------------------------------------------------------------------- session


class Session:
    """One generation context: a live cache, its input history and a byte ledger."""

    def __init__(self, backbone: Backbone, prompt: Sequence[int], *,
                 cache: KvCache | None = None, out: StepOutput | None = None):
        self.backbone = backbone
        if cache is None:
            cache, out = backbone.prefill(prompt)
        self.cache = cache
        self.out = out
        self.history: list = [int(t) for t in prompt]
        self.peak_bytes = cache.byte_count()

    def _note(self, extra_bytes: int = 0) -> None:
        self.peak_bytes = max(self.peak_bytes, self.cache.byte_count() + extra_bytes)

    def feed(self, token: int) -> StepOutput:
        self.out = self.backbone.decode_step(int(token), self.cache)
        self.history.append(int(token))
        self._note()
        return self.out

    def inject(self, memory: LatentMemory) -> StepOutput:
        self.out = inject(memory, self.backbone, self.cache)
        self.history.extend(np.array(r) for r in memory.rows())
        self._note()
        return self.out

    def consolidate(self, consolidator: Consolidator, *, segregated: bool = False,
                    step: int = -1, entropy: float = float("nan")) -> TriggerEvent:
        """Generate memory from the current state and inject it; timed end to end."""
        k = consolidator.config.n_memory_tokens
        before = len(self.cache)
        if before + k > self.backbone.config.max_positions:
            raise CapacityError(f"injecting {k} latents into a cache of {before} exceeds max_positions")
        h_t = self.out.last_hidden
        t0 = time.perf_counter()
        private = 0
        if segregated:
            source, _ = self.backbone.prefill_inputs(self.history)
            private = source.byte_count()
            self._note(private)
        else:
            source = self.cache
        memory = consolidator.generate(h_t, source, trigger_step=step, trigger_entropy=entropy)
        del source
        self.inject(memory)
        elapsed = time.perf_counter() - t0
        return TriggerEvent(step, entropy, memory, before, elapsed, k=memory.k, private_cache_bytes=private)


def inject(memory: LatentMemory, backbone: Backbone, cache: KvCache) -> StepOutput:
    """Feed each latent through the backbone, appending K latent-flagged positions."""
    rows = memory.rows()
    if not rows:
        raise ConfigError("memory holds no latent embeddings")
    if len(cache) + len(rows) > backbone.config.max_positions:
        raise CapacityError(
            f"injecting {len(rows)} latents into a cache of {len(cache)} exceeds max_positions="
            f"{backbone.config.max_positions}"
        )
    out = None
    for row in rows:
        out = backbone.decode_step(row, cache)
    return out


def sample_token(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    if temperature == 0:
        return int(np.argmax(logits))
    z = np.asarray(logits, dtype=np.float64) / temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


def _check_compatible(backbone: Backbone, consolidator: Consolidator | None, mode: str) -> None:
    if mode == VANILLA:
        return
    if consolidator is None:
        raise ContractError(f"mode {mode!r} needs a consolidator")
    if consolidator.config.d_model != backbone.config.d_model:
        raise DimensionError(
            f"consolidator d_model {consolidator.config.d_model} != backbone d_model {backbone.config.d_model}"
        )


def run(prompt: Sequence[int], backbone: Backbone, monitor: Monitor, consolidator: Consolidator | None,
        config: GenerationConfig, *, prompt_id: str | None = None,
        forced_steps: Iterable[int] | None = None) -> RunTrace:
    """Generate ``config.max_new_tokens`` tokens, consolidating when the monitor fires.

    ``forced_steps`` replaces the entropy test with a fixed schedule (cooldown
    and minimum step still apply); used to replay identical triggers across modes.
    """
    mode = config.mode
    _check_compatible(backbone, consolidator, mode)
    if mode == VANILLA:
        tau = math.inf
    else:
        tau = monitor.config.threshold
        if tau is None and forced_steps is None:
            raise ConfigError("entropy threshold is not set; calibrate or pass one explicitly")
    forced = set(forced_steps) if forced_steps is not None else None
    rng = np.random.default_rng(config.sampling_seed)

    session = Session(backbone, prompt)
    trace = RunTrace(prompt_tokens=[int(t) for t in prompt], mode=mode, prompt_id=prompt_id, threshold=tau)
    if config.keep_attention:
        trace.attention = []
    last_trigger: int | None = None
    for step in range(config.max_new_tokens):
        t0 = time.perf_counter()
        out = session.out
        rec = monitor.observe(out.last_layer_attention, step, tau if tau is not None else math.inf)
        if trace.attention is not None:
            trace.attention.append(out.last_layer_attention)
        wants = rec.triggered if forced is None else step in forced
        eligible = (
            mode != VANILLA
            and step > config.min_trigger_step
            and (last_trigger is None or step - last_trigger >= config.trigger_cooldown)
        )
        if wants and eligible:
            event = session.consolidate(consolidator, segregated=(mode == SEGREGATED),
                                        step=step, entropy=rec.entropy)
            trace.triggers.append(event)
            last_trigger = step
        token = sample_token(session.out.logits, config.temperature, rng)
        session.feed(token)
        trace.entropies.append(rec)
        trace.generated_tokens.append(token)
        trace.cache_lens.append(len(session.cache))
        trace.step_ms.append((time.perf_counter() - t0) * 1000.0)
    trace.cache_bytes_peak = session.peak_bytes
    trace.latent_flags = list(session.cache.is_latent)
    return trace


def run_segregated_baseline(prompt: Sequence[int], backbone: Backbone, monitor: Monitor,
                            consolidator_clone: Consolidator, config: GenerationConfig, **kwargs) -> RunTrace:
    cfg = GenerationConfig(**{**config.__dict__, "mode": SEGREGATED})
    return run(prompt, backbone, monitor, consolidator_clone, cfg, **kwargs)


def write_traces(traces: Sequence[RunTrace], directory, stem: str = "run") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, tr in enumerate(traces):
        p = directory / f"{stem}_{tr.prompt_id or i}.{tr.mode}.trace.jsonl"
        tr.write_jsonl(p)
        paths.append(p)
    return paths
