"""Training the consolidator through the frozen backbone.

Each example becomes S = [x, M, y]: the prompt is prefilled (untracked),
the consolidator produces M from the last prompt state and the prompt
cache, and the backbone is teacher-forced over [M, y] with gradients
flowing back into the consolidator only. Labels are -100 on x and M.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.optim import AdamW, OptimizerConfig, clip_global_norm, global_grad_norm
from .autodiff.tensor import Tape, Tensor, backward
from .backbone import Backbone
from .consolidator import Consolidator
from .data import IGNORE, TrainingExample, batches
from .errors import ConfigError, ContractError, FrozenParameterError


@dataclass
class TrainConfig:
    """Table-6 style hyperparameters (key names double as config-file keys)."""

    optimizer: str = "AdamW"
    learning_rate: float = 1e-3
    reference_learning_rate: float = 1e-5  # large-model value, kept for traceability; too slow at this scale
    weight_decay: float = 0.01
    grad_clip: float = 0.53
    batch_size: int = 64
    epochs: int = 5
    scheduler: str = "cosine"
    warmup_ratio: float = 0.1
    k_memory_tokens: int = 8
    consolidator_layers: int = 1

    def __post_init__(self):
        if self.optimizer.lower() != "adamw":
            raise ConfigError(f"only AdamW is supported, got {self.optimizer!r}")
        if self.scheduler.lower() not in ("cosine", "cosine_decay"):
            raise ConfigError(f"only the cosine scheduler is supported, got {self.scheduler!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if not self.grad_clip > 0:
            raise ConfigError(f"grad_clip must be positive, got {self.grad_clip}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class StepMetrics:
    loss: float
    grad_norm: float  # after clipping
    grad_norm_pre_clip: float
    lr: float
    n_targets: int


# ----------------------------------------------------------------- loss


def masked_nll(logits: Tensor, labels: Sequence[int]) -> tuple[Tensor, int]:
    """Summed next-token NLL over non-sentinel labels, and how many there were.

    ``logits`` [len(S), V] and ``labels`` [len(S)] are aligned to S; row p
    predicts ``labels[p + 1]``.
    """
    labels = list(labels)
    if logits.ndim != 2 or logits.shape[0] != len(labels):
        raise ContractError(f"logits {logits.shape} are not aligned with {len(labels)} labels")
    rows = [p for p in range(len(labels) - 1) if labels[p + 1] != IGNORE]
    if not rows:
        raise ContractError("every label is the ignore sentinel; nothing to score")
    targets = [labels[p + 1] for p in rows]
    V = logits.shape[1]
    if any(not 0 <= t < V for t in targets):
        raise ContractError(f"label outside vocabulary of size {V}")
    logp = ops.log_softmax_rows(ops.index(logits, rows))
    picked = ops.pick(logp, range(len(rows)), targets)
    return ops.scale(ops.sum(picked), -1.0), len(rows)


def masked_loss(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean cross-entropy over positions whose label is not -100."""
    total, n = masked_nll(logits, labels)
    return ops.scale(total, 1.0 / n)


# ----------------------------------------------------------------- forward


def example_logits(backbone: Backbone, consolidator: Consolidator | None, ex: TrainingExample, *,
                   memory: str = "generated") -> tuple[Tensor, list[int]]:
    """Logits over S and aligned labels for one example.

    ``memory`` is "generated" (S = [x, M, y]), "zero" (M replaced by zero
    vectors, same length) or "none" (S = [x, y]). Logit rows for x other
    than the last are constant zeros: their labels are masked anyway.
    """
    cache, out = backbone.prefill(ex.x)
    V = backbone.config.vocab_size
    dt = backbone.dtype
    y = list(ex.y)
    tail = backbone.embed_tokens(y[:-1]) if len(y) > 1 else None
    if memory == "none":
        head = [ops.wrap(np.zeros((len(ex.x) - 1, V), dt)), ops.wrap(out.logits.reshape(1, V))]
        rows = tail
        k = 0
    else:
        if consolidator is None:
            raise ContractError("memory requested without a consolidator")
        k = consolidator.config.n_memory_tokens
        if memory == "generated":
            rows = consolidator.generate(out.last_hidden, cache).embeddings
        elif memory == "zero":
            rows = ops.wrap(np.zeros((k, backbone.config.d_model), dt))
        else:
            raise ContractError(f"unknown memory mode {memory!r}")
        if tail is not None:
            rows = ops.concat([rows, tail], axis=0)
        head = [ops.wrap(np.zeros((len(ex.x), V), dt))]
    parts = list(head)
    if rows is not None:
        hidden, _ = backbone.forward_hidden(rows, cache)
        parts.append(backbone.logits(hidden))
    parts.append(ops.wrap(np.zeros((1, V), dt)))  # the final position predicts nothing
    labels = [IGNORE] * (len(ex.x) + k) + y
    return ops.concat(parts, axis=0), labels


def batch_loss(backbone: Backbone, consolidator: Consolidator | None, batch: Sequence[TrainingExample], *,
               memory: str = "generated") -> tuple[Tensor, int]:
    """Sum of target NLLs over the batch divided by the total number of targets."""
    total, count = None, 0
    for ex in batch:
        logits, labels = example_logits(backbone, consolidator, ex, memory=memory)
        nll, n = masked_nll(logits, labels)
        total = nll if total is None else ops.add(total, nll)
        count += n
    if total is None:
        raise ContractError("empty batch")
    return ops.scale(total, 1.0 / count), count


def assert_frozen(backbone: Backbone) -> None:
    for name, p in backbone.named_parameters():
        if p.trainable or np.any(p.grad != 0):
            raise FrozenParameterError(f"backbone parameter {name} received a gradient")


def compute_gradients(backbone: Backbone, consolidator: Consolidator, batch: Sequence[TrainingExample]
                      ) -> tuple[float, int]:
    """Zero ψ grads, run forward/backward, verify the freeze contract. Returns (loss, targets)."""
    consolidator.zero_grad()
    with Tape() as tape:
        loss, n = batch_loss(backbone, consolidator, batch)
    backward(loss, tape)
    assert_frozen(backbone)
    return loss.item(), n


def train_step(batch: Sequence[TrainingExample], backbone: Backbone, consolidator: Consolidator,
               optimizer: AdamW, step_index: int, grad_clip: float = 0.53) -> StepMetrics:
    loss, n = compute_gradients(backbone, consolidator, batch)
    params = consolidator.parameters()
    pre = clip_global_norm(params, grad_clip)
    post = global_grad_norm(params)
    lr = optimizer.step(step_index)
    return StepMetrics(loss, post, pre, lr, n)


def make_optimizer(consolidator: Consolidator, config: TrainConfig, total_steps: int) -> AdamW:
    opt_cfg = OptimizerConfig(learning_rate=config.learning_rate, weight_decay=config.weight_decay,
                              warmup_ratio=config.warmup_ratio, total_steps=total_steps)
    return AdamW(consolidator.parameters(), opt_cfg)


def train(backbone: Backbone, consolidator: Consolidator, examples: Sequence[TrainingExample],
          config: TrainConfig, *, seed: int = 0,
          log: Callable[[int, StepMetrics], None] | None = None) -> list[StepMetrics]:
    """Shuffled mini-batch training for ``config.epochs`` epochs."""
    if not examples:
        raise ContractError("empty training set")
    if consolidator.config.n_memory_tokens != config.k_memory_tokens:
        raise ConfigError(
            f"consolidator K={consolidator.config.n_memory_tokens} but config asks for {config.k_memory_tokens}"
        )
    steps_per_epoch = math.ceil(len(examples) / config.batch_size)
    optimizer = make_optimizer(consolidator, config, steps_per_epoch * config.epochs)
    rng = np.random.default_rng(seed)
    history = []
    step = 0
    for _ in range(config.epochs):
        for batch in batches(examples, config.batch_size, rng):
            step += 1
            m = train_step(batch, backbone, consolidator, optimizer, step, config.grad_clip)
            history.append(m)
            if log is not None:
                log(step, m)
    return history


def overfit(backbone: Backbone, consolidator: Consolidator, batch: Sequence[TrainingExample], *,
            steps: int, learning_rate: float = 1e-3, grad_clip: float = 0.53, target: float | None = None,
            weight_decay: float = 0.01) -> list[StepMetrics]:
    """Repeat one batch at a constant learning rate; stop early once loss < target."""
    opt = AdamW(consolidator.parameters(),
                OptimizerConfig(learning_rate=learning_rate, weight_decay=weight_decay,
                                # effectively constant lr: this checks capacity, not the schedule
                                warmup_ratio=0.0, total_steps=10 ** 12))
    history = []
    for step in range(1, steps + 1):
        m = train_step(batch, backbone, consolidator, opt, step, grad_clip)
        history.append(m)
        if target is not None and m.loss < target:
            break
    return history


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    n_targets: int
    seconds: float


def evaluate(backbone: Backbone, consolidator: Consolidator | None, examples: Sequence[TrainingExample], *,
             memory: str = "generated") -> EvalResult:
    """Masked cross-entropy and greedy target accuracy (no gradients)."""
    t0 = time.perf_counter()
    total, hits, count = 0.0, 0, 0
    for ex in examples:
        logits, labels = example_logits(backbone, consolidator, ex, memory=memory)
        nll, n = masked_nll(logits, labels)
        total += nll.item()
        count += n
        rows = [p for p in range(len(labels) - 1) if labels[p + 1] != IGNORE]
        pred = logits.data[rows].argmax(axis=1)
        hits += int(np.sum(pred == np.asarray([labels[p + 1] for p in rows])))
    return EvalResult(total / count, hits / count, count, time.perf_counter() - t0)
