"""Synthetic byte-level tasks used to train and evaluate the consolidator."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError

PAD, BOS, SEP, EQ, QUERY = 0, 1, 2, 3, 4
IGNORE = -100

KEY_TOKENS = tuple(range(ord("a"), ord("z") + 1))
VALUE_TOKENS = tuple(range(ord("A"), ord("Z") + 1))
DISTRACTOR_TOKENS = tuple(range(128, 256))
DIGIT_BASE = ord("0")


@dataclass(frozen=True)
class TrainingExample:
    x: tuple[int, ...]
    y: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(int(t) for t in self.x))
        object.__setattr__(self, "y", tuple(int(t) for t in self.y))
        if not self.x or not self.y:
            raise ContractError("a training example needs non-empty x and y")

    def to_json(self) -> dict:
        return {"x": list(self.x), "y": list(self.y)}


@dataclass(frozen=True)
class SyntheticTaskSpec:
    task: str = "key_value_recall"
    n_pairs: int = 8
    distractor_len: int = 64
    seed: int = 0
    modulus: int = 10
    key_tokens: tuple[int, ...] = field(default=KEY_TOKENS)
    value_tokens: tuple[int, ...] = field(default=VALUE_TOKENS)
    distractor_tokens: tuple[int, ...] = field(default=DISTRACTOR_TOKENS)

    def __post_init__(self):
        if self.task not in ("key_value_recall", "modular_addition"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.task == "key_value_recall":
            if self.n_pairs < 1:
                raise ConfigError(f"n_pairs must be >= 1, got {self.n_pairs}")
            if self.n_pairs > len(self.key_tokens):
                raise ConfigError(
                    f"{self.n_pairs} pairs need distinct keys but the key vocabulary has {len(self.key_tokens)}"
                )
            if not self.value_tokens:
                raise ConfigError("empty value vocabulary")
        if self.distractor_len < 0:
            raise ConfigError(f"distractor_len must be >= 0, got {self.distractor_len}")
        if self.distractor_len and not self.distractor_tokens:
            raise ConfigError("distractor span requested with an empty distractor vocabulary")
        if self.task == "modular_addition" and not 2 <= self.modulus <= 10:
            raise ConfigError(f"modulus must lie in [2, 10] for single-digit answers, got {self.modulus}")


def _digits(n: int) -> list[int]:
    return [DIGIT_BASE + int(c) for c in str(n)]


def _recall_example(spec: SyntheticTaskSpec, rng: np.random.Generator) -> TrainingExample:
    keys = rng.choice(spec.key_tokens, size=spec.n_pairs, replace=False)
    values = rng.choice(spec.value_tokens, size=spec.n_pairs, replace=True)
    x = [BOS]
    for k, v in zip(keys, values):
        x += [int(k), EQ, int(v), SEP]
    if spec.distractor_len:
        x += [int(t) for t in rng.choice(spec.distractor_tokens, size=spec.distractor_len)]
    q = int(rng.integers(spec.n_pairs))
    x += [QUERY, int(keys[q])]
    return TrainingExample(tuple(x), (int(values[q]),))


def _addition_example(spec: SyntheticTaskSpec, rng: np.random.Generator) -> TrainingExample:
    a, b = (int(v) for v in rng.integers(0, 100, size=2))
    x = [BOS] + _digits(a) + [ord("+")] + _digits(b)
    if spec.distractor_len:
        x += [int(t) for t in rng.choice(spec.distractor_tokens, size=spec.distractor_len)]
    x += [EQ]
    return TrainingExample(tuple(x), (DIGIT_BASE + (a + b) % spec.modulus,))


def recall_answer(x: Sequence[int]) -> int:
    """Value bound to the queried key, read back from the prompt."""
    key = x[-1]
    for i in range(1, len(x) - 3):
        if x[i] == key and x[i + 1] == EQ and (i == 1 or x[i - 1] == SEP):
            return x[i + 2]
    raise ContractError("queried key is not bound in the prompt")


def _generate(spec: SyntheticTaskSpec, n: int, seed: int, exclude: set | None = None) -> list[TrainingExample]:
    rng = np.random.default_rng(seed)
    make = _recall_example if spec.task == "key_value_recall" else _addition_example
    out, seen = [], set()
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 50 * n + 1000:
            raise ConfigError(f"task space too small to draw {n} distinct examples")
        ex = make(spec, rng)
        key = (ex.x, ex.y)
        if key in seen or (exclude and key in exclude):
            continue
        seen.add(key)
        out.append(ex)
    return out


def make_synthetic_dataset(spec: SyntheticTaskSpec, n_train: int, n_heldout: int):
    """Train and heldout splits drawn from disjoint seed streams.

    Heldout draws additionally reject any exact (x, y) already in train.
    """
    train = _generate(spec, n_train, seed=2 * spec.seed)
    seen = {(e.x, e.y) for e in train}
    heldout = _generate(spec, n_heldout, seed=2 * spec.seed + 1, exclude=seen)
    return train, heldout


def write_dataset(path, examples: Iterable[TrainingExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_json()) + "\n")


def read_dataset(path) -> list[TrainingExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(TrainingExample(rec["x"], rec["y"]))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ContractError(f"{path}:{lineno}: bad dataset record ({exc})") from exc
    return out


def spec_to_dict(spec: SyntheticTaskSpec) -> dict:
    d = asdict(spec)
    for k in ("key_tokens", "value_tokens", "distractor_tokens"):
        d.pop(k)
    return d


def build_labels(example: TrainingExample, k: int) -> list[int]:
    """Labels aligned to S = [x, M, y]: the ignore sentinel on x and M, targets on y."""
    return [IGNORE] * (len(example.x) + k) + list(example.y)


def batches(examples: Sequence, batch_size: int, rng: np.random.Generator | None = None):
    order = np.arange(len(examples))
    if rng is not None:
        rng.shuffle(order)
    for i in range(0, len(order), batch_size):
        yield [examples[j] for j in order[i:i + batch_size]]

