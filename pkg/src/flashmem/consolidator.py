"""Shared-KV memory consolidator.

The consolidator turns the backbone's last hidden state into ``K`` latent
embeddings. Each of its ``L`` layers is a copy of one of the backbone's last
``L`` blocks with an extra cross-attention sub-block that reads the
backbone's KV cache directly: only the query (and the inherited output)
projection is applied, never a key or value projection.

Layer order: pre-norm self-attention over the latent prefix, pre-norm
cross-attention into the cache, pre-norm gated MLP, each with a residual.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterator

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Parameter, Tensor, as_dtype
from .backbone import Backbone, BackboneConfig, KvCache
from .errors import ConfigError, ContractError, DimensionError


@dataclass(frozen=True)
class ConsolidatorConfig:
    n_layers: int = 1
    n_memory_tokens: int = 8
    d_model: int = 64
    init_std: float = 0.02

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError(f"consolidator needs at least one layer, got {self.n_layers}")
        if self.n_memory_tokens < 1:
            raise ConfigError(f"n_memory_tokens must be >= 1, got {self.n_memory_tokens}")
        if self.d_model < 1:
            raise ConfigError(f"d_model must be >= 1, got {self.d_model}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ConsolidatorConfig":
        return cls(**d)


@dataclass
class ProjectionMlp:
    """m_0 = W2 . silu(W1 . h + b1) + b2 (row-vector convention: h @ W1)."""

    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter

    def named(self) -> Iterator[tuple[str, Parameter]]:
        for f in fields(self):
            yield f.name, getattr(self, f.name)

    def __call__(self, h: Tensor) -> Tensor:
        return project_state(self, h)


def project_state(mlp: ProjectionMlp, h_t) -> Tensor:
    """Project a hidden state [d] (or rows [T, d]) to the seed latent m_0."""
    h = h_t if isinstance(h_t, Tensor) else Tensor(h_t, dtype=mlp.w1.dtype)
    d = mlp.w1.shape[0]
    if h.shape[-1] != d or h.ndim > 2:
        raise ContractError(f"hidden state must have trailing dimension {d}, got {h.shape}")
    rows = ops.reshape(h, (1, d)) if h.ndim == 1 else h
    z = ops.silu(ops.add(ops.matmul(rows, mlp.w1), mlp.b1))
    return ops.add(ops.matmul(z, mlp.w2), mlp.b2)


@dataclass
class ConsolidatorLayer:
    attn_norm: Parameter
    wq: Parameter
    wk: Parameter
    wv: Parameter
    wo: Parameter
    cross_norm: Parameter
    cross_wq: Parameter
    cross_wo: Parameter
    mlp_norm: Parameter
    w_gate: Parameter
    w_up: Parameter
    w_down: Parameter
    source_layer: int

    def named(self) -> Iterator[tuple[str, Parameter]]:
        for f in fields(self):
            if f.name != "source_layer":
                yield f.name, getattr(self, f.name)


@dataclass
class LatentMemory:
    """K consolidated embeddings plus generation metadata."""

    embeddings: Tensor  # [K, d_model]
    seed: Tensor  # [d_model]
    trigger_step: int = -1
    trigger_entropy: float = float("nan")

    @property
    def k(self) -> int:
        return self.embeddings.shape[0]

    def rows(self) -> list[np.ndarray]:
        return [row for row in self.embeddings.data]


def cross_attend(x: Tensor, keys, values, wq: Tensor, wo: Tensor, n_heads: int) -> Tensor:
    """Projection-free cross-attention of ``x`` [T, d] into raw cache tensors.

    ``keys``/``values`` are [Tc, n_heads, d_head] (already rotated, as stored
    by the backbone). Per head: softmax((x Wq) K^T / sqrt(d_head)) V; heads
    are concatenated and passed through ``wo``. Queries are not rotated.
    """
    keys = keys.data if isinstance(keys, Tensor) else np.asarray(keys)
    values = values.data if isinstance(values, Tensor) else np.asarray(values)
    return _cross_attend_heads(x, keys.transpose(1, 0, 2), values.transpose(1, 0, 2), wq, wo, n_heads)


def _cross_attend_heads(x: Tensor, kh: np.ndarray, vh: np.ndarray, wq: Tensor, wo: Tensor,
                        n_heads: int) -> Tensor:
    if kh.ndim != 3 or kh.shape[1] == 0:
        raise ContractError("cross-attention into an empty cache")
    T, d = x.shape
    D = d // n_heads
    if kh.shape[0] != n_heads or kh.shape[2] != D:
        raise DimensionError(f"cache heads {kh.shape} do not match {n_heads} heads of size {D}")
    q = ops.permute(ops.reshape(ops.matmul(x, wq), (T, n_heads, D)), (1, 0, 2))
    o, _ = ops.attention(q, ops.wrap(kh), ops.wrap(vh), causal=False)
    o = ops.reshape(ops.permute(o, (1, 0, 2)), (T, d))
    return ops.matmul(o, wo)


class Consolidator:
    def __init__(self, config: ConsolidatorConfig, backbone_config: BackboneConfig,
                 projection: ProjectionMlp, layers: list[ConsolidatorLayer]):
        self.config = config
        self.backbone_config = backbone_config
        self.projection = projection
        self.layers = layers

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for name, p in self.projection.named():
            yield f"projection.{name}", p
        for i, layer in enumerate(self.layers):
            for name, p in layer.named():
                yield f"layers.{i}.{name}", p

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return param_count(self)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def cache_layer(self, i: int) -> int:
        """Backbone layer whose KV cache consolidator layer ``i`` reads."""
        return self.layers[i].source_layer

    def project_state(self, h_t) -> Tensor:
        return project_state(self.projection, h_t)

    def cross_attend(self, x: Tensor, cache: KvCache, layer_index: int) -> Tensor:
        layer = self.layers[layer_index]
        src = layer.source_layer
        return _cross_attend_heads(x, cache.head_keys(src), cache.head_values(src),
                                   layer.cross_wq, layer.cross_wo, self.backbone_config.n_heads)

    def stack(self, seq: Tensor, cache: KvCache) -> Tensor:
        """Apply all layers to the latent sequence [T, d] (causal, local positions 0..T-1)."""
        bc = self.backbone_config
        T = seq.shape[0]
        H, D, eps = bc.n_heads, bc.d_head, bc.norm_eps
        positions = list(range(T))
        h = seq
        for i, layer in enumerate(self.layers):
            a = ops.rms_norm(h, layer.attn_norm, eps)
            q = ops.rope(ops.reshape(ops.matmul(a, layer.wq), (T, H, D)), positions, bc.rope_base)
            k = ops.rope(ops.reshape(ops.matmul(a, layer.wk), (T, H, D)), positions, bc.rope_base)
            v = ops.reshape(ops.matmul(a, layer.wv), (T, H, D))
            o, _ = ops.attention(*(ops.permute(t, (1, 0, 2)) for t in (q, k, v)), causal=True)
            o = ops.reshape(ops.permute(o, (1, 0, 2)), (T, bc.d_model))
            h = ops.add(h, ops.matmul(o, layer.wo))
            c = ops.rms_norm(h, layer.cross_norm, eps)
            h = ops.add(h, self.cross_attend(c, cache, i))
            m = ops.rms_norm(h, layer.mlp_norm, eps)
            gated = ops.mul(ops.silu(ops.matmul(m, layer.w_gate)), ops.matmul(m, layer.w_up))
            h = ops.add(h, ops.matmul(gated, layer.w_down))
        return h

    def generate(self, h_t, cache: KvCache, k: int | None = None, *,
                 trigger_step: int = -1, trigger_entropy: float = float("nan")) -> LatentMemory:
        """Deterministically emit K latents from the seed m_0 = project(h_t).

        Step i runs the stack over [m_0, ..., m_{i-1}] and takes the last
        output row as m_i. The cache is only read.
        """
        k = self.config.n_memory_tokens if k is None else k
        if k < 1:
            raise ConfigError(f"number of memory tokens must be >= 1, got {k}")
        if len(cache) == 0:
            raise ContractError("cannot consolidate from an empty cache")
        seed = self.project_state(h_t)
        seq = seed
        outs = []
        for _ in range(k):
            y = self.stack(seq, cache)
            m = ops.index(y, slice(-1, None))
            outs.append(m)
            seq = ops.concat([seq, m], axis=0)
        emb = outs[0] if k == 1 else ops.concat(outs, axis=0)
        return LatentMemory(emb, ops.reshape(seed, (self.config.d_model,)), trigger_step, trigger_entropy)


def param_count(consolidator: Consolidator) -> int:
    """Number of trainable scalars."""
    return sum(p.size for p in consolidator.parameters() if p.trainable)


def _copy(p: Parameter, name: str) -> Parameter:
    return Parameter(p.data.copy(), trainable=True, name=name)


def inherit_weights(backbone: Backbone, config: ConsolidatorConfig | None = None, seed: int = 0) -> Consolidator:
    """Build a consolidator whose layer i copies backbone layer N - L + i.

    The cross-attention query/output projections copy that layer's wq/wo and
    its norm copies the layer's attention norm. The projection MLP is drawn
    fresh from N(0, init_std) with zero biases.
    """
    bc = backbone.config
    config = config or ConsolidatorConfig(d_model=bc.d_model)
    if config.d_model != bc.d_model:
        raise ConfigError(f"consolidator d_model {config.d_model} != backbone d_model {bc.d_model}")
    if config.n_layers >= bc.n_layers:
        raise ConfigError(
            f"consolidator layers ({config.n_layers}) must be fewer than backbone layers ({bc.n_layers})"
        )
    d = bc.d_model
    dt = as_dtype(bc.dtype)
    rng = np.random.default_rng(seed)
    std = config.init_std
    projection = ProjectionMlp(
        w1=Parameter(rng.normal(0.0, std, (d, d)).astype(dt), name="projection.w1"),
        b1=Parameter(np.zeros(d, dt), name="projection.b1"),
        w2=Parameter(rng.normal(0.0, std, (d, d)).astype(dt), name="projection.w2"),
        b2=Parameter(np.zeros(d, dt), name="projection.b2"),
    )
    layers = []
    for i in range(config.n_layers):
        src = bc.n_layers - config.n_layers + i
        blk = backbone.layers[src]
        p = f"layers.{i}."
        layers.append(ConsolidatorLayer(
            attn_norm=_copy(blk.attn_norm, p + "attn_norm"),
            wq=_copy(blk.wq, p + "wq"),
            wk=_copy(blk.wk, p + "wk"),
            wv=_copy(blk.wv, p + "wv"),
            wo=_copy(blk.wo, p + "wo"),
            cross_norm=_copy(blk.attn_norm, p + "cross_norm"),
            cross_wq=_copy(blk.wq, p + "cross_wq"),
            cross_wo=_copy(blk.wo, p + "cross_wo"),
            mlp_norm=_copy(blk.mlp_norm, p + "mlp_norm"),
            w_gate=_copy(blk.w_gate, p + "w_gate"),
            w_up=_copy(blk.w_up, p + "w_up"),
            w_down=_copy(blk.w_down, p + "w_down"),
            source_layer=src,
        ))
    return Consolidator(config, bc, projection, layers)

