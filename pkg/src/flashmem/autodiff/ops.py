"""Differentiable kernels.

Every function takes and returns :class:`Tensor` objects. Shapes must agree
exactly; the only broadcast is adding/multiplying a 1-D tensor along the
trailing dimension (bias, norm gain).
"""

from __future__ import annotations

import functools
import math
from typing import Sequence

import numpy as np

from ..errors import DimensionError, ContractError
from .tensor import Tensor, is_tracking, record
from . import tensor as _tensor_mod


def _out(arr: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    if _tensor_mod.CHECK_FINITE and not np.isfinite(arr).all():
        from ..errors import NonFiniteError
        raise NonFiniteError(f"operation produced non-finite values, shape {arr.shape}")
    t.data = arr
    t.requires_grad = False
    return t


def wrap(arr: np.ndarray) -> Tensor:
    """Wrap an array known to be finite (e.g. a cache view) without copying or checking."""
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = False
    return t


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_trailing_vector(a: Tensor, b: Tensor) -> bool:
    return b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0] and a.shape != b.shape


def _reduce_trailing(g: np.ndarray, n: int) -> np.ndarray:
    return g.reshape(-1, n).sum(axis=0)


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        out = _out(a.data + b.data)
        return record(out, (a, b), lambda g: (g, g))
    if _is_trailing_vector(a, b):
        n = b.shape[0]
        out = _out(a.data + b.data)
        return record(out, (a, b), lambda g: (g, _reduce_trailing(g, n)))
    raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    out = _out(a.data - b.data)
    return record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        out = _out(a.data * b.data)
        return record(out, (a, b), lambda g: (
            g * b.data if a.requires_grad else None,
            g * a.data if b.requires_grad else None,
        ))
    if _is_trailing_vector(a, b):
        n = b.shape[0]
        out = _out(a.data * b.data)
        return record(out, (a, b), lambda g: (
            g * b.data if a.requires_grad else None,
            _reduce_trailing(g * a.data, n) if b.requires_grad else None,
        ))
    raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")


def scale(a: Tensor, c: float) -> Tensor:
    out = _out(a.data * a.dtype.type(c))
    return record(out, (a,), lambda g: (g * a.dtype.type(c),))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = np.empty_like(xd)
    pos = xd >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = _out(xd * s)
    return record(out, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """C[i, j] = sum_k A[i, k] B[k, j] for 2-D operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = _out(a.data @ b.data)
    return record(out, (a, b), lambda g: (
        g @ b.data.T if a.requires_grad else None,
        a.data.T @ g if b.requires_grad else None,
    ))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got {a.shape}")
    out = _out(a.data.T)
    return record(out, (a,), lambda g: (g.T,))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = wrap(a.data.transpose(axes))
    return record(out, (a,), lambda g: (g.transpose(inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size and -1 not in shape:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    out = wrap(a.data.reshape(shape))
    src = a.shape
    return record(out, (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of an empty list")
    out = wrap(np.concatenate([t.data for t in tensors], axis=axis))
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def fn(g):
        grads = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                grads.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            grads.append(g[tuple(sl)])
        return grads

    return record(out, tensors, fn)


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length into a 2-D tensor."""
    return concat([reshape(t, (1, -1)) for t in tensors], axis=0)


def index(a: Tensor, idx) -> Tensor:
    out = wrap(np.array(a.data[idx]))

    def fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return record(out, (a,), fn)


# ---------------------------------------------------------------- reductions


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = _out(np.asarray(a.data.sum(), dtype=a.dtype))
    return record(out, (a,), lambda g: (np.full_like(a.data, g),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    out = _out(np.asarray(a.data.mean(), dtype=a.dtype))
    return record(out, (a,), lambda g: (np.full_like(a.data, g / n),))


def pick(x: Tensor, rows: Sequence[int], cols: Sequence[int]) -> Tensor:
    """Return the 1-D tensor ``x[rows[i], cols[i]]``."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = wrap(x.data[rows, cols].copy())

    def fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return record(out, (x,), fn)


# ---------------------------------------------------------------- normalisation


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last dimension, computed with max-subtraction."""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax_rows needs a non-empty last dimension, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _out(y)
    return record(out, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax_rows(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"log_softmax_rows needs a non-empty last dimension, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    out = _out(y)
    return record(out, (x,), lambda g: (g - np.exp(y) * g.sum(axis=-1, keepdims=True),))


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * weight over the last dimension."""
    if weight.ndim != 1 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"rms_norm: weight {weight.shape} does not match input {x.shape}")
    xd = x.data
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    n = xd * r
    out = _out(n * weight.data)
    d = xd.shape[-1]

    def fn(g):
        gx = gw = None
        if x.requires_grad:
            dn = g * weight.data
            gx = r * (dn - n * (dn * n).sum(axis=-1, keepdims=True) / d)
        if weight.requires_grad:
            gw = _reduce_trailing(g * n, d)
        return gx, gw

    return record(out, (x, weight), fn)


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise DimensionError(f"embedding ids must be 1-D, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"token id out of range [0, {table.shape[0]})")
    out = wrap(table.data[ids])

    def fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return record(out, (table,), fn)


# ---------------------------------------------------------------- positional


def rope_tables(positions: Sequence[int], dim: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables [T, dim/2]; memoised because decoding reuses the same positions."""
    return _rope_tables(tuple(positions), dim, float(base), np.dtype(dtype))


@functools.lru_cache(maxsize=4096)
def _rope_tables(positions: tuple, dim: int, base: float, dtype: np.dtype):
    half = dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / dim)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos, sin = np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)
    cos.flags.writeable = False
    sin.flags.writeable = False
    return cos, sin


def rope(x: Tensor, positions: Sequence[int], base: float) -> Tensor:
    """Rotate-half rotary embedding of ``x`` with shape [T, H, D] at ``positions``."""
    if x.ndim != 3 or x.shape[-1] % 2:
        raise DimensionError(f"rope expects [T, H, even D], got {x.shape}")
    if len(positions) != x.shape[0]:
        raise DimensionError(f"rope: {len(positions)} positions for {x.shape[0]} rows")
    half = x.shape[-1] // 2
    cos, sin = rope_tables(positions, x.shape[-1], base, x.dtype)
    cos, sin = cos[:, None, :], sin[:, None, :]
    x1, x2 = x.data[..., :half], x.data[..., half:]
    out = _out(np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1))

    def fn(g):
        g1, g2 = g[..., :half], g[..., half:]
        return (np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1),)

    return record(out, (x,), fn)


# ---------------------------------------------------------------- attention

_BLOCK = 128


def _softmax_inplace(s: np.ndarray) -> np.ndarray:
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


def _last_row_probs(q_last: np.ndarray, k: np.ndarray, scale: float) -> np.ndarray:
    """float64 softmax of the final query row, [H, Tk]."""
    s = np.einsum("hd,hkd->hk", q_last.astype(np.float64), k.astype(np.float64)) * scale
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    return p / p.sum(axis=-1, keepdims=True)


def attention(q: Tensor, k: Tensor, v: Tensor, *, causal: bool, want_probs: bool = False):
    """Scaled dot-product attention in head-major layout.

    q: [H, Tq, D]; k, v: [H, Tk, D]. With ``causal`` the queries are the last
    Tq positions of the key sequence, so query i sees keys j <= Tk - Tq + i.
    Returns ``(out [H, Tq, D], probs)`` where ``probs`` is the final query's
    distribution over keys, [H, Tk] in float64, when ``want_probs`` is set.
    """
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise DimensionError(f"attention expects 3-D operands, got {q.shape}, {k.shape}, {v.shape}")
    H, Tq, D = q.shape
    if k.shape[0] != H or k.shape[2] != D or v.shape != k.shape:
        raise DimensionError(f"attention: q {q.shape} incompatible with k {k.shape} / v {v.shape}")
    Tk = k.shape[1]
    if Tk == 0:
        raise ContractError("attention over an empty key set")
    if causal and Tq > Tk:
        raise DimensionError(f"causal attention with {Tq} queries over {Tk} keys")
    scale = 1.0 / math.sqrt(D)
    qd, kd, vd = q.data, k.data, v.data
    off = Tk - Tq
    probs = _last_row_probs(qd[:, -1, :], kd, scale) if want_probs else None

    if not is_tracking(q, k, v):
        out = np.empty((H, Tq, D), dtype=qd.dtype)
        for s0 in range(0, Tq, _BLOCK):
            s1 = min(s0 + _BLOCK, Tq)
            kend = off + s1 if causal else Tk
            sc = np.matmul(qd[:, s0:s1], kd[:, :kend].transpose(0, 2, 1))
            sc *= qd.dtype.type(scale)
            if causal and s1 - s0 > 1:
                tri = np.triu(np.ones((s1 - s0, s1 - s0), dtype=bool), 1)
                sc[:, :, off + s0:off + s1][:, tri] = -np.inf
            _softmax_inplace(sc)
            out[:, s0:s1] = np.matmul(sc, vd[:, :kend])
        return _out(out), probs

    s = np.matmul(qd, kd.transpose(0, 2, 1)) * qd.dtype.type(scale)
    if causal:
        mask = np.arange(Tk)[None, :] > (off + np.arange(Tq))[:, None]
        s[:, mask] = -np.inf
    p = _softmax_inplace(s)
    out = _out(np.matmul(p, vd))

    def fn(g):
        dv = np.matmul(p.transpose(0, 2, 1), g) if v.requires_grad else None
        dp = np.matmul(g, vd.transpose(0, 2, 1))
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        dq = np.matmul(ds, kd) * scale if q.requires_grad else None
        dk = np.matmul(ds.transpose(0, 2, 1), qd) * scale if k.requires_grad else None
        return dq, dk, dv

    return record(out, (q, k, v), fn), probs
