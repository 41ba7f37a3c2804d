"""Dense tensors, parameters and the reverse-mode tape.

A :class:`Tensor` wraps a row-major numpy array of dtype float32 or float64.
Operations in :mod:`flashmem.autodiff.ops` record themselves on the active
:class:`Tape` whenever at least one operand requires a gradient; outside a
tape every operation is a plain numpy computation.

Usage::

    with Tape() as tape:
        loss = ops.sum(ops.matmul(x, w))
    backward(loss, tape)
    w.grad  # dloss/dw
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError, NonFiniteError

DTYPES = {"float32": np.dtype(np.float32), "float64": np.dtype(np.float64)}

# Finite checks cost one pass over every op output; benchmarks may disable them.
CHECK_FINITE = True


def as_dtype(dtype) -> np.dtype:
    dt = np.dtype(DTYPES.get(dtype, dtype)) if isinstance(dtype, str) else np.dtype(dtype)
    if dt not in DTYPES.values():
        raise ContractError(f"unsupported dtype {dt}; expected float32 or float64")
    return dt


class Tensor:
    """A float32/float64 array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in DTYPES.values():
                arr = arr.astype(np.float64)
        else:
            arr = np.asarray(data, dtype=as_dtype(dtype))
        if CHECK_FINITE and not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor of shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        tracked = ", tracked" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tracked})"

    # operator sugar, defined in ops to avoid a circular import
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, other)
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self)


class Parameter(Tensor):
    """A leaf tensor owned by a model.

    Frozen parameters (``trainable=False``) never enter a tape, so their
    ``grad`` stays bitwise zero through any backward pass.
    """

    __slots__ = ("grad", "trainable", "name")

    def __init__(self, data, dtype=None, trainable: bool = True, name: str = ""):
        super().__init__(data, dtype=dtype, requires_grad=trainable)
        self.data = np.ascontiguousarray(self.data)
        self.grad = np.zeros_like(self.data)
        self.trainable = trainable
        self.name = name

    @property
    def value(self) -> Tensor:
        return self

    def freeze(self) -> None:
        self.trainable = False
        self.requires_grad = False

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


@dataclass
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations executed while active."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def record(out: Tensor, inputs: Sequence[Tensor], fn) -> Tensor:
    """Attach ``fn`` (grad_out -> grads per input) to ``out`` if anything is tracked."""
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(out, tuple(inputs), fn))
    return out


def is_tracking(*inputs: Tensor) -> bool:
    return bool(_ACTIVE) and any(t.requires_grad for t in inputs)


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(param) into ``grad`` of every trainable Parameter.

    An untracked loss (no trainable parameter reachable) is a no-op.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if isinstance(inp, Parameter):
                if inp.trainable:
                    inp.grad += gi
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
