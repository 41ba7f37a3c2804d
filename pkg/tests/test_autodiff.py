import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from flashmem.autodiff import ops
from flashmem.autodiff.optim import AdamW, OptimizerConfig, clip_global_norm, global_grad_norm, learning_rate
from flashmem.autodiff.tensor import Parameter, Tape, Tensor, backward
from flashmem.errors import ConfigError, ContractError, DimensionError, NonFiniteError

from oracles import central_difference, relative_error


def P(arr, trainable=True):
    return Parameter(np.asarray(arr, dtype=np.float64), trainable=trainable)


# ------------------------------------------------------------------ examples


def test_matmul_examples():
    B = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(ops.matmul(Tensor(np.eye(3)), Tensor(B)).data, B)
    assert not ops.matmul(Tensor(B), Tensor(np.zeros((2, 4)))).data.any()
    out = ops.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_softmax_examples():
    assert np.allclose(ops.softmax_rows(Tensor([[5.0, 5.0, 5.0, 5.0]])).data, 0.25)
    assert np.allclose(ops.softmax_rows(Tensor([[0.0, math.log(3.0)]])).data, [[0.25, 0.75]])
    assert ops.softmax_rows(Tensor([[7.0]])).data.tolist() == [[1.0]]
    with pytest.raises(DimensionError):
        ops.softmax_rows(Tensor(np.zeros((2, 0))))


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=8),
                  elements=st.floats(-1e4, 1e4)))
def test_softmax_rows_sum_to_one(x):
    y = ops.softmax_rows(Tensor(x)).data
    assert (y >= 0).all()
    assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-6)


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, float("nan")])
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        ops.scale(Tensor([1e308]), 10.0)


def test_backward_linear_and_disconnected():
    p = P(np.random.default_rng(0).normal(size=(3, 4)))
    q = P(np.ones(2))
    with Tape() as tape:
        loss = ops.sum(p)
    backward(loss, tape)
    assert np.array_equal(p.grad, np.ones((3, 4)))
    assert not q.grad.any()


def test_backward_rejects_non_scalar():
    p = P(np.ones((2, 2)))
    with Tape() as tape:
        out = ops.scale(p, 2.0)
    with pytest.raises(ContractError):
        backward(out, tape)


def test_tape_visits_each_node_once():
    p = P(np.ones((2, 2)))
    with Tape() as tape:
        a = ops.scale(p, 3.0)
        loss = ops.sum(ops.add(a, a))  # a used twice, still one node
    assert len({id(n) for n in tape.nodes}) == len(tape.nodes) == 3
    backward(loss, tape)
    assert np.array_equal(p.grad, np.full((2, 2), 6.0))


def test_two_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(5, 4)))
    w1, b1, w2 = P(rng.normal(size=(4, 6))), P(rng.normal(size=6)), P(rng.normal(size=(6, 3)))

    def f():
        return ops.sum(ops.matmul(ops.silu(ops.add(ops.matmul(x, w1), b1)), w2))

    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    for p in (w1, b1, w2):
        for idx in np.ndindex(p.shape):
            fd = central_difference(lambda: f().item(), p.data, idx)
            assert relative_error(p.grad[idx], fd, 1e-7) < 1e-4


# ------------------------------------------------------------------ finite-difference fuzz


def _kernel_cases(rng):
    """Each case: (params, fn building a tensor from them)."""
    m, n, k = (int(v) for v in rng.integers(1, 8, size=3))
    T = int(rng.integers(1, 6))
    H = int(rng.integers(1, 3))
    D = 2 * int(rng.integers(1, 4))
    Tk = T + int(rng.integers(0, 4))
    ids = rng.integers(0, 7, size=T).tolist()
    positions = sorted(rng.choice(50, size=T, replace=False).tolist())
    sel = rng.integers(0, m, size=3).tolist()
    return {
        "matmul": ([P(rng.normal(size=(m, k))), P(rng.normal(size=(k, n)))], lambda a, b: ops.matmul(a, b)),
        "add": ([P(rng.normal(size=(m, n))), P(rng.normal(size=(m, n)))], ops.add),
        "add_bias": ([P(rng.normal(size=(m, n))), P(rng.normal(size=n))], ops.add),
        "sub": ([P(rng.normal(size=(m, n))), P(rng.normal(size=(m, n)))], ops.sub),
        "mul": ([P(rng.normal(size=(m, n))), P(rng.normal(size=(m, n)))], ops.mul),
        "mul_gain": ([P(rng.normal(size=(m, n))), P(rng.normal(size=n))], ops.mul),
        "scale": ([P(rng.normal(size=(m, n)))], lambda a: ops.scale(a, -1.7)),
        "silu": ([P(rng.normal(size=(m, n)) * 3)], ops.silu),
        "transpose": ([P(rng.normal(size=(m, n)))], ops.transpose),
        "permute": ([P(rng.normal(size=(T, H, D)))], lambda a: ops.permute(a, (1, 2, 0))),
        "reshape": ([P(rng.normal(size=(m, n)))], lambda a: ops.reshape(a, (n, m))),
        "concat": ([P(rng.normal(size=(m, n))), P(rng.normal(size=(k, n)))], lambda a, b: ops.concat([a, b], 0)),
        "index": ([P(rng.normal(size=(m, n)))], lambda a: ops.index(a, sel)),
        "mean": ([P(rng.normal(size=(m, n)))], ops.mean),
        "pick": ([P(rng.normal(size=(m, n)))], lambda a: ops.pick(a, sel, [0, n - 1, 0])),
        "softmax": ([P(rng.normal(size=(m, n)) * 2)], ops.softmax_rows),
        "log_softmax": ([P(rng.normal(size=(m, n)) * 2)], ops.log_softmax_rows),
        "rms_norm": ([P(rng.normal(size=(m, n))), P(rng.normal(size=n))], lambda a, w: ops.rms_norm(a, w, 1e-6)),
        "embedding": ([P(rng.normal(size=(7, n)))], lambda t: ops.embedding(t, ids)),
        "rope": ([P(rng.normal(size=(T, H, D)))], lambda a: ops.rope(a, positions, 10000.0)),
        "attention_causal": (
            [P(rng.normal(size=(H, T, D))), P(rng.normal(size=(H, Tk, D))), P(rng.normal(size=(H, Tk, D)))],
            lambda q, kk, v: ops.attention(q, kk, v, causal=True)[0],
        ),
        "attention_full": (
            [P(rng.normal(size=(H, T, D))), P(rng.normal(size=(H, Tk, D))), P(rng.normal(size=(H, Tk, D)))],
            lambda q, kk, v: ops.attention(q, kk, v, causal=False)[0],
        ),
    }


KERNELS = sorted(_kernel_cases(np.random.default_rng(0)))
SEEDS = range(5)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("kernel", KERNELS)
def test_kernel_gradients_match_finite_differences(kernel, seed):
    rng = np.random.default_rng(1000 * seed + KERNELS.index(kernel))
    params, fn = _kernel_cases(rng)[kernel]
    probe = rng.normal(size=fn(*params).shape)

    def f():
        out = fn(*params)
        return ops.sum(ops.mul(out, Tensor(probe))) if out.ndim else out

    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    for p in params:
        for idx in np.ndindex(p.shape):
            fd = central_difference(lambda: f().item(), p.data, idx)
            assert relative_error(p.grad[idx], fd, 1e-7) < 1e-4, (kernel, idx, p.grad[idx], fd)


def test_fuzz_case_count_is_at_least_100():
    assert len(KERNELS) * len(SEEDS) >= 100


# ------------------------------------------------------------------ freeze contract


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_frozen_parameters_keep_bitwise_zero_grads(seed):
    rng = np.random.default_rng(seed)
    frozen = P(rng.normal(size=(4, 4)), trainable=False)
    live = P(rng.normal(size=(4, 4)))
    x = Tensor(rng.normal(size=(3, 4)))
    with Tape() as tape:
        h = ops.silu(ops.matmul(ops.matmul(x, frozen), live))
        loss = ops.sum(ops.softmax_rows(ops.matmul(h, frozen)))
    backward(loss, tape)
    assert frozen.grad.tobytes() == np.zeros_like(frozen.grad).tobytes()
    assert frozen.grad.shape == frozen.shape


# ------------------------------------------------------------------ clipping and optimiser


def _params_with_grads(*grads):
    ps = []
    for g in grads:
        p = P(np.zeros(np.shape(g)))
        p.grad[...] = g
        ps.append(p)
    return ps


def test_clip_examples():
    ps = _params_with_grads([0.6, 0.8], [0.0, 0.0])
    ps[0].grad *= 1.06
    assert clip_global_norm(ps, 0.53) == pytest.approx(1.06)
    assert np.allclose(ps[0].grad, [0.318, 0.424])

    ps = _params_with_grads([0.1, 0.0])
    assert clip_global_norm(ps, 0.53) == pytest.approx(0.1)
    assert ps[0].grad.tolist() == [0.1, 0.0]

    ps = _params_with_grads([3.0], [4.0])
    assert clip_global_norm(ps, 1.0) == pytest.approx(5.0)
    assert global_grad_norm(ps) == pytest.approx(1.0, abs=1e-6)


def test_clip_rejects_nonpositive():
    with pytest.raises(ContractError):
        clip_global_norm(_params_with_grads([1.0]), 0.0)


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 6), elements=st.floats(-100, 100)),
       st.floats(0.01, 10.0))
def test_clip_is_idempotent(g, c):
    once = _params_with_grads(g)
    clip_global_norm(once, c)
    twice = _params_with_grads(once[0].grad.copy())
    clip_global_norm(twice, c)
    assert np.allclose(once[0].grad, twice[0].grad, rtol=1e-12, atol=1e-15)


def test_schedule_boundaries():
    cfg = OptimizerConfig(learning_rate=1e-3, warmup_ratio=0.1, total_steps=100)
    assert cfg.warmup_steps == 10
    assert learning_rate(10, cfg) == 1e-3
    assert learning_rate(5, cfg) == pytest.approx(5e-4)
    assert abs(learning_rate(100, cfg)) < 1e-12
    lrs = [learning_rate(s, cfg) for s in range(10, 101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_zero_total_steps_is_config_error():
    with pytest.raises(ConfigError):
        OptimizerConfig(total_steps=0)


def test_zero_grad_zero_decay_is_fixed_point():
    p = P(np.random.default_rng(0).normal(size=(3, 3)))
    before = p.data.copy()
    opt = AdamW([p], OptimizerConfig(learning_rate=1e-2, weight_decay=0.0, total_steps=10))
    for s in range(1, 5):
        opt.step(s)
    assert np.array_equal(p.data, before)


def test_adamw_first_step_moves_against_gradient():
    p = P(np.array([1.0, -1.0]))
    p.grad[...] = [0.5, -2.0]
    opt = AdamW([p], OptimizerConfig(learning_rate=0.1, weight_decay=0.0, warmup_ratio=0.0, total_steps=10))
    lr = opt.step(1)
    # bias-corrected first step is lr * sign(g) up to eps
    assert np.allclose(p.data, [1.0 - lr, -1.0 + lr], atol=1e-6)


def test_weight_decay_is_decoupled():
    p = P(np.array([2.0]))
    opt = AdamW([p], OptimizerConfig(learning_rate=0.1, weight_decay=0.5, warmup_ratio=0.0, total_steps=10))
    opt.step(1)
    lr = learning_rate(1, opt.config)
    assert p.data[0] == pytest.approx(2.0 - lr * 0.5 * 2.0)
