"""Independent reference computations for the test-suite.

Nothing here imports flashmem: every oracle is written from the definition,
in plain float64 numpy / Python loops.
"""

from __future__ import annotations

import math

import numpy as np


def direct_cross_attention(x, keys, values, wq, wo, n_heads):
    """softmax((x Wq) K^T / sqrt(d_head)) V per head, concatenated, then Wo.

    x [T, d]; keys/values [Tc, H, Dh] as raw cache tensors.
    """
    x = np.asarray(x, np.float64)
    keys = np.asarray(keys, np.float64)
    values = np.asarray(values, np.float64)
    q = x @ np.asarray(wq, np.float64)
    T, d = q.shape
    dh = d // n_heads
    out = np.zeros((T, d))
    for h in range(n_heads):
        qh = q[:, h * dh:(h + 1) * dh]
        kh = keys[:, h, :]
        vh = values[:, h, :]
        for t in range(T):
            scores = np.array([qh[t] @ kh[j] for j in range(kh.shape[0])]) / math.sqrt(dh)
            w = np.exp(scores - scores.max())
            w /= w.sum()
            out[t, h * dh:(h + 1) * dh] = w @ vh
    return out @ np.asarray(wo, np.float64)


def entropy_nats(p):
    return -sum(v * math.log(v) for v in p if v > 0)


def masked_entropy(attn_row, sinks, epsilon_mass=1e-8):
    """Entropy of one head after zeroing sinks and renormalising (brute force).

    A head with less than ``epsilon_mass`` outside the sinks scores 0.
    """
    kept = [v if j not in sinks else 0.0 for j, v in enumerate(attn_row)]
    total = sum(kept)
    if total < epsilon_mass:
        return 0.0
    return entropy_nats([v / total for v in kept])


def brute_force_stats(vanilla, memory, triggers, window_len, min_step, tau_sig):
    """Per-trigger deltas by explicit loops over the closed window [t, t + L].

    vanilla / memory: dict prompt_id -> list of entropies;
    triggers: dict prompt_id -> list of trigger steps.
    """
    deltas, rels = [], []
    for pid, steps in triggers.items():
        v, m = vanilla[pid], memory[pid]
        for t in steps:
            if t <= min_step or t + window_len >= min(len(v), len(m)):
                continue
            vs = [v[i] for i in range(t, t + window_len + 1)]
            ms = [m[i] for i in range(t, t + window_len + 1)]
            vm = sum(vs) / len(vs)
            mm = sum(ms) / len(ms)
            deltas.append(vm - mm)
            rels.append((vm - mm) / vm * 100.0)
    n = len(deltas)
    return {
        "n": n,
        "mean": sum(deltas) / n,
        "rel": sum(rels) / n,
        "min": min(deltas),
        "max": max(deltas),
        "p_red": sum(1 for d in deltas if d > 0) / n,
        "p_sig": sum(1 for d in deltas if d > tau_sig) / n,
    }


def consolidator_param_count(d, d_ff, n_layers):
    """Shape-product count: projection MLP (2 d x d + 2 biases) plus per layer
    four d x d self-attention, two d x d cross projections, three norms of d,
    and a gated MLP of three d x d_ff matrices."""
    projection = 2 * d * d + 2 * d
    per_layer = 4 * d * d + 2 * d * d + 3 * d + 3 * d * d_ff
    return projection + n_layers * per_layer


def kv_cache_bytes(n_layers, length, n_heads, d_head, itemsize):
    return n_layers * length * n_heads * d_head * 2 * itemsize


def central_difference(f, x: np.ndarray, idx, h=1e-5):
    """(f(x + h e_i) - f(x - h e_i)) / 2h, restoring x afterwards."""
    old = x[idx]
    x[idx] = old + h
    fp = f()
    x[idx] = old - h
    fm = f()
    x[idx] = old
    return (fp - fm) / (2 * h)


def relative_error(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)
