import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flashmem.autodiff import Tensor
from flashmem.backbone import Backbone, BackboneConfig, StepOutput, init_backbone, kv_bytes
from flashmem.checkpoint import load_checkpoint, save_checkpoint
from flashmem.consolidator import ConsolidatorConfig, LatentMemory, inherit_weights
from flashmem.engine import GenerationConfig, RunTrace, Session, inject, normalize_mode, run
from flashmem.errors import CapacityError, ConfigError, ContractError
from flashmem.monitor import Monitor, MonitorConfig

from oracles import masked_entropy

CFG = BackboneConfig(n_layers=3, d_model=32, n_heads=4, d_head=8, vocab_size=64, max_positions=512, d_ff=48)
CFG64 = BackboneConfig(n_layers=3, d_model=32, n_heads=4, d_head=8, vocab_size=64, max_positions=512, d_ff=48,
                       dtype="float64")
K = 4


@pytest.fixture(scope="module")
def model():
    bb = init_backbone(CFG, 0)
    return bb, inherit_weights(bb, ConsolidatorConfig(n_memory_tokens=K, d_model=32), seed=1)


def _prompt(seed, n=12):
    return np.random.default_rng(seed).integers(1, 64, size=n).tolist()


def _always(mode="flashmem", n=40, **kw):
    return GenerationConfig(max_new_tokens=n, mode=mode, **kw), Monitor(MonitorConfig(threshold=0.0))


# -------------------------------------------------------------------- inject


def test_inject_appends_k_latent_positions_and_keeps_prefix(model):
    bb, cons = model
    cons8 = inherit_weights(bb, ConsolidatorConfig(n_memory_tokens=8, d_model=32))
    cache, out = bb.prefill(_prompt(0, 100))
    before = [(cache.keys(i).copy(), cache.values(i).copy()) for i in range(CFG.n_layers)]
    mem = cons8.generate(out.last_hidden, cache)
    inject(mem, bb, cache)
    assert len(cache) == 108
    assert cache.is_latent == [False] * 100 + [True] * 8
    assert cache.position_ids == list(range(108))
    for i, (k, v) in enumerate(before):
        assert cache.keys(i)[:100].tobytes() == k.tobytes()
        assert cache.values(i)[:100].tobytes() == v.tobytes()


def test_inject_rejects_empty_memory_and_overflow(model):
    bb, cons = model
    cache, out = bb.prefill([1, 2, 3])
    empty = LatentMemory(Tensor(np.zeros((0, 32), np.float32)), Tensor(np.zeros(32, np.float32)))
    with pytest.raises(ConfigError):
        inject(empty, bb, cache)
    small = init_backbone(BackboneConfig(n_layers=2, d_model=32, n_heads=4, d_head=8, vocab_size=64,
                                         max_positions=10, d_ff=48), 0)
    c2, o2 = small.prefill(list(range(1, 8)))
    mem = inherit_weights(small, ConsolidatorConfig(n_memory_tokens=K, d_model=32)).generate(o2.last_hidden, c2)
    with pytest.raises(CapacityError):
        inject(mem, small, c2)
    assert len(c2) == 7


# -------------------------------------------------------------------- vanilla


def _greedy(bb, prompt, n):
    cache, out = bb.prefill(prompt)
    toks = []
    for _ in range(n):
        t = int(np.argmax(out.logits))
        toks.append(t)
        out = bb.decode_step(t, cache)
    return toks


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 30))
def test_vanilla_matches_raw_greedy_decoding(seed, n):
    bb = init_backbone(CFG, 0)
    prompt = _prompt(seed, n)
    # vanilla ignores any threshold, even one that would always fire
    trace = run(prompt, bb, Monitor(MonitorConfig(threshold=0.0)), None,
                GenerationConfig(max_new_tokens=20, mode="vanilla"))
    assert trace.generated_tokens == _greedy(bb, prompt, 20)
    assert trace.triggers == [] and not any(trace.latent_flags)


def test_threshold_required_outside_vanilla(model):
    bb, cons = model
    with pytest.raises(ConfigError):
        run([1, 2], bb, Monitor(), cons, GenerationConfig(max_new_tokens=4))
    with pytest.raises(ContractError):
        run([1, 2], bb, Monitor(MonitorConfig(threshold=1.0)), None, GenerationConfig(max_new_tokens=4))


def test_mode_names():
    assert normalize_mode("segregated") == "segregated_baseline"
    with pytest.raises(ConfigError):
        normalize_mode("turbo")


# -------------------------------------------------------------------- triggers


def test_always_fire_respects_min_step_and_cooldown(model):
    bb, cons = model
    cfg, mon = _always(n=60)
    trace = run(_prompt(1), bb, mon, cons, cfg)
    assert trace.trigger_steps == [6, 22, 38, 54]
    cfg2 = GenerationConfig(max_new_tokens=30, trigger_cooldown=0, min_trigger_step=0)
    assert run(_prompt(1), bb, mon, cons, cfg2).trigger_steps == list(range(1, 30))


class PlantedBackbone(Backbone):
    """Reports a flat last-layer attention row on the ``at``-th token feed, a peaked one otherwise."""

    def __init__(self, base: Backbone, at: int):
        self.__dict__.update(base.__dict__)
        self.at = at
        self.feeds = 0

    def _plant(self, out: StepOutput) -> StepOutput:
        H, n = out.last_layer_attention.shape
        row = np.zeros((H, n))
        if self.feeds == self.at:
            row[:] = 1.0 / n
        else:
            row[:, -1] = 1.0
        return StepOutput(out.logits, row, out.last_hidden)

    def prefill(self, tokens):
        self.feeds = 0
        cache, out = super().prefill(tokens)
        return cache, self._plant(out)

    def decode_step(self, item, cache):
        out = super().decode_step(item, cache)
        if isinstance(item, (int, np.integer)):
            self.feeds += 1
            return self._plant(out)
        return out


def test_planted_entropy_spike_triggers_exactly_once(model):
    bb, cons = model
    planted = PlantedBackbone(bb, at=7)
    trace = run(_prompt(2), planted, Monitor(MonitorConfig(threshold=0.5)), cons,
                GenerationConfig(max_new_tokens=30))
    assert trace.trigger_steps == [7]
    ev = trace.triggers[0]
    assert ev.entropy_at_trigger == pytest.approx(math.log(ev.cache_len_before - 1))
    assert ev.cache_len_before == 12 + 7
    assert trace.latent_flags[19:19 + K] == [True] * K and sum(trace.latent_flags) == K


def test_sample_after_injection_uses_post_memory_logits(model):
    bb, cons = model
    cfg = GenerationConfig(max_new_tokens=8)
    trace = run(_prompt(3), bb, Monitor(), cons, cfg, forced_steps=[6])
    # replay by hand: 6 greedy tokens, consolidate, then the 7th token comes from the last latent's logits
    s = Session(bb, _prompt(3))
    for _ in range(6):
        s.feed(int(np.argmax(s.out.logits)))
    s.consolidate(cons)
    assert trace.generated_tokens[6] == int(np.argmax(s.out.logits))


# -------------------------------------------------------------------- ledgers


@pytest.mark.parametrize("mode", ["flashmem", "segregated"])
def test_cache_growth_ledger_and_flags(model, mode):
    bb, cons = model
    cfg, mon = _always(mode=mode, n=45)
    prompt = _prompt(4, 20)
    trace = run(prompt, bb, mon, cons, cfg)
    n_trig = len(trace.triggers)
    assert n_trig == 3
    assert trace.final_cache_len == len(prompt) + 45 + K * n_trig
    assert len(trace.latent_flags) == trace.final_cache_len
    expected = [False] * trace.final_cache_len
    for ev in trace.triggers:
        expected[ev.cache_len_before:ev.cache_len_before + ev.k] = [True] * ev.k
    assert trace.latent_flags == expected
    for ev in trace.triggers:  # cache_len_before = prompt + tokens fed so far + earlier latents
        earlier = sum(e.k for e in trace.triggers if e.step < ev.step)
        assert ev.cache_len_before == len(prompt) + ev.step + earlier


def test_segregated_replays_flashmem_with_private_cache():
    bb = init_backbone(CFG64, 0)
    cons = inherit_weights(bb, ConsolidatorConfig(n_memory_tokens=K, d_model=32), seed=1)
    prompt = _prompt(5, 30)
    base = dict(max_new_tokens=40)
    fm = run(prompt, bb, Monitor(), cons, GenerationConfig(**base), forced_steps=[8, 30])
    calls = bb.forward_calls
    sg = run(prompt, bb, Monitor(), cons, GenerationConfig(mode="segregated", **base), forced_steps=[8, 30])
    assert sg.generated_tokens == fm.generated_tokens
    assert sg.trigger_steps == fm.trigger_steps == [8, 30]
    for a, b in zip(fm.triggers, sg.triggers):
        assert np.allclose(a.memory.embeddings.data, b.memory.embeddings.data, atol=1e-9)
        assert a.private_cache_bytes == 0
        assert b.private_cache_bytes == kv_bytes(CFG64, b.cache_len_before)
    # one re-encode per trigger on top of prefill + one decode per token/latent
    assert bb.forward_calls - calls == 1 + 40 + 2 * K + 2
    live_at_last = kv_bytes(CFG64, sg.triggers[-1].cache_len_before)
    assert sg.cache_bytes_peak >= live_at_last + sg.triggers[-1].private_cache_bytes
    assert fm.cache_bytes_peak == kv_bytes(CFG64, fm.final_cache_len)
    assert sg.cache_bytes_peak > fm.cache_bytes_peak


def test_flashmem_consolidation_does_not_reencode(model):
    bb, cons = model
    calls = bb.forward_calls
    trace = run(_prompt(6), bb, Monitor(), cons, GenerationConfig(max_new_tokens=20), forced_steps=[10])
    assert bb.forward_calls - calls == 1 + 20 + K
    assert len(trace.triggers) == 1


def test_recorded_entropies_recompute_from_attention(model):
    bb, cons = model
    cfg = GenerationConfig(max_new_tokens=25, keep_attention=True)
    trace = run(_prompt(7), bb, Monitor(MonitorConfig(threshold=1.5)), cons, cfg)
    assert len(trace.attention) == 25
    for rec, attn in zip(trace.entropies, trace.attention):
        heads = [masked_entropy(row, {0}) for row in attn]
        assert rec.entropy == pytest.approx(sum(heads) / len(heads), abs=1e-9)
        fired = rec.entropy > 1.5
        assert rec.triggered == fired


# -------------------------------------------------------------------- persistence


def test_jsonl_round_trip(tmp_path, model):
    bb, cons = model
    cfg, mon = _always(n=30)
    trace = run(_prompt(8), bb, mon, cons, cfg, prompt_id="p8")
    path = tmp_path / "t.jsonl"
    trace.write_jsonl(path)
    back = RunTrace.read_jsonl(path)
    assert back.prompt_id == "p8" and back.mode == "flashmem" and back.threshold == 0.0
    assert back.prompt_tokens == trace.prompt_tokens
    assert back.generated_tokens == trace.generated_tokens
    assert back.entropy_values == trace.entropy_values
    assert back.cache_lens == trace.cache_lens and back.step_ms == trace.step_ms
    assert back.trigger_steps == trace.trigger_steps
    assert [e.k for e in back.triggers] == [K] * len(trace.triggers)

    v = run(_prompt(8), bb, mon, None, GenerationConfig(max_new_tokens=5, mode="vanilla"))
    v.write_jsonl(path)
    assert RunTrace.read_jsonl(path).threshold == math.inf


def test_empty_trace_file_is_rejected(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    with pytest.raises(ContractError):
        RunTrace.read_jsonl(tmp_path / "e.jsonl")


def test_replay_after_checkpoint_is_identical(tmp_path, model):
    bb, cons = model
    cfg, mon = _always(n=30)
    a = run(_prompt(9), bb, mon, cons, cfg)
    save_checkpoint(tmp_path / "m.ckpt", bb, cons)
    bb2, cons2 = load_checkpoint(tmp_path / "m.ckpt")
    b = run(_prompt(9), bb2, mon, cons2, cfg)
    assert a.deterministic_view() == b.deterministic_view()


def test_temperature_sampling_is_seeded(model):
    bb, cons = model
    mon = Monitor(MonitorConfig(threshold=1.0))
    runs = [run(_prompt(10), bb, mon, cons, GenerationConfig(max_new_tokens=30, temperature=1.0, sampling_seed=s))
            for s in (1, 1, 2)]
    assert runs[0].deterministic_view() == runs[1].deterministic_view()
    assert runs[0].generated_tokens != runs[2].generated_tokens
