import hashlib

import numpy as np
import pytest

from flowkv import (
    CachePool,
    ModelConfig,
    SegmentKind,
    append_segment,
    compress_segments,
    dump_weights,
    generate,
    init_model,
    load_weights,
    prefill,
    total_len,
)
from flowkv.model import counter_uniform, mix_seeds, params_flat, splitmix64
from flowkv.errors import ConfigError, SeqOverflow

CFG = ModelConfig(vocab=64, layers=2, heads=2, head_dim=8, max_seq=256, seed=9)


@pytest.fixture(scope="module")
def model():
    return init_model(CFG)


def fresh_pool():
    return CachePool(CFG.layers, CFG.heads, CFG.head_dim)


def pool_with_system(model, n=12):
    pool = fresh_pool()
    res = prefill(model, pool, list(range(2, 2 + n)))
    return append_segment(pool, SegmentKind.system(), res.keys, res.values,
                          res.origin_indices, res.token_ids), res


# --- weights ------------------------------------------------------------------


def test_splitmix_reference_values():
    # fixed points of the documented update, computed once with UInt64 arithmetic
    z = splitmix64(np.array([np.uint64(1) + np.uint64(0x9E3779B97F4B1C15)]))
    assert int(z[0]) == int(splitmix64(np.array([0x9E3779B97F4B1C16]))[0])
    u = counter_uniform(0, 0, 4)
    assert np.all((0 <= u) & (u < 1))
    # determinism of the counter stream regardless of chunking
    a = counter_uniform(7, 0, 10)
    b = np.concatenate([counter_uniform(7, 0, 3), counter_uniform(7, 3, 7)])
    np.testing.assert_array_equal(a, b)


def test_same_seed_identical_weights(model):
    again = init_model(CFG)
    h1 = hashlib.sha256(params_flat(model).tobytes()).hexdigest()
    h2 = hashlib.sha256(params_flat(again).tobytes()).hexdigest()
    assert h1 == h2


def test_different_seed_different_weights(model):
    other = init_model(ModelConfig(vocab=64, layers=2, heads=2, head_dim=8, max_seq=256, seed=10))
    assert not np.array_equal(params_flat(model), params_flat(other))


def test_weights_within_scale(model):
    flat = params_flat(model)
    assert flat.min() >= -0.1 and flat.max() <= 0.1


def test_config_width_mismatch():
    with pytest.raises(ConfigError):
        ModelConfig(heads=2, head_dim=8, width=24)
    ModelConfig(heads=2, head_dim=8, width=16)  # consistent width is fine


def test_config_positivity():
    with pytest.raises(ConfigError):
        ModelConfig(layers=0)


def test_mix_seeds_order_sensitivity():
    assert mix_seeds(1, 2) != mix_seeds(2, 1)
    assert mix_seeds(1, 2) == mix_seeds(1, 2)


def test_weight_dump_roundtrip(model, tmp_path):
    path = tmp_path / "weights.tdkv"
    dump_weights(model, path)
    raw = path.read_bytes()
    assert raw[:4] == b"TDKV"
    assert int.from_bytes(raw[4:8], "little") == 1
    count = int.from_bytes(raw[8:16], "little")
    assert count == model.param_count
    assert len(raw) == 16 + 4 * count
    loaded = load_weights(path)
    np.testing.assert_allclose(loaded, params_flat(model), atol=1e-7)


# --- prefill --------------------------------------------------------------------


def test_single_token_row_is_unity(model):
    res = prefill(model, fresh_pool(), [5])
    assert res.attn_full.shape == (CFG.layers, CFG.heads, 1, 1)
    np.testing.assert_allclose(res.attn_full, 1.0)


def test_rows_sum_to_one(model):
    res = prefill(model, fresh_pool(), list(range(2, 22)))
    sums = res.attn_full.sum(axis=3)
    visible = sums > 0
    np.testing.assert_allclose(res.attn_full.sum(axis=3), 1.0, atol=1e-6)
    assert visible.all()


def test_causal_lower_triangular(model):
    res = prefill(model, fresh_pool(), list(range(2, 12)))
    for l in range(CFG.layers):
        for h in range(CFG.heads):
            block = res.attn_full[l, h]
            assert np.all(np.triu(block, k=1) == 0.0)


def test_shape_law(model):
    res = prefill(model, fresh_pool(), list(range(2, 9)))
    assert res.keys.shape == (CFG.layers, 7, CFG.heads, CFG.head_dim)
    assert len(res.tokens) == 7
    assert res.tokens[0].key.shape == (CFG.layers, CFG.heads, CFG.head_dim)
    assert res.logits.shape == (CFG.vocab,)


def test_prefill_deterministic(model):
    a = prefill(model, fresh_pool(), [3, 4, 5])
    b = prefill(model, fresh_pool(), [3, 4, 5])
    np.testing.assert_array_equal(a.keys, b.keys)
    np.testing.assert_array_equal(a.logits, b.logits)


def test_recomputation_bit_identical_at_same_positions(model):
    pool, _ = pool_with_system(model, 10)
    a = prefill(model, pool, [7, 8, 9])
    b = prefill(model, pool, [7, 8, 9])
    np.testing.assert_array_equal(a.keys, b.keys)
    np.testing.assert_array_equal(a.values, b.values)


def test_eviction_renormalizes_rows(model):
    pool, _ = pool_with_system(model, 16)
    squeezed = compress_segments(pool, (0, 1), {0, 3, 7, 11, 15})
    res = prefill(model, squeezed, [5, 6])
    assert res.attn_full.shape[3] == 5 + 2  # evicted keys are simply absent
    np.testing.assert_allclose(res.attn_full.sum(axis=3), 1.0, atol=1e-6)


def test_eviction_keeps_survivor_positions(model):
    # surviving keys are untouched by compression; new tokens use origin positions
    pool, first = pool_with_system(model, 12)
    squeezed = compress_segments(pool, (0, 1), {0, 1, 2, 3, 4, 5, 6, 7})
    np.testing.assert_array_equal(
        squeezed.segments[0].keys, pool.segments[0].keys[:, :8]
    )
    res = prefill(model, squeezed, [9])
    assert res.origin_indices[0] == 12  # original stream position, not pool length


def test_seq_overflow(model):
    pool, _ = pool_with_system(model, 10)
    with pytest.raises(SeqOverflow):
        prefill(model, pool, [3] * CFG.max_seq)


def test_prefill_attn_modes_agree(model):
    pool, _ = pool_with_system(model, 9)
    ids = list(range(4, 14))
    full = prefill(model, pool, ids, attn_mode="full")
    mean = prefill(model, pool, ids, attn_mode="mean")
    tail = prefill(model, pool, ids, attn_mode="tail", tail_rows=4)
    np.testing.assert_allclose(mean.attn_mean, full.attn_full.mean(axis=(0, 1)), atol=1e-12)
    np.testing.assert_allclose(tail.attn_tail, mean.attn_mean[-4:], atol=1e-12)
    np.testing.assert_allclose(tail.attn_colsums, mean.attn_mean.sum(axis=0), atol=1e-12)
    np.testing.assert_array_equal(full.keys, tail.keys)
    # chunked row blocks must not change anything
    blocked = prefill(model, pool, ids, attn_mode="tail", tail_rows=4, row_block=3)
    np.testing.assert_allclose(blocked.attn_tail, tail.attn_tail, atol=1e-12)
    np.testing.assert_allclose(blocked.attn_colsums, tail.attn_colsums, atol=1e-12)
    np.testing.assert_array_equal(blocked.keys, tail.keys)


# --- generation -------------------------------------------------------------------


def test_generate_deterministic(model):
    pool, res = pool_with_system(model, 10)
    a = generate(model, pool, 12, eos_id=None, first_logits=res.logits)
    b = generate(model, pool, 12, eos_id=None, first_logits=res.logits)
    assert a.token_ids == b.token_ids
    np.testing.assert_array_equal(a.keys, b.keys)


def test_generate_max_tokens_zero(model):
    pool, _ = pool_with_system(model, 10)
    out = generate(model, pool, 0)
    assert out.token_ids == []
    assert out.keys.shape[1] == 0


def test_generate_recovers_first_logits(model):
    pool, res = pool_with_system(model, 10)
    with_logits = generate(model, pool, 6, first_logits=res.logits)
    recovered = generate(model, pool, 6)  # re-derives the last token's logits
    assert with_logits.token_ids == recovered.token_ids


def test_generate_eos_stops_and_is_included(model):
    pool, res = pool_with_system(model, 10)
    free = generate(model, pool, 40, eos_id=None, first_logits=res.logits)
    eos = free.token_ids[0]
    cut = free.token_ids.index(eos) + 1
    stopped = generate(model, pool, 40, eos_id=eos, first_logits=res.logits)
    assert stopped.token_ids == free.token_ids[:cut]
    assert stopped.token_ids[-1] == eos


def test_generate_overflow(model):
    small = init_model(ModelConfig(vocab=32, max_seq=12, seed=3))
    pool = CachePool(small.cfg.layers, small.cfg.heads, small.cfg.head_dim)
    res = prefill(small, pool, list(range(2, 12)))
    pool = append_segment(pool, SegmentKind.system(), res.keys, res.values,
                          res.origin_indices, res.token_ids)
    with pytest.raises(SeqOverflow):
        generate(small, pool, 8, first_logits=res.logits)


def test_decode_state_tracks_position(model):
    pool, res = pool_with_system(model, 10)
    out = generate(model, pool, 5, eos_id=None, first_logits=res.logits)
    assert out.state.position == total_len(pool) + 5
    assert out.state.last_logits.shape == (CFG.vocab,)
    assert out.origin_indices.tolist() == list(range(10, 15))
