import numpy as np
import pytest

from flowkv import (
    CachePool,
    SegmentKind,
    append_segment,
    compress_segments,
    compression_ledger,
    snapshot,
    total_len,
)
from flowkv.errors import EmptySelection, OrderViolation, RangeNotContiguous, ShapeMismatch

L, H, D = 2, 2, 4


def make_tokens(n, origin_start=0, rng=None, token_base=5):
    rng = rng or np.random.default_rng(origin_start + 17)
    keys = rng.standard_normal((L, n, H, D))
    values = rng.standard_normal((L, n, H, D))
    origins = np.arange(origin_start, origin_start + n, dtype=np.int64)
    ids = np.full(n, token_base, dtype=np.int64)
    return keys, values, origins, ids


def empty_pool():
    return CachePool(L, H, D)


def build(pool, kind, n, origin_start):
    return append_segment(pool, kind, *make_tokens(n, origin_start))


def test_append_system_prompt():
    pool = build(empty_pool(), SegmentKind.system(), 5, 0)
    assert len(pool.segments) == 1
    assert total_len(pool) == 5


def test_append_query_extends_length():
    pool = build(empty_pool(), SegmentKind.system(), 5, 0)
    pool = build(pool, SegmentKind.query(1), 3, 5)
    assert len(pool.segments) == 2
    assert total_len(pool) == 8


def test_append_duplicate_query_is_order_violation():
    pool = build(empty_pool(), SegmentKind.system(), 5, 0)
    pool = build(pool, SegmentKind.query(1), 3, 5)
    with pytest.raises(OrderViolation):
        build(pool, SegmentKind.query(1), 3, 8)


def test_append_must_start_with_system():
    with pytest.raises(OrderViolation):
        build(empty_pool(), SegmentKind.query(1), 3, 0)


def test_append_wrong_turn_number():
    pool = build(empty_pool(), SegmentKind.system(), 5, 0)
    pool = build(pool, SegmentKind.query(1), 3, 5)
    pool = build(pool, SegmentKind.response(1), 2, 8)
    with pytest.raises(OrderViolation):
        build(pool, SegmentKind.query(3), 3, 10)


def test_append_shape_mismatch():
    pool = build(empty_pool(), SegmentKind.system(), 5, 0)
    keys, values, origins, ids = make_tokens(3, 5)
    with pytest.raises(ShapeMismatch):
        append_segment(pool, SegmentKind.query(1), keys[:, :, :, :2], values, origins, ids)


def test_append_origin_must_increase():
    pool = build(empty_pool(), SegmentKind.system(), 5, 0)
    with pytest.raises(OrderViolation):
        build(pool, SegmentKind.query(1), 3, 2)  # overlaps system origins


def test_compress_full_retention_still_counts():
    pool = build(empty_pool(), SegmentKind.system(), 10, 0)
    out = compress_segments(pool, (0, 1), range(10))
    seg = out.segments[0]
    assert seg.compression_count == 1
    assert total_len(out) == 10
    np.testing.assert_array_equal(seg.keys, pool.segments[0].keys)


def test_compress_subset_keeps_origins():
    pool = build(empty_pool(), SegmentKind.system(), 10, 0)
    out = compress_segments(pool, (0, 1), {0, 1, 8, 9})
    seg = out.segments[0]
    assert list(seg.origin_indices) == [0, 1, 8, 9]
    assert seg.original_len == 10
    assert len(seg) == 4


def test_compress_empty_selection():
    pool = build(empty_pool(), SegmentKind.system(), 10, 0)
    with pytest.raises(EmptySelection):
        compress_segments(pool, (0, 1), set())


def test_compress_bad_range():
    pool = build(empty_pool(), SegmentKind.system(), 10, 0)
    with pytest.raises(RangeNotContiguous):
        compress_segments(pool, (1, 1), {0})


def test_compress_cannot_empty_a_segment():
    pool = build(empty_pool(), SegmentKind.system(), 5, 0)
    pool = build(pool, SegmentKind.query(1), 3, 5)
    # keep only query tokens: system segment would end up empty
    with pytest.raises(EmptySelection):
        compress_segments(pool, (0, 2), {5, 6, 7})


def test_compress_survivors_bit_exact():
    pool = build(empty_pool(), SegmentKind.system(), 10, 0)
    before = pool.segments[0].keys.copy()
    out = compress_segments(pool, (0, 1), {2, 3, 7})
    np.testing.assert_array_equal(out.segments[0].keys, before[:, [2, 3, 7]])
    out2 = compress_segments(out, (0, 1), {0, 2})
    np.testing.assert_array_equal(out2.segments[0].keys, before[:, [2, 7]])
    assert out2.segments[0].compression_count == 2


def test_total_len_cases():
    pool = empty_pool()
    assert total_len(pool) == 0
    pool = build(pool, SegmentKind.system(), 5, 0)
    pool = build(pool, SegmentKind.query(1), 3, 5)
    pool = build(pool, SegmentKind.response(1), 4, 8)
    assert total_len(pool) == 12
    out = compress_segments(pool, (0, 3), {0, 1, 5, 6, 8, 9})
    assert total_len(out) == 6


def test_ledger_fresh_pool_all_zero():
    pool = build(empty_pool(), SegmentKind.system(), 5, 0)
    pool = build(pool, SegmentKind.query(1), 3, 5)
    pool = build(pool, SegmentKind.response(1), 4, 8)
    assert all(v == 0 for v in compression_ledger(pool).values())


def test_ledger_counts_range_membership():
    pool = build(empty_pool(), SegmentKind.system(), 5, 0)
    pool = build(pool, SegmentKind.query(1), 3, 5)
    pool = build(pool, SegmentKind.response(1), 4, 8)
    pool = compress_segments(pool, (0, 3), {0, 5, 8})
    pool = compress_segments(pool, (1, 3), {0, 1})
    ledger = {k.label(): v for k, v in compression_ledger(pool).items()}
    assert ledger == {"system": 1, "q1": 2, "r1": 2}


def test_provenance_monotone_under_random_ops():
    rng = np.random.default_rng(42)
    pool = build(empty_pool(), SegmentKind.system(), 12, 0)
    pool = build(pool, SegmentKind.query(1), 6, 12)
    pool = build(pool, SegmentKind.response(1), 6, 18)
    survivors = {s.kind.label(): set(s.origin_indices.tolist()) for s in pool.segments}
    for _ in range(10):
        n = total_len(pool)
        keep = sorted(rng.choice(n, size=max(3, n - rng.integers(1, 4)), replace=False))
        # ensure one member per segment to stay well-formed
        bounds = pool.segment_bounds()
        keep = sorted(set(keep) | {b for b, _ in bounds})
        pool = compress_segments(pool, (0, 3), keep)
        for s in pool.segments:
            now = set(s.origin_indices.tolist())
            assert now <= survivors[s.kind.label()]
            assert list(s.origin_indices) == sorted(now)
            survivors[s.kind.label()] = now


def test_snapshot_roundtrip_fields():
    pool = build(empty_pool(), SegmentKind.system(), 4, 0)
    pool = build(pool, SegmentKind.query(1), 2, 4)
    snap = snapshot(pool)
    assert snap["layers"] == L and snap["heads"] == H and snap["head_dim"] == D
    assert [s["kind"] for s in snap["segments"]] == ["system", "query"]
    assert snap["segments"][1]["turn"] == 1
    assert "key" not in snap["segments"][0]["tokens"][0]
    full = snapshot(pool, full_dump=True)
    tok = full["segments"][0]["tokens"][0]
    assert len(tok["key"]) == L * H * D
    np.testing.assert_allclose(
        np.array(tok["key"]).reshape(L, H, D), pool.segments[0].token(0).key
    )


def test_token_view_matches_arrays():
    pool = build(empty_pool(), SegmentKind.system(), 4, 0)
    seg = pool.segments[0]
    t = seg.token(2)
    assert t.origin_index == 2
    np.testing.assert_array_equal(t.key, seg.keys[:, 2])
    assert t.key.shape == (L, H, D)
    assert len(seg.tokens) == 4
