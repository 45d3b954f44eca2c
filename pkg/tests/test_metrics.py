import json
import time

import numpy as np
import pytest

from flowkv import (
    CachePool,
    InstructionResult,
    PromptResult,
    SegmentKind,
    TimingStats,
    append_segment,
    cache_fraction,
    compress_segments,
    ifr,
    measure_timing,
)
from flowkv.metrics import load_prompt_results, write_ifr_summary
from flowkv.errors import EmptyInput, InvariantViolation


def instr(strict, loose):
    return InstructionResult(strict_pass=strict, loose_pass=loose)


def prompt(*pairs):
    return PromptResult(instructions=tuple(instr(s, l) for s, l in pairs))


def test_all_pass_saturates():
    prompts = [prompt((True, True), (True, True)) for _ in range(3)]
    assert ifr(prompts) == (1.0, 1.0, 1.0, 1.0, 1.0)


def test_hand_worked_example():
    a = prompt((True, True), (True, True))
    b = prompt((True, True), (False, True))
    spa, sia, lpa, lia, score = ifr([a, b])
    assert spa == 0.5
    assert sia == 0.75
    assert lpa == 1.0
    assert lia == 1.0
    assert score == 0.8125


def test_strict_implies_loose_enforced():
    with pytest.raises(InvariantViolation):
        instr(True, False)


def test_empty_input():
    with pytest.raises(EmptyInput):
        ifr([])
    with pytest.raises(InvariantViolation):
        PromptResult(instructions=())


def test_loose_bounds_and_mean_identity_randomized():
    rng = np.random.default_rng(17)
    for _ in range(500):
        prompts = []
        for _ in range(int(rng.integers(1, 8))):
            pairs = []
            for _ in range(int(rng.integers(1, 6))):
                loose = bool(rng.integers(0, 2))
                strict = bool(rng.integers(0, 2)) and loose
                pairs.append((strict, loose))
            prompts.append(prompt(*pairs))
        spa, sia, lpa, lia, score = ifr(prompts)
        assert lpa >= spa
        assert lia >= sia
        assert abs(score - (spa + sia + lpa + lia) / 4) < 1e-12


def test_reorder_invariance():
    rng = np.random.default_rng(3)
    prompts = [
        prompt(*[(False, True), (True, True)][: int(rng.integers(1, 3))]) for _ in range(6)
    ]
    base = ifr(prompts)
    assert ifr(prompts[::-1]) == base


def test_spa_can_exceed_sia():
    # short perfect prompt + long failing prompt: prompt-level beats instruction-level
    a = prompt((True, True))
    b = prompt((False, True), (False, True), (False, True), (True, True))
    spa, sia, _, _, _ = ifr([a, b])
    assert spa == 0.5
    assert sia == pytest.approx(0.4)
    assert spa > sia


def test_cache_fraction():
    pool = CachePool(1, 1, 2)
    rng = np.random.default_rng(0)
    keys = rng.standard_normal((1, 10, 1, 2))
    pool = append_segment(pool, SegmentKind.system(), keys, keys.copy(),
                          np.arange(10), np.full(10, 3))
    assert cache_fraction(pool, 10) == 1.0
    squeezed = compress_segments(pool, (0, 1), {0, 9})
    assert cache_fraction(squeezed, 10) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        cache_fraction(pool, 5)


def test_timing_relations():
    def run_prefill():
        time.sleep(0.01)
        return 0.5

    def gen():
        for i in range(5):
            time.sleep(0.002)
            yield i

    stats = measure_timing(run_prefill, gen)
    assert stats.ttft_s >= stats.prefill_s
    assert stats.total_gen_s >= stats.ttft_s
    expect_tpot = (stats.total_gen_s - stats.ttft_s) * 1000 / 4
    assert stats.tpot_ms == pytest.approx(expect_tpot)


def test_timing_invariant_validation():
    with pytest.raises(InvariantViolation):
        TimingStats(prefill_s=1.0, ttft_s=0.5, tpot_ms=1.0, total_gen_s=2.0, cache_fraction=0.5)
    with pytest.raises(InvariantViolation):
        TimingStats(prefill_s=0.1, ttft_s=0.5, tpot_ms=1.0, total_gen_s=2.0, cache_fraction=0.0)


def test_jsonl_roundtrip(tmp_path):
    path = tmp_path / "results.jsonl"
    path.write_text(
        json.dumps({"prompt_id": "a", "instructions": [{"strict": True, "loose": True}]})
        + "\n"
        + json.dumps(
            {
                "prompt_id": "b",
                "instructions": [
                    {"strict": False, "loose": True},
                    {"strict": True, "loose": True},
                ],
            }
        )
        + "\n"
    )
    prompts = load_prompt_results(path)
    assert len(prompts) == 2
    out = tmp_path / "summary.json"
    summary = write_ifr_summary(prompts, out)
    parsed = json.loads(out.read_text())
    assert parsed == summary
    assert parsed["prompts"] == 2
    assert parsed["instructions"] == 3
    assert parsed["ifr"] == pytest.approx((0.5 + 2 / 3 + 1.0 + 1.0) / 4)


def test_jsonl_rejects_bad_rows(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"prompt_id": "x", "instructions": [{"strict": true}]}\n')
    with pytest.raises(InvariantViolation):
        load_prompt_results(path)
