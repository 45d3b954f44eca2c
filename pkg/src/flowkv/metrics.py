"""Scoring aggregates and engine-native measurements.

Instruction verification itself happens elsewhere; this module only
aggregates supplied pass/fail booleans into the four accuracy components and
their mean, and measures cache sizes and wall-clock timing of toy runs.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

from .errors import EmptyInput, InvariantViolation
from .pool import CachePool, total_len


@dataclass(frozen=True)
class InstructionResult:
    strict_pass: bool
    loose_pass: bool

    def __post_init__(self):
        if self.strict_pass and not self.loose_pass:
            raise InvariantViolation("strict pass implies loose pass")


@dataclass(frozen=True)
class PromptResult:
    instructions: tuple[InstructionResult, ...]

    def __post_init__(self):
        if not self.instructions:
            raise InvariantViolation("a prompt carries at least one instruction")


def ifr(prompts: Sequence[PromptResult]) -> tuple[float, float, float, float, float]:
    """(strict-prompt, strict-instruction, loose-prompt, loose-instruction, mean).

    Prompt-level accuracy requires every instruction of the prompt to pass;
    instruction-level accuracy pools all instructions of all prompts.
    """
    if not prompts:
        raise EmptyInput("no prompt results supplied")
    n_prompts = len(prompts)
    n_instr = sum(len(p.instructions) for p in prompts)
    spa = sum(all(i.strict_pass for i in p.instructions) for p in prompts) / n_prompts
    lpa = sum(all(i.loose_pass for i in p.instructions) for p in prompts) / n_prompts
    sia = sum(i.strict_pass for p in prompts for i in p.instructions) / n_instr
    lia = sum(i.loose_pass for p in prompts for i in p.instructions) / n_instr
    return spa, sia, lpa, lia, (spa + sia + lpa + lia) / 4.0


def cache_fraction(pool_after: CachePool, full_len: int) -> float:
    """Surviving cache size as a fraction of the uncompressed size."""
    size = total_len(pool_after)
    if full_len < size:
        raise ValueError("full_len smaller than the surviving cache")
    return size / full_len


@dataclass(frozen=True)
class TimingStats:
    prefill_s: float
    ttft_s: float
    tpot_ms: float
    total_gen_s: float
    cache_fraction: float

    def __post_init__(self):
        if self.ttft_s < self.prefill_s:
            raise InvariantViolation("time to first token includes the prefill")
        if not (0.0 < self.cache_fraction <= 1.0):
            raise InvariantViolation("cache fraction must be in (0, 1]")


def measure_timing(
    run_prefill: Callable[[], float],
    generate_tokens: Callable[[], Iterable[int]],
) -> TimingStats:
    """Wall-clock a single prompt-then-generate run.

    ``run_prefill`` performs prompt ingestion (including any compression) and
    returns the cache fraction it produced; ``generate_tokens`` yields output
    tokens one at a time. Values are measured on this machine and reported
    as-is; they are never compared against anybody else's hardware.
    """
    t0 = time.perf_counter()
    fraction = run_prefill()
    t_prefill = time.perf_counter() - t0

    ttft = None
    count = 0
    for _ in generate_tokens():
        count += 1
        if ttft is None:
            ttft = time.perf_counter() - t0
    total = time.perf_counter() - t0
    if ttft is None:
        ttft = total
    tpot_ms = ((total - ttft) * 1000.0 / (count - 1)) if count >= 2 else 0.0
    return TimingStats(
        prefill_s=t_prefill,
        ttft_s=ttft,
        tpot_ms=tpot_ms,
        total_gen_s=total,
        cache_fraction=fraction,
    )


# --- file interfaces ----------------------------------------------------------


def load_prompt_results(path) -> list[PromptResult]:
    """Read one JSON object per line: {"prompt_id", "instructions": [{"strict", "loose"}]}."""
    prompts = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                instrs = tuple(
                    InstructionResult(strict_pass=bool(i["strict"]), loose_pass=bool(i["loose"]))
                    for i in obj["instructions"]
                )
                prompts.append(PromptResult(instructions=instrs))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise InvariantViolation(f"bad prompt record on line {line_no}: {exc}") from exc
    return prompts


def write_ifr_summary(prompts: Sequence[PromptResult], path) -> dict:
    spa, sia, lpa, lia, score = ifr(prompts)
    summary = {
        "prompts": len(prompts),
        "instructions": sum(len(p.instructions) for p in prompts),
        "spa": spa,
        "sia": sia,
        "lpa": lpa,
        "lia": lia,
        "ifr": score,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary
