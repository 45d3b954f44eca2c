"""Dynamic budget allocation.

The global retention target is always measured against the *uncompressed*
size of the history, so the isolating strategy and the nested baseline end
every turn with the same total cache size: the isolating strategy squeezes
each turn's fresh material into whatever room the frozen history leaves,
which means later turns can see local retention well below the global one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import BudgetExhausted


@dataclass(frozen=True)
class GlobalBudget:
    """Fraction of the full (uncompressed) cache retained, in (0, 1]."""

    retention: float

    def __post_init__(self):
        if not (0.0 < self.retention <= 1.0):
            raise ValueError(f"retention must be in (0, 1], got {self.retention}")

    @staticmethod
    def from_ratio(compression_ratio: float, invert: bool = False) -> "GlobalBudget":
        """Budget from a compression ratio in [0, 1).

        Default convention: a higher ratio means a smaller cache
        (retention = 1 - ratio), so ratio 0.9 keeps 10% of the tokens.
        ``invert`` reads the ratio as the retention itself.
        """
        if not (0.0 <= compression_ratio < 1.0) and not invert:
            raise ValueError(f"compression_ratio must be in [0, 1), got {compression_ratio}")
        return GlobalBudget(compression_ratio if invert else 1.0 - compression_ratio)


@dataclass
class BudgetState:
    """Sizes the allocator tracks at one compression instant.

    s_full: uncompressed token count of all history eligible for compression.
    s_preserved: tokens already compressed and frozen in earlier turns.
    """

    s_full: int
    s_preserved: int
    turn: int = 0

    def __post_init__(self):
        if self.s_full < 0 or self.s_preserved < 0:
            raise ValueError("sizes must be non-negative")


def target_budget(s_full: int, g: GlobalBudget) -> int:
    """Global cache size target: round-half-up of s_full * retention, >= 1."""
    if s_full < 0:
        raise ValueError("s_full must be non-negative")
    if s_full == 0:
        return 0
    return max(1, math.floor(s_full * g.retention + 0.5))


def new_data_budget(state: BudgetState, g: GlobalBudget, min_keep: int = 1) -> int:
    """Room left for this turn's fresh tokens under the global target.

    Raises BudgetExhausted when the preserved history already crowds out even
    the min-keep floor; callers fall back to the floor and flag the turn.
    """
    b_new = target_budget(state.s_full, g) - state.s_preserved
    if b_new < min_keep:
        raise BudgetExhausted(
            f"target {target_budget(state.s_full, g)} leaves {b_new} tokens for new data, "
            f"below the min-keep floor of {min_keep}"
        )
    return b_new


def local_retention(b_new: int, s_new_full: int) -> float:
    """Retention actually applied to this turn's fresh tokens."""
    if s_new_full < 1:
        raise ValueError("s_new_full must be >= 1")
    return b_new / s_new_full

