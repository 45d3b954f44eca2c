"""Multi-turn KV-cache management engine.

Compares three cache strategies over pluggable token-selection policies on a
deterministic toy decoder: keeping everything, re-compressing the whole
history every turn, and isolating already-compressed history so only the
newest turn's material is ever compressed. Budgets are allocated so the
compressing strategies always end a turn at the same total size, which makes
their divergence in content (not size) directly measurable.
"""

from . import kernels
from .budget import BudgetState, GlobalBudget, local_retention, new_data_budget, target_budget
from .loss_model import (
    DecaySchedule,
    DecayTrace,
    InfoLossModel,
    decay_table,
    isolated_trace,
    nested_trace,
    simulate_decay,
)
from .metrics import (
    InstructionResult,
    PromptResult,
    TimingStats,
    cache_fraction,
    ifr,
    measure_timing,
)
from .model import (
    DecodeState,
    DecodeStream,
    GenerationResult,
    Model,
    ModelConfig,
    PrefillResult,
    dump_weights,
    generate,
    init_model,
    load_weights,
    mix_seeds,
    prefill,
)
from .policies import (
    AttentionObservation,
    KeepBudget,
    PolicyConfig,
    SelectionContext,
    TokenSelector,
    select_chunkkv,
    select_expected_attention,
    select_h2o,
    select_random,
    select_snapkv,
    select_streaming,
)
from .pool import (
    CachePool,
    Segment,
    SegmentKind,
    TokenKV,
    append_segment,
    append_tokens,
    compress_segments,
    compression_ledger,
    snapshot,
    total_len,
)
from .strategies import (
    BASELINE,
    FLOWKV,
    FULL,
    AttentionTape,
    Session,
    SessionConfig,
    TurnRecord,
    run_turn_baseline,
    run_turn_flowkv,
    run_turn_fullkv,
    select_with_floor,
)
from .harness import (
    Scenario,
    SessionReport,
    SweepConfig,
    bench_cell,
    generate_scenarios,
    read_scenarios,
    run_scenario,
    run_sweep,
    survival_report,
    write_scenarios,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
