"""Scenario scripts, sweep orchestration, and report generation.

Scenarios are token-id scripts (no tokenizer): one system prompt plus a list
of per-turn queries. A sweep runs every (scenario x strategy x ratio x seed)
cell, emits one CSV row per turn plus a mean/stddev summary across seeds,
and validates the structural invariants (budget fairness between strategies,
compression-count laws) as it goes. All non-timing output is a pure function
of (scenario, config, seed); the wall-clock column is the only thing that
changes between identical runs.
"""

from __future__ import annotations

import concurrent.futures
import json
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .budget import GlobalBudget
from .errors import ConfigError
from .metrics import TimingStats, measure_timing
from .model import Model, ModelConfig, init_model, mix_seeds
from .policies import PolicyConfig
from .pool import CachePool, QUERY, RESPONSE, SYSTEM, total_len
from .strategies import BASELINE, FLOWKV, FULL, STRATEGIES, Session, SessionConfig, TurnRecord

CSV_VERSION = "flowkv-sweep-v1"

CSV_COLUMNS = [
    "scenario_id",
    "strategy",
    "policy",
    "ratio",
    "seed",
    "turn",
    "s_full",
    "target",
    "pre_len",
    "post_len",
    "local_keep",
    "local_retention",
    "clamped",
    "compressed",
    "query_len",
    "response_len",
    "ledger",
    "cache_fraction",
    "survival_system",
    "survival_query_mean",
    "survival_response_mean",
    "error",
    "wall_s",
]

# Columns whose values may legitimately differ between identical runs.
TIMING_COLUMNS = ("wall_s",)


@dataclass(frozen=True)
class Scenario:
    id: str
    system_prompt: tuple[int, ...]
    turns: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if not self.system_prompt:
            raise ConfigError(f"scenario {self.id}: empty system prompt")
        if not self.turns or any(len(t) == 0 for t in self.turns):
            raise ConfigError(f"scenario {self.id}: needs at least one non-empty turn")


def generate_scenarios(
    count: int,
    n_turns: int,
    seed: int,
    vocab: int = 256,
    sys_range: tuple[int, int] = (64, 128),
    query_range: tuple[int, int] = (16, 48),
) -> list[Scenario]:
    """Seeded synthetic corpus; token ids in [2, vocab) keep 0/1 free for pad/eos."""
    if vocab < 3:
        raise ConfigError("vocab too small for synthetic scenarios")
    rng = np.random.Generator(np.random.PCG64(seed))
    out = []
    for i in range(count):
        sys_len = int(rng.integers(sys_range[0], sys_range[1] + 1))
        sys_ids = rng.integers(2, vocab, size=sys_len)
        turns = []
        for _ in range(n_turns):
            q_len = int(rng.integers(query_range[0], query_range[1] + 1))
            turns.append(tuple(int(t) for t in rng.integers(2, vocab, size=q_len)))
        out.append(
            Scenario(
                id=f"scn-{seed}-{i:04d}",
                system_prompt=tuple(int(t) for t in sys_ids),
                turns=tuple(turns),
            )
        )
    return out


def write_scenarios(scenarios: Sequence[Scenario], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenarios:
            fh.write(
                json.dumps(
                    {
                        "id": s.id,
                        "system_prompt": list(s.system_prompt),
                        "turns": [list(t) for t in s.turns],
                    }
                )
            )
            fh.write("\n")


def read_scenarios(path) -> list[Scenario]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out.append(
                    Scenario(
                        id=str(obj["id"]),
                        system_prompt=tuple(int(t) for t in obj["system_prompt"]),
                        turns=tuple(tuple(int(t) for t in turn) for turn in obj["turns"]),
                    )
                )
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ConfigError(f"{path}:{line_no}: bad scenario record: {exc}") from exc
    if not out:
        raise ConfigError(f"{path}: no scenarios found")
    return out


@dataclass
class SweepConfig:
    ratios: list[float]
    strategies: list[str]
    policy: PolicyConfig
    model: ModelConfig
    max_response_tokens: int = 32
    eos_id: Optional[int] = 1
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])
    invert_ratio: bool = False
    output_dir: Path = Path("out")
    jobs: int = 1

    def __post_init__(self):
        if not self.ratios:
            raise ConfigError("ratios must be non-empty")
        if not self.strategies:
            raise ConfigError("strategies must be non-empty")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ConfigError(f"unknown strategy {s!r}")
        for r in self.ratios:
            if not self.invert_ratio and not (0.0 <= r < 1.0):
                raise ConfigError(f"compression ratio {r} outside [0, 1)")
            if self.invert_ratio and not (0.0 < r <= 1.0):
                raise ConfigError(f"retention {r} outside (0, 1]")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.max_response_tokens < 1:
            raise ConfigError("max_response_tokens must be >= 1")
        self.output_dir = Path(self.output_dir)

    @staticmethod
    def from_json(obj: dict) -> "SweepConfig":
        try:
            model = ModelConfig(**obj.get("model", {}))
            policy = PolicyConfig(**obj.get("policy", {}))
            return SweepConfig(
                ratios=list(obj.get("ratios", [0.5])),
                strategies=list(obj.get("strategies", list(STRATEGIES))),
                policy=policy,
                model=model,
                max_response_tokens=int(obj.get("max_response_tokens", 32)),
                eos_id=obj.get("eos_id", 1),
                seeds=[int(s) for s in obj.get("seeds", [1, 2, 3])],
                invert_ratio=bool(obj.get("invert_ratio", False)),
                output_dir=Path(obj.get("output_dir", "out")),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad config: {exc}") from exc


def load_config(path) -> SweepConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return SweepConfig.from_json(obj)


def survival_report(pool_full: CachePool, pool_compressed: CachePool) -> dict[str, float]:
    """Per-segment fraction of original tokens surviving in the compressed pool.

    The full pool pins the scenario: prompt-side segments must have matching
    original lengths. Response segments are generated, so their reference
    length is their own pre-compression size.
    """
    full_by_kind = {s.kind: s for s in pool_full.segments}
    out = {}
    for seg in pool_compressed.segments:
        ref = full_by_kind.get(seg.kind)
        if seg.kind.role in (SYSTEM, QUERY) and ref is not None and ref.original_len != seg.original_len:
            raise ConfigError(
                f"segment {seg.kind.label()}: pools come from different scenarios"
            )
        out[seg.kind.label()] = len(seg) / seg.original_len
    return out


def _survival_by_role(pool: CachePool) -> dict[str, float]:
    fractions = {SYSTEM: [], QUERY: [], RESPONSE: []}
    for seg in pool.segments:
        fractions[seg.kind.role].append(len(seg) / seg.original_len)
    return {
        role: (float(np.mean(vals)) if vals else 1.0) for role, vals in fractions.items()
    }


@dataclass
class SessionReport:
    scenario_id: str
    strategy: str
    ratio: float
    seed: int
    policy_kind: str
    records: list[TurnRecord]
    responses: list[list[int]]
    final_ledger: dict[str, int]
    survival: dict[str, float]
    turn_wall_s: list[float]
    total_wall_s: float
    final_pool: Optional[CachePool] = None

    def cache_fractions(self) -> list[float]:
        return [r.post_compress_len / r.s_full for r in self.records]

    def to_json(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "strategy": self.strategy,
            "ratio": self.ratio,
            "seed": self.seed,
            "policy": self.policy_kind,
            "turns": [r.to_json() for r in self.records],
            "responses": self.responses,
            "final_ledger": self.final_ledger,
            "survival": self.survival,
            "cache_fractions": self.cache_fractions(),
            "turn_wall_s": self.turn_wall_s,
            "total_wall_s": self.total_wall_s,
        }


def session_seed(run_seed: int, scenario_id: str) -> int:
    return mix_seeds(run_seed, zlib.crc32(scenario_id.encode("utf-8")))


_MODEL_CACHE: dict[tuple, Model] = {}


def model_for_seed(cfg: ModelConfig, run_seed: int) -> Model:
    """Model with the run seed folded into the configured seed, memoized."""
    key = (cfg, run_seed)
    if key not in _MODEL_CACHE:
        seeded = ModelConfig(
            vocab=cfg.vocab,
            layers=cfg.layers,
            heads=cfg.heads,
            head_dim=cfg.head_dim,
            ffn_mult=cfg.ffn_mult,
            max_seq=cfg.max_seq,
            seed=mix_seeds(cfg.seed, run_seed),
        )
        _MODEL_CACHE[key] = init_model(seeded)
    return _MODEL_CACHE[key]


def run_scenario(
    scenario: Scenario,
    strategy: str,
    ratio: float,
    cfg: SweepConfig,
    run_seed: int,
    model: Optional[Model] = None,
    keep_pool: bool = False,
) -> SessionReport:
    """Run one session cell; deterministic per (scenario, config, seed)."""
    model = model or model_for_seed(cfg.model, run_seed)
    budget = GlobalBudget.from_ratio(ratio, invert=cfg.invert_ratio)
    session = Session(
        model,
        SessionConfig(
            strategy=strategy,
            budget=budget,
            policy=cfg.policy,
            max_response_tokens=cfg.max_response_tokens,
            eos_id=cfg.eos_id,
            seed=session_seed(run_seed, scenario.id),
        ),
    )
    t_start = time.perf_counter()
    session.start(list(scenario.system_prompt))
    responses, walls = [], []
    for query in scenario.turns:
        t0 = time.perf_counter()
        out_ids, _record = session.run_turn(list(query))
        walls.append(time.perf_counter() - t0)
        responses.append(out_ids)
    return SessionReport(
        scenario_id=scenario.id,
        strategy=strategy,
        ratio=ratio,
        seed=run_seed,
        policy_kind=cfg.policy.policy_kind,
        records=session.records,
        responses=responses,
        final_ledger={s.kind.label(): s.compression_count for s in session.pool.segments},
        survival=_survival_by_role(session.pool),
        turn_wall_s=walls,
        total_wall_s=time.perf_counter() - t_start,
        final_pool=session.pool if keep_pool else None,
    )


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def report_rows(report: SessionReport) -> list[dict]:
    rows = []
    for record, wall in zip(report.records, report.turn_wall_s):
        ledger = ";".join(f"{k}:{v}" for k, v in record.ledger_snapshot.items())
        rows.append(
            {
                "scenario_id": report.scenario_id,
                "strategy": report.strategy,
                "policy": report.policy_kind,
                "ratio": report.ratio,
                "seed": report.seed,
                "turn": record.turn,
                "s_full": record.s_full,
                "target": record.target,
                "pre_len": record.pre_compress_len,
                "post_len": record.post_compress_len,
                "local_keep": record.local_keep_count,
                "local_retention": record.local_retention,
                "clamped": record.clamped,
                "compressed": record.compressed,
                "query_len": record.query_len,
                "response_len": record.response_len,
                "ledger": ledger,
                "cache_fraction": record.post_compress_len / record.s_full,
                "survival_system": report.survival[SYSTEM],
                "survival_query_mean": report.survival[QUERY],
                "survival_response_mean": report.survival[RESPONSE],
                "error": "",
                "wall_s": wall,
            }
        )
    return rows


def _error_row(scenario_id, strategy, policy, ratio, seed, message) -> dict:
    row = {c: "" for c in CSV_COLUMNS}
    row.update(
        scenario_id=scenario_id,
        strategy=strategy,
        policy=policy,
        ratio=ratio,
        seed=seed,
        turn=0,
        error=message.replace("\n", " ").replace(",", ";"),
        wall_s=0.0,
    )
    return row


def _run_cell(args) -> list[dict]:
    scenario, strategy, ratio, cfg, seed = args
    try:
        return report_rows(run_scenario(scenario, strategy, ratio, cfg, seed))
    except Exception as exc:  # partial failures are reported, not fatal
        return [_error_row(scenario.id, strategy, cfg.policy.policy_kind, ratio, seed, str(exc))]


def row_sort_key(row: dict) -> tuple:
    return (
        str(row["scenario_id"]),
        str(row["strategy"]),
        str(row["policy"]),
        float(row["ratio"]),
        int(row["seed"]),
        int(row["turn"]),
    )


@dataclass
class SweepResult:
    rows: list[dict]
    violations: list[str]
    had_errors: bool


def validate_rows(rows: Sequence[dict]) -> list[str]:
    """Cross-check fairness and ledger laws over the collected rows."""
    problems = []
    by_cell: dict[tuple, dict[str, dict]] = {}
    for row in rows:
        if row["error"]:
            continue
        key = (row["scenario_id"], row["policy"], row["ratio"], row["seed"], row["turn"])
        by_cell.setdefault(key, {})[row["strategy"]] = row
        # ledger laws
        ledger = {
            part.split(":")[0]: int(part.split(":")[1])
            for part in str(row["ledger"]).split(";")
            if part
        }
        turn = int(row["turn"])
        if row["strategy"] == BASELINE and row["compressed"]:
            expect_sys = turn
            if ledger.get(SYSTEM) != expect_sys:
                problems.append(f"{key}: baseline system ledger {ledger.get(SYSTEM)} != {expect_sys}")
        if row["strategy"] == FLOWKV and row["compressed"]:
            bad = {k: v for k, v in ledger.items() if v > 1}
            if bad:
                problems.append(f"{key}: flowkv ledger exceeds one compression: {bad}")
        if row["strategy"] == FULL:
            if any(v != 0 for v in ledger.values()):
                problems.append(f"{key}: full strategy must never compress")
    for key, cell in by_cell.items():
        if BASELINE in cell and FLOWKV in cell:
            b, f = cell[BASELINE], cell[FLOWKV]
            if abs(int(b["post_len"]) - int(f["post_len"])) > 1:
                problems.append(
                    f"{key}: fairness violated, baseline {b['post_len']} vs flowkv {f['post_len']}"
                )
    return problems


def run_sweep(scenarios: Sequence[Scenario], cfg: SweepConfig) -> SweepResult:
    tasks = [
        (scenario, strategy, ratio, cfg, seed)
        for scenario in scenarios
        for strategy in cfg.strategies
        for ratio in cfg.ratios
        for seed in cfg.seeds
    ]
    rows: list[dict] = []
    if cfg.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            for chunk in pool.map(_run_cell, tasks):
                rows.extend(chunk)
    else:
        for task in tasks:
            rows.extend(_run_cell(task))
    rows.sort(key=row_sort_key)
    had_errors = any(r["error"] for r in rows)
    return SweepResult(rows=rows, violations=validate_rows(rows), had_errors=had_errors)


def write_csv(rows: Sequence[dict], path, columns: Sequence[str] = CSV_COLUMNS, version: str = CSV_VERSION) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {version}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[c]) for c in columns) + "\n")


SUMMARY_COLUMNS = [
    "scenario_id",
    "strategy",
    "policy",
    "ratio",
    "turn",
    "seeds",
    "post_len_mean",
    "post_len_std",
    "cache_fraction_mean",
    "cache_fraction_std",
    "survival_system_mean",
    "survival_system_std",
    "response_len_mean",
    "response_len_std",
]


def summarize_rows(rows: Sequence[dict]) -> list[dict]:
    """Mean/stddev across seeds for each (scenario, strategy, ratio, turn)."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        if row["error"]:
            continue
        key = (row["scenario_id"], row["strategy"], row["policy"], row["ratio"], row["turn"])
        groups.setdefault(key, []).append(row)

    def stats(vals):
        arr = np.asarray(vals, dtype=np.float64)
        return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0

    out = []
    for key in sorted(groups, key=lambda k: (str(k[0]), str(k[1]), str(k[2]), float(k[3]), int(k[4]))):
        rows_g = groups[key]
        post_m, post_s = stats([r["post_len"] for r in rows_g])
        frac_m, frac_s = stats([r["cache_fraction"] for r in rows_g])
        surv_m, surv_s = stats([r["survival_system"] for r in rows_g])
        resp_m, resp_s = stats([r["response_len"] for r in rows_g])
        out.append(
            {
                "scenario_id": key[0],
                "strategy": key[1],
                "policy": key[2],
                "ratio": key[3],
                "turn": key[4],
                "seeds": len(rows_g),
                "post_len_mean": post_m,
                "post_len_std": post_s,
                "cache_fraction_mean": frac_m,
                "cache_fraction_std": frac_s,
                "survival_system_mean": surv_m,
                "survival_system_std": surv_s,
                "response_len_mean": resp_m,
                "response_len_std": resp_s,
            }
        )
    return out


def strip_timing(csv_text: str) -> str:
    """Drop timing columns from CSV text; what remains is run-invariant."""
    lines = csv_text.strip("\n").split("\n")
    if len(lines) < 2:
        return csv_text
    header = lines[1].split(",")
    keep = [i for i, c in enumerate(header) if c not in TIMING_COLUMNS]
    out = [lines[0], ",".join(header[i] for i in keep)]
    for line in lines[2:]:
        cells = line.split(",")
        out.append(",".join(cells[i] for i in keep))
    return "\n".join(out) + "\n"


# --- timing benchmark (prompt -> compress -> generate) -------------------------


@dataclass
class BenchRow:
    configuration: str
    prompt_len: int
    output_len: int
    ratio: Optional[float]
    stats: TimingStats
    backend: str


def bench_cell(
    strategy: str,
    ratio: float,
    cfg: SweepConfig,
    prompt_len: int,
    output_len: int,
    seed: int = 1,
) -> TimingStats:
    """Timed single-turn run: long prompt, tiny query, fixed-length output."""
    model = model_for_seed(cfg.model, seed)
    if prompt_len + output_len + 8 > model.cfg.max_seq:
        raise ConfigError(
            f"max_seq {model.cfg.max_seq} too small for prompt {prompt_len} + output {output_len}"
        )
    rng = np.random.Generator(np.random.PCG64(seed))
    prompt = [int(t) for t in rng.integers(2, model.cfg.vocab, size=prompt_len)]
    query = [int(t) for t in rng.integers(2, model.cfg.vocab, size=4)]
    session = Session(
        model,
        SessionConfig(
            strategy=strategy,
            budget=GlobalBudget.from_ratio(ratio, invert=cfg.invert_ratio),
            policy=cfg.policy,
            max_response_tokens=output_len,
            eos_id=None,  # fixed-length output for stable timing
            seed=seed,
        ),
    )
    box = {}

    def run_prefill() -> float:
        session.start(prompt)
        record = session.begin_turn(query)
        box["record"] = record
        box["stream"] = session.response_stream()
        return record.post_compress_len / record.s_full

    def gen_tokens():
        return iter(box["stream"])

    stats = measure_timing(run_prefill, gen_tokens)
    session.finish_turn(box["record"], box["stream"].result())
    return stats
