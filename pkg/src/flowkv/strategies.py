"""Turn drivers: full cache, nested eviction, and isolation.

All three drivers share the same turn skeleton: (maybe) compress, append the
new query, generate a response, append it. They differ only in what gets
compressed:

* ``full``     - nothing, the cache grows without bound;
* ``baseline`` - the entire pool, every turn, so early segments are squeezed
  again and again (a segment's compression count grows by one per turn);
* ``flowkv``   - only the previous turn's still-uncompressed query/response
  pair; anything compressed once is frozen verbatim afterwards.

Budgets always aim at ``round(uncompressed_history * retention)``, so the
baseline and the isolating strategy end every turn at the same total size.

Attention rows recorded for policy scoring are keyed by token origin, not by
pool position: compression shifts positions, but origins are stable, so an
observer row can always be re-aligned to the current candidates (dropping
evicted columns and renormalizing).
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .budget import BudgetState, GlobalBudget, local_retention, new_data_budget, target_budget
from .errors import BudgetExhausted, ConfigError
from .model import DecodeStream, GenerationResult, Model, PrefillResult, mix_seeds, prefill
from .policies import (
    EXPECTED_ATTENTION,
    CHUNKKV,
    H2O,
    SNAPKV,
    AttentionObservation,
    PolicyConfig,
    SelectionContext,
    TokenSelector,
)
from .pool import CachePool, SegmentKind, append_segment, compression_ledger, compress_segments, total_len

FULL = "full"
BASELINE = "baseline"
FLOWKV = "flowkv"
STRATEGIES = (FULL, BASELINE, FLOWKV)


class AttentionTape:
    """Rolling record of recent attention rows, query vectors, and column mass.

    Holds one entry per recently computed token: the token's layer/head-mean
    softmax row (with the origins of the keys it attended over) and its
    layer/head-mean rotated query vector. Also accumulates, per origin, the
    total attention mass each key has received so far.
    """

    def __init__(self, window: int):
        self.window = window
        self._entries: "OrderedDict[int, tuple[np.ndarray, np.ndarray, np.ndarray]]" = OrderedDict()
        self._cum = np.zeros(0)

    def _grow_cum(self, upto: int) -> None:
        if upto > self._cum.shape[0]:
            grown = np.zeros(max(upto, 2 * self._cum.shape[0] + 64))
            grown[: self._cum.shape[0]] = self._cum
            self._cum = grown

    def _push(self, origin: int, col_origins: np.ndarray, row: np.ndarray, qvec: np.ndarray) -> None:
        self._entries[origin] = (col_origins, row, qvec)
        while len(self._entries) > self.window:
            self._entries.popitem(last=False)

    def record_prefill(self, result: PrefillResult, visible_origins: np.ndarray) -> None:
        """Ingest a prefill computed with attn_mode='tail'."""
        if result.attn_colsums is None or result.attn_tail is None:
            raise ValueError("tape feeding requires prefill(attn_mode='tail')")
        self._grow_cum(int(visible_origins[-1]) + 1)
        np.add.at(self._cum, visible_origins, result.attn_colsums)
        m = result.origin_indices.shape[0]
        tail = result.attn_tail.shape[0]
        for i in range(tail):
            g = m - tail + i  # global row index within the prefill
            n_vis = visible_origins.shape[0] - (m - 1 - g)
            self._push(
                int(result.origin_indices[g]),
                visible_origins[:n_vis].copy(),
                result.attn_tail[i, :n_vis].copy(),
                result.query_obs[g].copy(),
            )

    def record_generation(self, result: GenerationResult, pool_origins: np.ndarray) -> None:
        for i, row in enumerate(result.step_rows):
            origin = int(result.origin_indices[i])
            col_origins = np.concatenate([pool_origins, result.origin_indices[: i + 1]])
            self._grow_cum(origin + 1)
            np.add.at(self._cum, col_origins, row)
            self._push(origin, col_origins, row, result.query_obs[i])

    def cumulative_for(self, origins: np.ndarray) -> np.ndarray:
        self._grow_cum(int(origins[-1]) + 1 if origins.size else 0)
        return self._cum[origins]

    def observation_for(self, cand_origins: np.ndarray, obs_window: int) -> Optional[AttentionObservation]:
        """Rows of the trailing candidates that still have recorded entries.

        Each row is re-aligned onto the current candidates: mass on evicted
        keys is dropped and the row renormalized to sum to one.
        """
        n = cand_origins.shape[0]
        picked = []
        for j in range(n - 1, -1, -1):
            if len(picked) == min(obs_window, n):
                break
            origin = int(cand_origins[j])
            if origin not in self._entries:
                break  # entries cover a suffix of the stream; earlier ones are gone
            picked.append(origin)
        if not picked:
            return None
        picked.reverse()
        rows = np.zeros((len(picked), n))
        for r, origin in enumerate(picked):
            col_origins, row, _ = self._entries[origin]
            idx = np.searchsorted(cand_origins, col_origins)
            ok = (idx < n) & (cand_origins[np.minimum(idx, n - 1)] == col_origins)
            rows[r, idx[ok]] = row[ok]
            rows[r] /= rows[r].sum()
        return AttentionObservation(rows, observer_span=len(picked))

    def query_stats_for(self, obs_window: int, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
        """Mean and biased covariance of the most recent query vectors."""
        qs = [entry[2] for entry in self._entries.values()][-obs_window:]
        if not qs:
            return np.zeros(head_dim), np.zeros((head_dim, head_dim))
        x = np.stack(qs)
        mu = x.mean(axis=0)
        xc = x - mu
        return mu, xc.T @ xc / x.shape[0]


def select_with_floor(ranking: np.ndarray, seg_spans: list[tuple[int, int]], budget: int) -> list[int]:
    """First ``budget`` ranked tokens, guaranteeing one survivor per segment.

    Walks the priority ranking and defers further picks from already-covered
    segments whenever the remaining slots are needed to reach segments that
    still have no survivor. Requires budget >= len(seg_spans).
    """
    n_segs = len(seg_spans)
    if budget < n_segs:
        raise ValueError(f"budget {budget} below one token per segment ({n_segs})")
    starts = np.array([s for s, _ in seg_spans])
    covered = [False] * n_segs
    uncovered = n_segs
    chosen: list[int] = []
    for idx in ranking:
        slots = budget - len(chosen)
        if slots == 0:
            break
        seg = int(np.searchsorted(starts, idx, side="right") - 1)
        if not covered[seg]:
            covered[seg] = True
            uncovered -= 1
            chosen.append(int(idx))
        elif slots > uncovered:
            chosen.append(int(idx))
    return sorted(chosen)


@dataclass
class TurnRecord:
    """What one turn did to the cache."""

    turn: int
    strategy: str
    pre_compress_len: int
    post_compress_len: int
    local_keep_count: int
    local_retention: float
    clamped: bool
    compressed: bool
    s_full: int
    s_preserved: int
    target: int
    query_len: int = 0
    response_len: int = 0
    ledger_snapshot: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = dict(self.__dict__)
        out["ledger_snapshot"] = {k: v for k, v in sorted(self.ledger_snapshot.items())}
        return out


@dataclass
class SessionConfig:
    strategy: str
    budget: GlobalBudget
    policy: PolicyConfig
    max_response_tokens: int = 32
    eos_id: Optional[int] = 1
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.max_response_tokens < 1:
            raise ConfigError("max_response_tokens must be >= 1")


class Session:
    """One dialogue under one (strategy, policy, budget) cell."""

    def __init__(self, model: Model, cfg: SessionConfig):
        self.model = model
        self.cfg = cfg
        mc = model.cfg
        self.pool = CachePool(mc.layers, mc.heads, mc.head_dim)
        self.tape = AttentionTape(window=cfg.policy.obs_window)
        self.selector = TokenSelector(cfg.policy)
        self.turn = 0
        self.records: list[TurnRecord] = []
        self._pending_logits: Optional[np.ndarray] = None
        self._decode_base_origins: Optional[np.ndarray] = None

    def start(self, system_ids) -> None:
        if self.pool.segments:
            raise ConfigError("session already started")
        res = prefill(
            self.model,
            self.pool,
            system_ids,
            attn_mode="tail",
            tail_rows=self.tape.window,
        )
        visible = np.concatenate([self.pool.flat_origins(), res.origin_indices])
        self.pool = append_segment(
            self.pool, SegmentKind.system(), res.keys, res.values, res.origin_indices, res.token_ids
        )
        self.tape.record_prefill(res, visible)

    # -- compression ------------------------------------------------------

    def _selection_context(self, seg_range: tuple[int, int]) -> SelectionContext:
        segs = self.pool.segments[seg_range[0] : seg_range[1]]
        cand_origins = np.concatenate([s.origin_indices for s in segs])
        n = cand_origins.shape[0]
        kind = self.cfg.policy.policy_kind
        ctx = SelectionContext(candidates_len=n)
        ctx.seed = mix_seeds(self.cfg.policy.seed, self.cfg.seed, self.turn)
        if kind in (SNAPKV, CHUNKKV):
            ctx.observation = self.tape.observation_for(cand_origins, self.cfg.policy.obs_window)
        elif kind == H2O:
            ctx.cumulative_attention = self.tape.cumulative_for(cand_origins)
        elif kind == EXPECTED_ATTENTION:
            keys = np.concatenate([s.keys for s in segs], axis=1)  # [L, n, H, D]
            ctx.candidate_keys = keys.mean(axis=(0, 2))
            mu, cov = self.tape.query_stats_for(self.cfg.policy.obs_window, self.model.cfg.head_dim)
            ctx.query_mean, ctx.query_cov = mu, cov
        return ctx

    def _compress_for_turn(self) -> TurnRecord:
        pool = self.pool
        s_full = pool.original_total_len
        pre_len = total_len(pool)
        if self.cfg.strategy == FLOWKV and self.turn > 1:
            frozen = 0
            while frozen < len(pool.segments) and pool.segments[frozen].compression_count >= 1:
                frozen += 1
            for seg in pool.segments[frozen:]:
                if seg.compression_count != 0:
                    raise ConfigError("frozen segments must form a prefix of the pool")
            seg_range = (frozen, len(pool.segments))
            preserved = sum(len(s) for s in pool.segments[:frozen])
        else:
            seg_range = (0, len(pool.segments))
            preserved = 0
        if seg_range[0] == len(pool.segments):
            # Everything is frozen already (no fresh segments): nothing to do.
            seg_range = (0, 0)

        n_segs = seg_range[1] - seg_range[0]
        target = target_budget(s_full, self.cfg.budget)
        state = BudgetState(s_full=s_full, s_preserved=preserved, turn=self.turn)
        clamped = False
        if n_segs == 0:
            budget = 0
        else:
            try:
                budget = new_data_budget(state, self.cfg.budget, min_keep=n_segs)
            except BudgetExhausted:
                budget = n_segs
                clamped = True

        segs = pool.segments[seg_range[0] : seg_range[1]]
        n_cand = sum(len(s) for s in segs)
        record = TurnRecord(
            turn=self.turn,
            strategy=self.cfg.strategy,
            pre_compress_len=pre_len,
            post_compress_len=pre_len,
            local_keep_count=n_cand if n_cand else pre_len,
            local_retention=1.0,
            clamped=clamped,
            compressed=False,
            s_full=s_full,
            s_preserved=preserved,
            target=target,
        )
        if n_segs == 0 or budget >= n_cand:
            return record

        ctx = self._selection_context(seg_range)
        ranking = self.selector.ranking(ctx)
        spans, pos = [], 0
        for s in segs:
            spans.append((pos, pos + len(s)))
            pos += len(s)
        keep = select_with_floor(ranking, spans, budget)
        self.pool = compress_segments(pool, seg_range, keep)
        record.post_compress_len = total_len(self.pool)
        record.local_keep_count = len(keep)
        record.local_retention = local_retention(len(keep), n_cand)
        record.compressed = True
        return record

    # -- turn loop ---------------------------------------------------------

    def begin_turn(self, query_ids) -> TurnRecord:
        """Compress (per strategy), then land the new query in the pool."""
        if not self.pool.segments:
            raise ConfigError("session not started (no system prompt)")
        self.turn += 1
        if self.cfg.strategy == FULL:
            record = TurnRecord(
                turn=self.turn,
                strategy=FULL,
                pre_compress_len=total_len(self.pool),
                post_compress_len=total_len(self.pool),
                local_keep_count=total_len(self.pool),
                local_retention=1.0,
                clamped=False,
                compressed=False,
                s_full=self.pool.original_total_len,
                s_preserved=0,
                target=self.pool.original_total_len,
            )
        else:
            record = self._compress_for_turn()

        qres = prefill(
            self.model, self.pool, query_ids, attn_mode="tail", tail_rows=self.tape.window
        )
        visible = np.concatenate([self.pool.flat_origins(), qres.origin_indices])
        self.pool = append_segment(
            self.pool, SegmentKind.query(self.turn), qres.keys, qres.values,
            qres.origin_indices, qres.token_ids,
        )
        self.tape.record_prefill(qres, visible)
        record.query_len = len(query_ids)
        self._pending_logits = qres.logits
        return record

    def response_stream(self) -> DecodeStream:
        if self._pending_logits is None:
            raise ConfigError("begin_turn must run before decoding a response")
        self._decode_base_origins = self.pool.flat_origins()
        return DecodeStream(
            self.model,
            self.pool,
            self.cfg.max_response_tokens,
            eos_id=self.cfg.eos_id,
            first_logits=self._pending_logits,
        )

    def finish_turn(self, record: TurnRecord, gen: GenerationResult) -> tuple[list[int], TurnRecord]:
        if gen.token_ids:
            self.pool = append_segment(
                self.pool, SegmentKind.response(self.turn), gen.keys, gen.values,
                gen.origin_indices, np.asarray(gen.token_ids, dtype=np.int64),
            )
            self.tape.record_generation(gen, self._decode_base_origins)
        record.response_len = len(gen.token_ids)
        record.ledger_snapshot = {k.label(): v for k, v in compression_ledger(self.pool).items()}
        self.records.append(record)
        self._pending_logits = None
        return gen.token_ids, record

    def run_turn(self, query_ids) -> tuple[list[int], TurnRecord]:
        record = self.begin_turn(query_ids)
        stream = self.response_stream()
        for _ in stream:
            pass
        return self.finish_turn(record, stream.result())


def run_turn_fullkv(session: Session, query_ids) -> tuple[list[int], TurnRecord]:
    """One turn with the complete history retained (no eviction)."""
    if session.cfg.strategy != FULL:
        raise ConfigError("session not configured for the full strategy")
    return session.run_turn(query_ids)


def run_turn_baseline(session: Session, query_ids) -> tuple[list[int], TurnRecord]:
    """One turn with the whole pool re-compressed before the query lands."""
    if session.cfg.strategy != BASELINE:
        raise ConfigError("session not configured for the baseline strategy")
    return session.run_turn(query_ids)


def run_turn_flowkv(session: Session, query_ids) -> tuple[list[int], TurnRecord]:
    """One turn compressing only the previous turn's fresh segments."""
    if session.cfg.strategy != FLOWKV:
        raise ConfigError("session not configured for the flowkv strategy")
    return session.run_turn(query_ids)
