"""Segmented KV-cache data model.

A cache pool is an ordered list of segments (system prompt, then
query/response pairs per turn). Each segment tracks which original tokens
survive and how many times it has been run through a compressor. Token
keys/values are stored contiguously per segment as float64 arrays of shape
``[layers, heads, n_tokens, head_dim]``; surviving vectors are never
altered by compression (pure eviction).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    EmptySelection,
    OrderViolation,
    RangeNotContiguous,
    ShapeMismatch,
)

SYSTEM = "system"
QUERY = "query"
RESPONSE = "response"


@dataclass(frozen=True)
class SegmentKind:
    """Identity of a cache segment: the system prompt or one turn's query/response.

    ``turn`` is 0 for the system prompt and >= 1 otherwise.
    """

    role: str
    turn: int = 0

    def __post_init__(self):
        if self.role not in (SYSTEM, QUERY, RESPONSE):
            raise ValueError(f"unknown segment role {self.role!r}")
        if self.role == SYSTEM and self.turn != 0:
            raise ValueError("system segment carries no turn index")
        if self.role != SYSTEM and self.turn < 1:
            raise ValueError(f"{self.role} segment requires turn >= 1")

    @staticmethod
    def system() -> "SegmentKind":
        return SegmentKind(SYSTEM, 0)

    @staticmethod
    def query(turn: int) -> "SegmentKind":
        return SegmentKind(QUERY, turn)

    @staticmethod
    def response(turn: int) -> "SegmentKind":
        return SegmentKind(RESPONSE, turn)

    def label(self) -> str:
        return SYSTEM if self.role == SYSTEM else f"{self.role[0]}{self.turn}"


@dataclass(frozen=True)
class TokenKV:
    """Per-token cache entry: key/value vectors plus provenance.

    ``key`` and ``value`` have shape [layers, heads, head_dim]. ``origin_index``
    is the token's position in the original, uncompressed conversation stream
    and never changes, no matter how much of the surrounding cache is evicted.
    """

    key: np.ndarray
    value: np.ndarray
    origin_index: int
    token_id: int


@dataclass(frozen=True)
class Segment:
    """One contiguous block of cached tokens with its compression ledger."""

    kind: SegmentKind
    keys: np.ndarray        # [layers, n, heads, head_dim]
    values: np.ndarray      # [layers, n, heads, head_dim]
    origin_indices: np.ndarray  # [n] int64, strictly increasing
    token_ids: np.ndarray       # [n] int64
    compression_count: int
    original_len: int

    def __post_init__(self):
        n = self.keys.shape[1]
        if n < 1:
            raise EmptySelection(f"segment {self.kind.label()} has no tokens")
        if n > self.original_len:
            raise ValueError("surviving tokens exceed original length")
        if self.compression_count == 0 and n != self.original_len:
            raise ValueError("uncompressed segment must hold all original tokens")
        if np.any(np.diff(self.origin_indices) <= 0):
            raise ValueError("origin indices must be strictly increasing")

    def __len__(self) -> int:
        return int(self.keys.shape[1])

    def token(self, i: int) -> TokenKV:
        return TokenKV(
            key=self.keys[:, i],
            value=self.values[:, i],
            origin_index=int(self.origin_indices[i]),
            token_id=int(self.token_ids[i]),
        )

    @property
    def tokens(self) -> list[TokenKV]:
        return [self.token(i) for i in range(len(self))]


def _expected_next_kinds(segments: Sequence[Segment]) -> list[SegmentKind]:
    if not segments:
        return [SegmentKind.system()]
    last = segments[-1].kind
    if last.role == SYSTEM:
        return [SegmentKind.query(1)]
    if last.role == QUERY:
        return [SegmentKind.response(last.turn)]
    return [SegmentKind.query(last.turn + 1)]


@dataclass(frozen=True)
class CachePool:
    """Ordered sequence of segments forming one session's KV cache."""

    layers: int
    heads: int
    head_dim: int
    segments: tuple[Segment, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if min(self.layers, self.heads, self.head_dim) < 1:
            raise ValueError("pool dims must be positive")

    def __len__(self) -> int:
        return total_len(self)

    def __iter__(self) -> Iterator[Segment]:
        return iter(self.segments)

    @property
    def original_total_len(self) -> int:
        """Token count the pool would have if nothing had ever been evicted."""
        return sum(s.original_len for s in self.segments)

    def flat_keys(self) -> np.ndarray:
        """Concatenated keys of all surviving tokens, [layers, total, heads, head_dim]."""
        if not self.segments:
            return np.zeros((self.layers, 0, self.heads, self.head_dim))
        return np.concatenate([s.keys for s in self.segments], axis=1)

    def flat_values(self) -> np.ndarray:
        if not self.segments:
            return np.zeros((self.layers, 0, self.heads, self.head_dim))
        return np.concatenate([s.values for s in self.segments], axis=1)

    def flat_origins(self) -> np.ndarray:
        if not self.segments:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([s.origin_indices for s in self.segments])

    def segment_bounds(self) -> list[tuple[int, int]]:
        """Flattened [start, end) token span of each segment."""
        out, pos = [], 0
        for s in self.segments:
            out.append((pos, pos + len(s)))
            pos += len(s)
        return out


def total_len(pool: CachePool) -> int:
    """Number of surviving tokens across all segments."""
    return sum(len(s) for s in pool.segments)


def _check_token_arrays(pool: CachePool, keys, values, origins, token_ids) -> None:
    expect = (pool.layers, origins.shape[0], pool.heads, pool.head_dim)
    if keys.shape != expect or values.shape != expect:
        raise ShapeMismatch(
            f"token arrays shaped {keys.shape}/{values.shape}, pool expects {expect}"
        )
    if origins.shape[0] == 0:
        raise ValueError("cannot append an empty segment")
    if token_ids.shape != origins.shape:
        raise ShapeMismatch("token id / origin length mismatch")


def append_segment(
    pool: CachePool,
    kind: SegmentKind,
    keys: np.ndarray,
    values: np.ndarray,
    origin_indices: np.ndarray,
    token_ids: np.ndarray,
) -> CachePool:
    """Append a fresh, uncompressed segment. Existing segments are reused as-is.

    Raises OrderViolation if ``kind`` is out of sequence and ShapeMismatch if
    the token arrays disagree with the pool dims.
    """
    origin_indices = np.asarray(origin_indices, dtype=np.int64)
    token_ids = np.asarray(token_ids, dtype=np.int64)
    _check_token_arrays(pool, keys, values, origin_indices, token_ids)
    allowed = _expected_next_kinds(pool.segments)
    if kind not in allowed:
        raise OrderViolation(
            f"cannot append {kind.label()} after "
            f"{pool.segments[-1].kind.label() if pool.segments else 'empty pool'}"
        )
    prior = pool.flat_origins()
    if prior.size and origin_indices[0] <= prior[-1]:
        raise OrderViolation("origin indices must keep increasing across the pool")
    seg = Segment(
        kind=kind,
        keys=np.ascontiguousarray(keys, dtype=np.float64),
        values=np.ascontiguousarray(values, dtype=np.float64),
        origin_indices=origin_indices,
        token_ids=token_ids,
        compression_count=0,
        original_len=int(origin_indices.shape[0]),
    )
    return CachePool(pool.layers, pool.heads, pool.head_dim, pool.segments + (seg,))


def append_tokens(pool: CachePool, kind: SegmentKind, tokens: Sequence[TokenKV]) -> CachePool:
    """append_segment convenience for a list of TokenKV entries."""
    if not tokens:
        raise ValueError("cannot append an empty segment")
    keys = np.stack([t.key for t in tokens], axis=1)
    values = np.stack([t.value for t in tokens], axis=1)
    origins = np.array([t.origin_index for t in tokens], dtype=np.int64)
    ids = np.array([t.token_id for t in tokens], dtype=np.int64)
    return append_segment(pool, kind, keys, values, origins, ids)


def compress_segments(
    pool: CachePool,
    seg_range: tuple[int, int],
    keep_indices: Iterable[int],
) -> CachePool:
    """Apply one eviction pass to segments [start, stop).

    ``keep_indices`` are positions within the flattened token range. Survivors
    keep their vectors and origin indices bit-for-bit; every segment the range
    touches has its compression count incremented by exactly one, even when
    all of its tokens survive. Each segment must retain at least one token.
    """
    start, stop = seg_range
    if not (0 <= start < stop <= len(pool.segments)):
        raise RangeNotContiguous(f"segment range [{start}, {stop}) out of bounds")
    keep = sorted(set(int(i) for i in keep_indices))
    if not keep:
        raise EmptySelection("keep_indices is empty")

    span = sum(len(pool.segments[i]) for i in range(start, stop))
    if keep[0] < 0 or keep[-1] >= span:
        raise ValueError(f"keep index out of range for span of {span} tokens")

    keep_arr = np.asarray(keep, dtype=np.int64)
    new_segments = list(pool.segments[:start])
    offset = 0
    for i in range(start, stop):
        seg = pool.segments[i]
        local = keep_arr[(keep_arr >= offset) & (keep_arr < offset + len(seg))] - offset
        if local.size == 0:
            raise EmptySelection(f"selection leaves segment {seg.kind.label()} empty")
        new_segments.append(
            Segment(
                kind=seg.kind,
                keys=seg.keys[:, local],
                values=seg.values[:, local],
                origin_indices=seg.origin_indices[local],
                token_ids=seg.token_ids[local],
                compression_count=seg.compression_count + 1,
                original_len=seg.original_len,
            )
        )
        offset += len(seg)
    new_segments.extend(pool.segments[stop:])
    return CachePool(pool.layers, pool.heads, pool.head_dim, tuple(new_segments))


def compression_ledger(pool: CachePool) -> dict[SegmentKind, int]:
    """Compression count per segment, keyed by segment kind."""
    return {s.kind: s.compression_count for s in pool.segments}


def snapshot(pool: CachePool, full_dump: bool = False) -> dict:
    """JSON-ready view of the pool. Key/value payloads only under full_dump."""
    segs = []
    for s in pool.segments:
        entry = {
            "kind": s.kind.role,
            "turn": s.kind.turn,
            "compression_count": s.compression_count,
            "original_len": s.original_len,
            "tokens": [
                {"origin_index": int(o), "token_id": int(t)}
                for o, t in zip(s.origin_indices, s.token_ids)
            ],
        }
        if full_dump:
            for i, tok in enumerate(entry["tokens"]):
                tok["key"] = s.keys[:, i].ravel().tolist()
                tok["value"] = s.values[:, i].ravel().tolist()
        segs.append(entry)
    return {
        "layers": pool.layers,
        "heads": pool.heads,
        "head_dim": pool.head_dim,
        "segments": segs,
    }
