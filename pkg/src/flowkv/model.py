"""Deterministic toy decoder-only transformer.

Small enough to run thousands of multi-turn sessions on CPU, but real enough
that policies and turn strategies operate on genuine keys, values, softmax
attention rows, and greedy token outputs. Weights are random (never trained);
everything downstream relies only on determinism, shapes, and contrastive
behavior between cache strategies.

Positions are rotary and derive from each token's ``origin_index`` in the
original conversation stream, so evicting part of the cache never re-indexes
the survivors and cached vectors stay valid verbatim.

Weight initialization uses a counter-based splitmix64 stream so any
implementation can reproduce it exactly:

    z = (seed + (i + 1) * 0x9E3779B97F4B1C15) mod 2^64
    z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9  (mod 2^64)
    z ^= z >> 27;  z *= 0x94D049BB133111EB  (mod 2^64)
    z ^= z >> 31
    u_i = (z >> 11) / 2^53          # uniform in [0, 1)
    w_i = (2 * u_i - 1) * 0.1       # weight in [-0.1, 0.1]

where ``i`` counts consecutively over all parameters in documented order:
embedding, then per layer wq, wk, wv, wo, w1, w2, then the output head.
Matrices are filled row-major.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, SeqOverflow
from .pool import CachePool, Segment, TokenKV, total_len

SPLITMIX_GAMMA = np.uint64(0x9E3779B97F4B1C15)
_MIX_1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX_2 = np.uint64(0x94D049BB133111EB)
RMS_EPS = 1e-6
ROTARY_BASE = 10000.0
WEIGHT_SCALE = 0.1

MAGIC = b"TDKV"
DUMP_VERSION = 1


def splitmix64(values: np.ndarray) -> np.ndarray:
    """Vectorized splitmix64 finalizer over uint64 inputs."""
    z = np.asarray(values, dtype=np.uint64).copy()
    with np.errstate(over="ignore"):
        z ^= z >> np.uint64(30)
        z *= _MIX_1
        z ^= z >> np.uint64(27)
        z *= _MIX_2
        z ^= z >> np.uint64(31)
    return z


def counter_uniform(seed: int, start: int, count: int) -> np.ndarray:
    """Uniform [0,1) floats for counter positions [start, start+count)."""
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = splitmix64(np.uint64(seed) + idx * SPLITMIX_GAMMA)
    return (z >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def mix_seeds(*parts: int) -> int:
    """Fold integers into one 63-bit seed, order-sensitive."""
    acc = np.uint64(0)
    with np.errstate(over="ignore"):
        for p in parts:
            acc = splitmix64(np.array([acc + np.uint64(p & 0xFFFFFFFFFFFFFFFF) + SPLITMIX_GAMMA]))[0]
    return int(acc & np.uint64(0x7FFFFFFFFFFFFFFF))


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 256
    layers: int = 2
    heads: int = 2
    head_dim: int = 8
    ffn_mult: int = 4
    max_seq: int = 512
    seed: int = 0
    width: Optional[int] = None  # derived heads*head_dim unless given

    def __post_init__(self):
        for name in ("vocab", "layers", "heads", "head_dim", "ffn_mult", "max_seq"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.head_dim % 2 != 0:
            raise ConfigError("head_dim must be even for rotary pairs")
        if self.width is not None and self.width != self.heads * self.head_dim:
            raise ConfigError(
                f"width {self.width} != heads*head_dim = {self.heads * self.head_dim}"
            )

    @property
    def model_width(self) -> int:
        return self.heads * self.head_dim


@dataclass(frozen=True)
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


@dataclass(frozen=True)
class Model:
    cfg: ModelConfig
    embed: np.ndarray                 # [vocab, width]
    layers: tuple[LayerWeights, ...]
    wout: np.ndarray                  # [width, vocab]

    @property
    def param_count(self) -> int:
        n = self.embed.size + self.wout.size
        for lw in self.layers:
            n += lw.wq.size + lw.wk.size + lw.wv.size + lw.wo.size + lw.w1.size + lw.w2.size
        return n


def init_model(cfg: ModelConfig) -> Model:
    """Fill all weight tensors from the counter PRNG stream."""
    w = cfg.model_width
    offset = 0

    def draw(shape) -> np.ndarray:
        nonlocal offset
        count = int(np.prod(shape))
        u = counter_uniform(cfg.seed, offset, count)
        offset += count
        return ((2.0 * u - 1.0) * WEIGHT_SCALE).reshape(shape)

    embed = draw((cfg.vocab, w))
    layer_weights = []
    for _ in range(cfg.layers):
        layer_weights.append(
            LayerWeights(
                wq=draw((w, w)),
                wk=draw((w, w)),
                wv=draw((w, w)),
                wo=draw((w, w)),
                w1=draw((w, w * cfg.ffn_mult)),
                w2=draw((w * cfg.ffn_mult, w)),
            )
        )
    wout = draw((w, cfg.vocab))
    return Model(cfg=cfg, embed=embed, layers=tuple(layer_weights), wout=wout)


def params_flat(model: Model) -> np.ndarray:
    """All parameters concatenated in initialization order."""
    parts = [model.embed.ravel()]
    for lw in model.layers:
        parts.extend([lw.wq.ravel(), lw.wk.ravel(), lw.wv.ravel(),
                      lw.wo.ravel(), lw.w1.ravel(), lw.w2.ravel()])
    parts.append(model.wout.ravel())
    return np.concatenate(parts)


def dump_weights(model: Model, path) -> None:
    """Write weights as float32 LE with a 16-byte {magic, version, count} header."""
    import struct

    flat = params_flat(model).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", DUMP_VERSION))
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.tobytes())


def load_weights(path) -> np.ndarray:
    import struct

    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ConfigError(f"bad weight file magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != DUMP_VERSION:
            raise ConfigError(f"unsupported weight dump version {version}")
        (count,) = struct.unpack("<Q", fh.read(8))
        data = np.frombuffer(fh.read(count * 4), dtype="<f4")
    if data.size != count:
        raise ConfigError("truncated weight dump")
    return data.astype(np.float64)


# --- forward pass -------------------------------------------------------------


def rms_norm(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + RMS_EPS)


def rotary_tables(origins: np.ndarray, head_dim: int):
    half = head_dim // 2
    theta = ROTARY_BASE ** (-2.0 * np.arange(half) / head_dim)
    angles = np.asarray(origins, dtype=np.float64)[:, None] * theta[None, :]
    return np.cos(angles), np.sin(angles)


def apply_rotary(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate [m, heads, head_dim] (or [heads, head_dim] with 1-row tables)."""
    half = x.shape[-1] // 2
    if x.ndim == 2:
        c, s = cos[0][None, :], sin[0][None, :]
    else:
        c, s = cos[:, None, :], sin[:, None, :]
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * c - x2 * s, x1 * s + x2 * c], axis=-1)


@dataclass
class PrefillResult:
    """Output of one prefill: new KV material plus attention signals."""

    keys: np.ndarray          # [layers, m, heads, head_dim], post-rotary
    values: np.ndarray        # [layers, m, heads, head_dim]
    origin_indices: np.ndarray
    token_ids: np.ndarray
    logits: np.ndarray        # final position, [vocab]
    query_obs: np.ndarray     # [m, head_dim], layer/head-averaged rotated queries
    attn_full: Optional[np.ndarray] = None   # [layers, heads, m, n_total]
    attn_mean: Optional[np.ndarray] = None   # [m, n_total], mean over layers+heads
    attn_tail: Optional[np.ndarray] = None   # [tail, n_total]
    attn_colsums: Optional[np.ndarray] = None  # [n_total], col sums of mean rows

    @property
    def tokens(self) -> list[TokenKV]:
        return [
            TokenKV(
                key=self.keys[:, i],
                value=self.values[:, i],
                origin_index=int(self.origin_indices[i]),
                token_id=int(self.token_ids[i]),
            )
            for i in range(self.keys.shape[1])
        ]


def prefill(
    model: Model,
    pool: CachePool,
    token_ids: Sequence[int],
    origin_start: Optional[int] = None,
    attn_mode: str = "full",
    tail_rows: int = 0,
    row_block: int = 512,
) -> PrefillResult:
    """Run new tokens causally over the pool, returning their KV and attention.

    attn_mode selects what attention is materialized: "full" keeps every
    (layer, head) row and is quadratic in memory (fine at test scale), "mean"
    keeps layer/head-averaged rows, "tail" keeps only the averaged rows of the
    last ``tail_rows`` tokens plus per-key column sums (constant memory,
    used by the session engine). Softmax rows sum to 1 over visible keys;
    evicted tokens are simply absent from the key axis.
    """
    cfg = model.cfg
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("token_ids must be a non-empty 1-D sequence")
    if np.any(ids < 0) or np.any(ids >= cfg.vocab):
        raise ConfigError("token id out of vocabulary")
    m = ids.size
    n_past = total_len(pool)
    n_tot = n_past + m
    if n_tot > cfg.max_seq:
        raise SeqOverflow(f"{n_tot} tokens exceed max_seq={cfg.max_seq}")
    if attn_mode not in ("full", "mean", "tail"):
        raise ValueError(f"unknown attn_mode {attn_mode!r}")

    start = pool.original_total_len if origin_start is None else origin_start
    origins = start + np.arange(m, dtype=np.int64)
    cos, sin = rotary_tables(origins, cfg.head_dim)

    past_k = pool.flat_keys()
    past_v = pool.flat_values()

    lh = cfg.layers * cfg.heads
    x = model.embed[ids]
    new_k = np.empty((cfg.layers, m, cfg.heads, cfg.head_dim))
    new_v = np.empty_like(new_k)
    q_sum = np.zeros((m, cfg.head_dim))

    attn_full = attn_mean = attn_tail = attn_colsums = None
    if attn_mode == "full":
        attn_full = np.zeros((cfg.layers, cfg.heads, m, n_tot))
    elif attn_mode == "mean":
        attn_mean = np.zeros((m, n_tot))
    else:
        tail = min(tail_rows, m)
        attn_tail = np.zeros((tail, n_tot))
        attn_colsums = np.zeros(n_tot)

    for l, lw in enumerate(model.layers):
        h = rms_norm(x)
        q = apply_rotary((h @ lw.wq).reshape(m, cfg.heads, cfg.head_dim), cos, sin)
        k = apply_rotary((h @ lw.wk).reshape(m, cfg.heads, cfg.head_dim), cos, sin)
        v = (h @ lw.wv).reshape(m, cfg.heads, cfg.head_dim)
        new_k[l], new_v[l] = k, v
        q_sum += q.sum(axis=1)

        keys_all = np.concatenate([past_k[l], k], axis=0)
        vals_all = np.concatenate([past_v[l], v], axis=0)

        ctx = np.empty((m, cfg.heads, cfg.head_dim))
        for c0 in range(0, m, row_block):
            c1 = min(m, c0 + row_block)
            n_vis = n_past + c1
            ctx_c, probs_c = kernels.attn_block(
                q[c0:c1], keys_all[:n_vis], vals_all[:n_vis], n_past + c0
            )
            ctx[c0:c1] = ctx_c
            if attn_mode == "full":
                attn_full[l, :, c0:c1, :n_vis] = probs_c
            elif attn_mode == "mean":
                attn_mean[c0:c1, :n_vis] += probs_c.sum(axis=0)
            else:
                attn_colsums[:n_vis] += probs_c.sum(axis=(0, 1))
                tail_start = m - attn_tail.shape[0]
                t0 = max(c0, tail_start)
                if t0 < c1:
                    attn_tail[t0 - tail_start : c1 - tail_start, :n_vis] += probs_c[
                        :, t0 - c0 :, :
                    ].sum(axis=0)

        x = x + ctx.reshape(m, cfg.model_width) @ lw.wo
        f = rms_norm(x)
        x = x + np.maximum(f @ lw.w1, 0.0) @ lw.w2

    if attn_mode == "mean":
        attn_mean /= lh
    elif attn_mode == "tail":
        attn_tail /= lh
        attn_colsums /= lh

    logits = (rms_norm(x[-1:]) @ model.wout)[0]
    return PrefillResult(
        keys=new_k,
        values=new_v,
        origin_indices=origins,
        token_ids=ids,
        logits=logits,
        query_obs=q_sum / lh,
        attn_full=attn_full,
        attn_mean=attn_mean,
        attn_tail=attn_tail,
        attn_colsums=attn_colsums,
    )


@dataclass
class DecodeState:
    """Live view of a decode loop: context size and the last logits."""

    pool: CachePool
    position: int            # visible KV entries (pool + generated so far)
    last_logits: np.ndarray


@dataclass
class GenerationResult:
    token_ids: list[int]
    keys: np.ndarray          # [layers, g, heads, head_dim]
    values: np.ndarray
    origin_indices: np.ndarray
    query_obs: np.ndarray     # [g, head_dim]
    step_rows: list[np.ndarray]  # per step, layer/head-mean attention over visible keys
    state: DecodeState


def _recover_last_logits(model: Model, pool: CachePool) -> np.ndarray:
    # Re-run the last pool token over its predecessors; determinism makes
    # its recomputed KV match the cached copy, recovering its logits.
    last_seg = pool.segments[-1]
    if len(last_seg) == 1:
        head_segments = pool.segments[:-1]
    else:
        head_segments = pool.segments[:-1] + (
            Segment(
                kind=last_seg.kind,
                keys=last_seg.keys[:, :-1],
                values=last_seg.values[:, :-1],
                origin_indices=last_seg.origin_indices[:-1],
                token_ids=last_seg.token_ids[:-1],
                compression_count=last_seg.compression_count,
                original_len=last_seg.original_len - 1,
            ),
        )
    shrunk = CachePool(pool.layers, pool.heads, pool.head_dim, head_segments)
    redo = prefill(
        model,
        shrunk,
        [int(last_seg.token_ids[-1])],
        origin_start=int(last_seg.origin_indices[-1]),
        attn_mode="mean",
    )
    return redo.logits


class DecodeStream:
    """Greedy decode loop, consumable one token at a time.

    Iterating yields token ids; ``result()`` packages the accumulated KV
    material, query observations, and attention rows once iteration stops.
    The first emitted token is the argmax of ``first_logits`` (normally the
    logits of the preceding prefill); without them the last pool token is
    re-run to recover its logits.
    """

    def __init__(
        self,
        model: Model,
        pool: CachePool,
        max_tokens: int,
        eos_id: Optional[int] = None,
        first_logits: Optional[np.ndarray] = None,
    ):
        cfg = model.cfg
        n0 = total_len(pool)
        if n0 == 0:
            raise ValueError("generation requires a non-empty pool")
        if first_logits is None:
            first_logits = _recover_last_logits(model, pool)
        self.model = model
        self.pool = pool
        self.max_tokens = max_tokens
        self.eos_id = eos_id
        self.state = DecodeState(pool=pool, position=n0, last_logits=first_logits)
        self._n0 = n0
        self._n_vis = n0
        self._origin_next = pool.original_total_len
        self._out_ids: list[int] = []
        self._rows: list[np.ndarray] = []
        self._q_obs: list[np.ndarray] = []
        self._done = max_tokens == 0
        if not self._done:
            cap = n0 + max_tokens
            self._buf_k = np.empty((cfg.layers, cap, cfg.heads, cfg.head_dim))
            self._buf_v = np.empty_like(self._buf_k)
            self._buf_k[:, :n0] = pool.flat_keys()
            self._buf_v[:, :n0] = pool.flat_values()

    def __iter__(self):
        while True:
            tid = self.step()
            if tid is None:
                return
            yield tid

    def step(self) -> Optional[int]:
        if self._done:
            return None
        cfg = self.model.cfg
        if self._n_vis + 1 > cfg.max_seq:
            raise SeqOverflow(f"decode context would exceed max_seq={cfg.max_seq}")
        tid = int(np.argmax(self.state.last_logits))
        cos, sin = rotary_tables(np.array([self._origin_next]), cfg.head_dim)
        lh = cfg.layers * cfg.heads
        n_vis = self._n_vis

        x = self.model.embed[tid]
        row_sum = np.zeros(n_vis + 1)
        q_sum = np.zeros(cfg.head_dim)
        for l, lw in enumerate(self.model.layers):
            h = rms_norm(x)
            q = apply_rotary((h @ lw.wq).reshape(cfg.heads, cfg.head_dim), cos, sin)
            k = apply_rotary((h @ lw.wk).reshape(cfg.heads, cfg.head_dim), cos, sin)
            v = (h @ lw.wv).reshape(cfg.heads, cfg.head_dim)
            self._buf_k[l, n_vis] = k
            self._buf_v[l, n_vis] = v
            ctx, probs = kernels.attn_step(
                q, self._buf_k[l, : n_vis + 1], self._buf_v[l, : n_vis + 1]
            )
            x = x + ctx.reshape(cfg.model_width) @ lw.wo
            f = rms_norm(x)
            x = x + np.maximum(f @ lw.w1, 0.0) @ lw.w2
            row_sum += probs.sum(axis=0)
            q_sum += q.sum(axis=0)

        self.state.last_logits = rms_norm(x) @ self.model.wout
        self._out_ids.append(tid)
        self._rows.append(row_sum / lh)
        self._q_obs.append(q_sum / lh)
        self._origin_next += 1
        self._n_vis += 1
        self.state.position = self._n_vis
        if len(self._out_ids) >= self.max_tokens:
            self._done = True
        if self.eos_id is not None and tid == self.eos_id:
            self._done = True
        return tid

    def result(self) -> GenerationResult:
        cfg = self.model.cfg
        g = len(self._out_ids)
        start = self.pool.original_total_len
        return GenerationResult(
            token_ids=list(self._out_ids),
            keys=self._buf_k[:, self._n0 : self._n0 + g].copy()
            if g
            else np.empty((cfg.layers, 0, cfg.heads, cfg.head_dim)),
            values=self._buf_v[:, self._n0 : self._n0 + g].copy()
            if g
            else np.empty((cfg.layers, 0, cfg.heads, cfg.head_dim)),
            origin_indices=np.arange(start, start + g, dtype=np.int64),
            query_obs=np.stack(self._q_obs) if g else np.empty((0, cfg.head_dim)),
            step_rows=list(self._rows),
            state=self.state,
        )


def generate(
    model: Model,
    pool: CachePool,
    max_tokens: int,
    eos_id: Optional[int] = None,
    first_logits: Optional[np.ndarray] = None,
) -> GenerationResult:
    """Greedy decoding from the pool; deterministic given weights and pool.

    Stops at ``eos_id`` (emitted and included) or after ``max_tokens``.
    """
    stream = DecodeStream(model, pool, max_tokens, eos_id=eos_id, first_logits=first_logits)
    for _ in stream:
        pass
    return stream.result()
