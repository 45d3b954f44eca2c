"""Token-selection policies.

Every policy reduces to a deterministic priority ranking over the candidate
tokens of a compression range; selecting under a budget keeps the first
``keep_count`` entries of that ranking, reported as a sorted index list.
Ranking-based selection makes every policy budget-monotone (the kept set at
budget k is contained in the kept set at budget k+1), which the turn
strategies exploit when they enforce the one-token-per-segment floor.

Ties are always broken toward the lower candidate index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import BudgetTooSmall, ConfigError, NonPSDCovariance, ShapeMismatch

ROW_SUM_TOL = 1e-6
SYMMETRY_TOL = 1e-8
PSD_TOL = 1e-8

STREAMING = "streaming"
SNAPKV = "snapkv"
CHUNKKV = "chunkkv"
EXPECTED_ATTENTION = "expected_attention"
H2O = "h2o"
RANDOM = "random"

POLICY_KINDS = (STREAMING, SNAPKV, CHUNKKV, EXPECTED_ATTENTION, H2O, RANDOM)


@dataclass(frozen=True)
class AttentionObservation:
    """Post-softmax attention rows used to score candidates.

    ``scores`` is [observer_tokens x candidate_tokens], each row a probability
    distribution over the candidates (averaged over layers and heads upstream).
    ``observer_span`` gives how many trailing candidates are the observers
    themselves; those are force-kept by window-based policies. Zero means the
    observers sit outside the candidate range.
    """

    scores: np.ndarray
    observer_span: int = 0

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 2 or s.shape[0] < 1 or s.shape[1] < 1:
            raise ShapeMismatch(f"observation must be 2-D non-empty, got {s.shape}")
        if np.any(s < 0):
            raise ShapeMismatch("attention scores must be non-negative")
        row_sums = s.sum(axis=1)
        if np.any(np.abs(row_sums - 1.0) > ROW_SUM_TOL):
            worst = float(np.max(np.abs(row_sums - 1.0)))
            raise ShapeMismatch(f"observation rows must sum to 1 (off by {worst:.2e})")
        if not (0 <= self.observer_span <= s.shape[1]):
            raise ShapeMismatch("observer_span out of candidate range")
        object.__setattr__(self, "scores", s)

    @property
    def n_observers(self) -> int:
        return int(self.scores.shape[0])

    @property
    def n_candidates(self) -> int:
        return int(self.scores.shape[1])

    def mean_scores(self) -> np.ndarray:
        """Per-candidate mean attention over observer rows."""
        return self.scores.mean(axis=0)


@dataclass(frozen=True)
class KeepBudget:
    """How many candidate tokens survive one compression call."""

    keep_count: int

    def __post_init__(self):
        if self.keep_count < 1:
            raise BudgetTooSmall(f"keep_count must be >= 1, got {self.keep_count}")


def _as_keep_count(budget, candidates_len: int) -> int:
    k = budget.keep_count if isinstance(budget, KeepBudget) else int(budget)
    if k < 1:
        raise BudgetTooSmall(f"keep_count must be >= 1, got {k}")
    if k > candidates_len:
        raise ValueError(f"budget {k} exceeds {candidates_len} candidates")
    return k


@dataclass(frozen=True)
class PolicyConfig:
    """Hyperparameters for one selection policy."""

    policy_kind: str = SNAPKV
    sink_count: int = 4          # streaming: always-kept leading tokens
    window_count: int = 0        # streaming: reserved; the budget fixes the window
    obs_window: int = 32         # snapkv/chunkkv/expected_attention: trailing observers
    pool_kernel: int = 5         # snapkv: 1-D max-pool width, odd
    chunk_size: int = 4          # chunkkv
    seed: int = 0                # random

    def __post_init__(self):
        if self.policy_kind not in POLICY_KINDS:
            raise ConfigError(f"unknown policy kind {self.policy_kind!r}")
        if self.sink_count < 0 or self.window_count < 0:
            raise ConfigError("sink_count/window_count must be non-negative")
        if self.obs_window < 1:
            raise ConfigError("obs_window must be positive")
        if self.pool_kernel < 1 or self.pool_kernel % 2 == 0:
            raise ConfigError("pool_kernel must be a positive odd integer")
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be positive")


def _top_k_order(scores: np.ndarray) -> np.ndarray:
    """Indices sorted by descending score, ties toward the lower index."""
    n = scores.shape[0]
    return np.lexsort((np.arange(n), -scores))


# --- rankings ---------------------------------------------------------------
# Each returns a permutation of range(n); select(k) == sorted(ranking[:k]).


def streaming_ranking(candidates_len: int, cfg: PolicyConfig) -> np.ndarray:
    n = candidates_len
    s = min(cfg.sink_count, n)
    sinks = np.arange(s)
    window = np.arange(n - 1, s - 1, -1)  # recency first, growing leftward
    return np.concatenate([sinks, window])


def pooled_snap_scores(obs: AttentionObservation, cfg: PolicyConfig) -> np.ndarray:
    """Column-mean attention run through an edge-clamped 1-D max pool."""
    mean = obs.mean_scores()
    n = mean.shape[0]
    half = cfg.pool_kernel // 2
    if half == 0:
        return mean
    pooled = np.empty(n)
    for j in range(n):
        lo = max(0, j - half)
        hi = min(n, j + half + 1)
        pooled[j] = mean[lo:hi].max()
    return pooled


def snapkv_ranking(obs: AttentionObservation, cfg: PolicyConfig) -> np.ndarray:
    n = obs.n_candidates
    pooled = pooled_snap_scores(obs, cfg)
    span = obs.observer_span
    # Observers inside the range are force-kept, most recent first when the
    # budget cannot even cover the window.
    forced = np.arange(n - 1, n - span - 1, -1)
    rest_order = _top_k_order(pooled)
    rest = rest_order[rest_order < n - span]
    return np.concatenate([forced, rest]).astype(np.int64)


def chunkkv_ranking(obs: AttentionObservation, cfg: PolicyConfig) -> np.ndarray:
    mean = obs.mean_scores()
    n = mean.shape[0]
    size = cfg.chunk_size
    n_chunks = (n + size - 1) // size
    chunk_scores = np.array([mean[c * size : (c + 1) * size].mean() for c in range(n_chunks)])
    chunk_order = _top_k_order(chunk_scores)
    ranking = []
    for c in chunk_order:
        members = np.arange(c * size, min((c + 1) * size, n))
        inner = _top_k_order(mean[members])
        ranking.extend(members[inner])
    return np.asarray(ranking, dtype=np.int64)


def expected_attention_scores(candidate_keys: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Log expected exponential attention logit under a Gaussian query model."""
    keys = np.asarray(candidate_keys, dtype=np.float64)
    if keys.ndim != 2:
        raise ShapeMismatch(f"candidate keys must be [n, d], got {keys.shape}")
    d = keys.shape[1]
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    if mean.shape != (d,) or cov.shape != (d, d):
        raise ShapeMismatch("query stats do not match key dimension")
    if np.max(np.abs(cov - cov.T)) > SYMMETRY_TOL:
        raise NonPSDCovariance("covariance is not symmetric")
    eigs = np.linalg.eigvalsh((cov + cov.T) / 2.0)
    if eigs.min() < -PSD_TOL:
        raise NonPSDCovariance(f"covariance has negative eigenvalue {eigs.min():.3e}")
    lin = keys @ mean / np.sqrt(d)
    quad = np.einsum("nd,de,ne->n", keys, cov, keys) / (2.0 * d)
    return lin + quad


def expected_attention_ranking(candidate_keys, mean, cov) -> np.ndarray:
    return _top_k_order(expected_attention_scores(candidate_keys, mean, cov))


def h2o_ranking(cumulative: np.ndarray) -> np.ndarray:
    cum = np.asarray(cumulative, dtype=np.float64)
    if cum.ndim != 1:
        raise ShapeMismatch("cumulative scores must be a vector")
    if np.any(cum < 0):
        raise ShapeMismatch("cumulative scores must be non-negative")
    return _top_k_order(cum)


def random_ranking(candidates_len: int, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.permutation(candidates_len).astype(np.int64)


# --- spec-level selectors ----------------------------------------------------


def _finish(ranking: np.ndarray, k: int) -> list[int]:
    return sorted(int(i) for i in ranking[:k])


def select_streaming(candidates_len: int, budget, cfg: PolicyConfig) -> list[int]:
    """First ``sink_count`` tokens plus the most recent remainder of the budget."""
    k = _as_keep_count(budget, candidates_len)
    return _finish(streaming_ranking(candidates_len, cfg), k)


def select_snapkv(obs: AttentionObservation, budget, cfg: PolicyConfig) -> list[int]:
    """Top candidates by max-pooled mean trailing-window attention."""
    k = _as_keep_count(budget, obs.n_candidates)
    return _finish(snapkv_ranking(obs, cfg), k)


def select_chunkkv(obs: AttentionObservation, budget, cfg: PolicyConfig) -> list[int]:
    """Whole chunks by descending mean score, topped up from the next-best chunk."""
    k = _as_keep_count(budget, obs.n_candidates)
    return _finish(chunkkv_ranking(obs, cfg), k)


def select_expected_attention(candidate_keys, query_stats, budget) -> list[int]:
    """Top keys by anticipated attention from a Gaussian model of future queries."""
    mean, cov = query_stats
    keys = np.asarray(candidate_keys, dtype=np.float64)
    k = _as_keep_count(budget, keys.shape[0])
    return _finish(expected_attention_ranking(keys, mean, cov), k)


def select_h2o(cumulative, budget) -> list[int]:
    """Top candidates by cumulative attention received so far."""
    cum = np.asarray(cumulative, dtype=np.float64)
    k = _as_keep_count(budget, cum.shape[0])
    return _finish(h2o_ranking(cum), k)


def select_random(candidates_len: int, budget, cfg: PolicyConfig) -> list[int]:
    """Uniform sample without replacement, fixed by cfg.seed."""
    k = _as_keep_count(budget, candidates_len)
    return _finish(random_ranking(candidates_len, cfg.seed), k)


# --- strategy-facing wrapper --------------------------------------------------


@dataclass
class SelectionContext:
    """Signals available to a policy at one compression instant.

    Only the fields the configured policy needs have to be populated.
    """

    candidates_len: int
    observation: Optional[AttentionObservation] = None
    cumulative_attention: Optional[np.ndarray] = None
    candidate_keys: Optional[np.ndarray] = None
    query_mean: Optional[np.ndarray] = None
    query_cov: Optional[np.ndarray] = None
    seed: int = 0


class TokenSelector:
    """Binds a PolicyConfig to the matching ranking function."""

    def __init__(self, cfg: PolicyConfig):
        self.cfg = cfg

    def ranking(self, ctx: SelectionContext) -> np.ndarray:
        kind = self.cfg.policy_kind
        if kind == STREAMING:
            return streaming_ranking(ctx.candidates_len, self.cfg)
        if kind == RANDOM:
            return random_ranking(ctx.candidates_len, ctx.seed)
        if kind == SNAPKV:
            return snapkv_ranking(self._obs(ctx), self.cfg)
        if kind == CHUNKKV:
            return chunkkv_ranking(self._obs(ctx), self.cfg)
        if kind == H2O:
            if ctx.cumulative_attention is None:
                raise ShapeMismatch("h2o policy requires cumulative attention")
            if ctx.cumulative_attention.shape[0] != ctx.candidates_len:
                raise ShapeMismatch("cumulative attention length mismatch")
            return h2o_ranking(ctx.cumulative_attention)
        if ctx.candidate_keys is None or ctx.query_mean is None or ctx.query_cov is None:
            raise ShapeMismatch("expected_attention policy requires keys and query stats")
        return expected_attention_ranking(ctx.candidate_keys, ctx.query_mean, ctx.query_cov)

    def select(self, ctx: SelectionContext, budget) -> list[int]:
        k = _as_keep_count(budget, ctx.candidates_len)
        return _finish(self.ranking(ctx), k)

    def _obs(self, ctx: SelectionContext) -> AttentionObservation:
        if ctx.observation is None:
            raise ShapeMismatch(f"{self.cfg.policy_kind} policy requires an observation")
        if ctx.observation.n_candidates != ctx.candidates_len:
            raise ShapeMismatch("observation candidate axis mismatch")
        return ctx.observation
