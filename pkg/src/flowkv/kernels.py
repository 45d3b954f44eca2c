"""Attention kernels with a compiled fast path.

The single-token decode step is the hot kernel of the engine: a sweep run
executes it hundreds of thousands of times over small head dimensions, where
Python call overhead dominates. A Cython extension (``flowkv._kernels``)
implements that step; this module falls back to the numpy version when the
extension is unavailable or when ``FLOWKV_PURE_PYTHON=1`` is set.

Multi-token (block) attention stays on numpy in both modes: BLAS matmuls
already win there and the block path runs orders of magnitude less often.

Both step implementations agree to ~1e-15 relative, not bit-for-bit (numpy's
vectorized exp differs from libm by an ulp); all decision points downstream
operate on gaps far above that level.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from . import _kernels as _compiled
except ImportError:  # pragma: no cover - depends on build environment
    _compiled = None

_FORCE_PY = os.environ.get("FLOWKV_PURE_PYTHON", "") not in ("", "0")


def attn_step_py(q: np.ndarray, keys: np.ndarray, values: np.ndarray):
    """Single-query attention over one layer's cached keys.

    q: [heads, head_dim]; keys/values: [n, heads, head_dim].
    Returns (ctx [heads, head_dim], probs [heads, n]).
    """
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = np.einsum("nhd,hd->hn", keys, q) * scale
    scores -= scores.max(axis=1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=1, keepdims=True)
    ctx = np.einsum("hn,nhd->hd", probs, values)
    return ctx, probs


def attn_step_compiled(q: np.ndarray, keys: np.ndarray, values: np.ndarray):
    """Compiled twin of attn_step_py. Raises if the extension is missing."""
    if _compiled is None:
        raise RuntimeError("flowkv._kernels extension is not built")
    return _compiled.attn_step(q, keys, values)


if _compiled is not None and not _FORCE_PY:
    attn_step = attn_step_compiled
    BACKEND = "compiled"
else:
    attn_step = attn_step_py
    BACKEND = "python"


def backend_name() -> str:
    return BACKEND


def compiled_available() -> bool:
    return _compiled is not None


def attn_block(q: np.ndarray, keys: np.ndarray, values: np.ndarray, n_past: int):
    """Causal block attention for m new tokens over past + new keys.

    q: [m, heads, head_dim]; keys/values: [n_past + m, heads, head_dim];
    query row i sees keys [0, n_past + i]. Returns (ctx [m, heads, head_dim],
    probs [heads, m, n_past + m]) with zeros at masked positions.
    """
    m, h, d = q.shape
    n_tot = keys.shape[0]
    scale = 1.0 / np.sqrt(d)
    scores = np.einsum("mhd,nhd->hmn", q, keys) * scale
    visible = np.arange(n_tot)[None, :] <= (n_past + np.arange(m))[:, None]
    scores = np.where(visible[None, :, :], scores, -np.inf)
    scores -= scores.max(axis=2, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=2, keepdims=True)
    ctx = np.einsum("hmn,nhd->mhd", probs, values)
    return ctx, probs
