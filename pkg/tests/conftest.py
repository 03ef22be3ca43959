"""Shared helpers: deterministic K/V content and dense packing."""

from __future__ import annotations

import numpy as np
import pytest

from tileserve.kv_cache import KvView, RadixKvCache


def kv_for_token(token: int, position: int, kv_heads: int, head_size: int) -> tuple[np.ndarray, np.ndarray]:
    """K/V rows that are a pure function of (token, position).

    Mirrors a deterministic model: identical prefixes produce
    identical cached values, so prefix reuse is observationally
    equivalent to recomputation.
    """
    rng = np.random.default_rng((token + 1) * 100003 + position)
    k = rng.normal(size=(kv_heads, head_size)).astype(np.float32)
    v = rng.normal(size=(kv_heads, head_size)).astype(np.float32)
    return k, v


def kv_rows(tokens: list[int], start_pos: int, kv_heads: int, head_size: int) -> tuple[np.ndarray, np.ndarray]:
    if not tokens:
        empty = np.zeros((0, kv_heads, head_size), dtype=np.float32)
        return empty, empty.copy()
    ks, vs = [], []
    for i, tok in enumerate(tokens):
        k, v = kv_for_token(tok, start_pos + i, kv_heads, head_size)
        ks.append(k)
        vs.append(v)
    return np.stack(ks), np.stack(vs)


def pack_kv_view(k: np.ndarray, v: np.ndarray, block_size: int) -> KvView:
    """Pack dense [tokens, kv_heads, head_size] K/V into a block view."""
    tokens = k.shape[0]
    n_blocks = -(-tokens // block_size) if tokens else 0
    keys = np.zeros((max(1, n_blocks), block_size, k.shape[1], k.shape[2]), dtype=np.float32)
    values = np.zeros_like(keys)
    for b in range(n_blocks):
        lo = b * block_size
        hi = min(lo + block_size, tokens)
        keys[b, : hi - lo] = k[lo:hi]
        values[b, : hi - lo] = v[lo:hi]
    return KvView(
        keys=keys,
        values=values,
        block_ids=tuple(range(n_blocks)),
        total_tokens=tokens,
        block_size=block_size,
    )


@pytest.fixture
def small_cache() -> RadixKvCache:
    return RadixKvCache(block_size=2, pool_blocks=32, cache_cap_blocks=16, kv_heads=1, head_size=4)
