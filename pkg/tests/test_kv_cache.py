"""Radix K/V cache: prefix matching, copy-on-write, LRU eviction."""

from __future__ import annotations

import numpy as np
import pytest

from tileserve.kv_cache import PoolExhausted, RadixKvCache

from conftest import kv_rows

KV_HEADS = 1
HEAD = 4


def commit(cache: RadixKvCache, table, tokens: list[int], start_pos: int, **kw):
    k, v = kv_rows(tokens, start_pos, KV_HEADS, HEAD)
    return cache.commit_tokens(table, tokens, k, v, **kw)


def build_seq(cache: RadixKvCache, seq_id, tokens: list[int]):
    table = cache.start_sequence(seq_id, tokens)
    matched = table.total_tokens
    commit(cache, table, tokens[matched:], matched)
    return table, matched


def lcp_oracle(query: list[int], cached: list[list[int]]) -> int:
    """Brute force: longest common prefix between the query and any
    fully cached token path (block-complete prefixes only)."""
    best = 0
    for path in cached:
        n = 0
        for a, b in zip(query, path):
            if a != b:
                break
            n += 1
        best = max(best, n)
    return best


# ---------------------------------------------------------------------------
# match_prefix
# ---------------------------------------------------------------------------


class TestMatchPrefix:
    def test_empty_query(self, small_cache):
        m = small_cache.match_prefix([])
        assert m.matched_len == 0 and m.blocks == []

    def test_partial_block_match(self, small_cache):
        # Tree holds ABCD as two blocks; ABCE matches 3 tokens, the last
        # block is returned with one valid token.
        table, _ = build_seq(small_cache, "s0", [10, 11, 12, 13])
        m = small_cache.match_prefix([10, 11, 12, 99])
        assert m.matched_len == 3
        assert m.blocks == table.blocks[:2]
        small_cache.release_blocks(m)

    def test_full_match(self, small_cache):
        table, _ = build_seq(small_cache, "s0", [10, 11, 12, 13])
        m = small_cache.match_prefix([10, 11, 12, 13])
        assert m.matched_len == 4
        assert m.blocks == table.blocks
        small_cache.release_blocks(m)

    def test_match_pins_blocks(self, small_cache):
        build_seq(small_cache, "s0", [10, 11, 12, 13])
        m = small_cache.match_prefix([10, 11])
        bid = m.blocks[0]
        assert small_cache.ref_count[bid] == 2  # s0 plus the match
        small_cache.release_blocks(m)
        assert small_cache.ref_count[bid] == 1

    def test_matches_equal_brute_force_lcp(self):
        rng = np.random.default_rng(7)
        cache = RadixKvCache(block_size=2, pool_blocks=4096, cache_cap_blocks=4096, kv_heads=KV_HEADS, head_size=HEAD)
        cached_paths: list[list[int]] = []
        for i in range(60):
            tokens = rng.integers(0, 4, size=rng.integers(1, 12)).tolist()
            try:
                build_seq(cache, f"s{i}", tokens)
            except PoolExhausted:
                break
            # only block-complete prefixes are reachable in the tree
            cached_paths.append(tokens[: len(tokens) // 2 * 2])
        for _ in range(1000):
            query = rng.integers(0, 4, size=rng.integers(0, 14)).tolist()
            m = cache.match_prefix(query)
            assert m.matched_len == lcp_oracle(query, cached_paths)
            cache.release_blocks(m)


# ---------------------------------------------------------------------------
# commit_tokens
# ---------------------------------------------------------------------------


class TestCommit:
    def test_zero_tokens_identity(self, small_cache):
        table, _ = build_seq(small_cache, "s0", [1, 2, 3])
        blocks, total = list(table.blocks), table.total_tokens
        commit(small_cache, table, [], 3)
        assert table.blocks == blocks and table.total_tokens == total

    def test_block_arithmetic(self, small_cache):
        table = small_cache.start_sequence("s0", [5, 6, 7])
        commit(small_cache, table, [5, 6, 7], 0)
        assert len(table.blocks) == 2
        assert table.total_tokens == 3
        assert small_cache.token_count[table.blocks[0]] == 2
        assert small_cache.token_count[table.blocks[1]] == 1

    def test_cow_on_shared_partial_block(self, small_cache):
        # s0 caches ABCD; s1 matches ABC (half of the second block) and
        # appends one token: the old block must stay unchanged.
        t0, _ = build_seq(small_cache, "s0", [10, 11, 12, 13])
        shared = t0.blocks[1]
        before_k = small_cache.keys[shared].copy()
        t1 = small_cache.start_sequence("s1", [10, 11, 12, 99])
        assert t1.total_tokens == 3
        commit(small_cache, t1, [99], 3)
        assert t1.blocks[1] != shared
        assert small_cache.token_count[t1.blocks[1]] == 2
        np.testing.assert_array_equal(small_cache.keys[shared], before_k)

    def test_exclusive_block_appends_in_place(self, small_cache):
        table = small_cache.start_sequence("s0", [1, 2, 3])
        commit(small_cache, table, [1], 0)
        bid = table.blocks[-1]
        commit(small_cache, table, [2], 1)
        assert table.blocks[-1] == bid  # no copy for a private block

    def test_full_blocks_enter_tree(self, small_cache):
        build_seq(small_cache, "s0", [1, 2, 3, 4, 5])
        # two full blocks cached, the trailing single token is private
        assert small_cache.cached_block_count() == 2

    def test_uncacheable_commit_stays_out_of_tree(self, small_cache):
        table = small_cache.start_sequence("s0", [1, 2, 3, 4])
        commit(small_cache, table, [1, 2, 3, 4], 0, cacheable=False)
        assert small_cache.cached_block_count() == 0

    def test_pool_exhausted(self):
        cache = RadixKvCache(block_size=2, pool_blocks=2, cache_cap_blocks=0, kv_heads=KV_HEADS, head_size=HEAD)
        table = cache.start_sequence("s0", list(range(6)))
        with pytest.raises(PoolExhausted):
            commit(cache, table, list(range(6)), 0)

    def test_truncate_rolls_back_private_tail(self, small_cache):
        table = small_cache.start_sequence("s0", [1, 2, 3, 4, 5])
        commit(small_cache, table, [1, 2, 3], 0)
        commit(small_cache, table, [4, 5], 3, cacheable=False)
        small_cache.truncate_tokens(table, 3)
        assert table.total_tokens == 3
        assert len(table.blocks) == 2
        free_before = small_cache.free_block_count()
        commit(small_cache, table, [4, 5], 3)
        assert small_cache.free_block_count() <= free_before


# ---------------------------------------------------------------------------
# evict
# ---------------------------------------------------------------------------


class TestEvict:
    def test_empty_tree(self, small_cache):
        assert small_cache.evict(3) == 0

    def test_lru_order(self, small_cache):
        # Three cached one-block sequences, released so all leaves are
        # evictable; insertion order fixes last_used order.
        tables = []
        for i, tok in enumerate([[1, 2], [3, 4], [5, 6]]):
            t, _ = build_seq(small_cache, f"s{i}", tok)
            tables.append(t)
        ids = [t.blocks[0] for t in tables]
        for t in tables:
            small_cache.release_sequence(t)
        assert small_cache.evict(2) == 2
        part = small_cache.pool_partition()
        assert ids[0] in part["free"] and ids[1] in part["free"]
        assert ids[2] in part["cached"]

    def test_referenced_leaf_pinned(self, small_cache):
        t, _ = build_seq(small_cache, "s0", [1, 2])
        assert small_cache.evict(1) == 0  # still referenced by s0
        small_cache.release_sequence(t)
        assert small_cache.evict(1) == 1

    def test_non_leaf_never_evicted(self, small_cache):
        t0, _ = build_seq(small_cache, "s0", [1, 2, 3, 4])
        small_cache.release_sequence(t0)
        # Only the deeper block (leaf) may go first.
        assert small_cache.evict(1) == 1
        reachable = small_cache.reachable_block_ids()
        assert len(reachable) == 1

    def test_no_reachable_evicted_handles(self, small_cache):
        t0, _ = build_seq(small_cache, "s0", [1, 2, 3, 4, 5, 6])
        small_cache.release_sequence(t0)
        small_cache.evict(2)
        part = small_cache.pool_partition()
        assert small_cache.reachable_block_ids() == part["cached"]


# ---------------------------------------------------------------------------
# Properties
# ---------------------------------------------------------------------------


def test_pool_conservation_random_ops():
    rng = np.random.default_rng(11)
    cache = RadixKvCache(block_size=2, pool_blocks=64, cache_cap_blocks=24, kv_heads=KV_HEADS, head_size=HEAD)
    live: dict[str, tuple] = {}
    next_id = 0
    for step in range(2000):
        op = rng.random()
        if op < 0.45 or not live:
            tokens = rng.integers(0, 5, size=rng.integers(1, 10)).tolist()
            sid = f"s{next_id}"
            next_id += 1
            try:
                table = cache.start_sequence(sid, tokens)
                commit(cache, table, tokens[table.total_tokens :], table.total_tokens)
                live[sid] = (table, tokens)
            except PoolExhausted:
                pass
        elif op < 0.7:
            sid = list(live)[int(rng.integers(len(live)))]
            table, tokens = live.pop(sid)
            cache.release_sequence(table)
        else:
            cache.evict(int(rng.integers(1, 4)))
        part = cache.pool_partition()
        total = len(part["free"]) + len(part["cached"]) + len(part["referenced"])
        assert total == cache.pool_blocks, f"leak at step {step}"
        assert not (part["free"] & part["cached"] & part["referenced"])


def test_cow_isolation_shadow_map():
    """Replaying every live sequence's table returns exactly the K/V
    values committed for it, under random interleaved sharing."""
    rng = np.random.default_rng(3)
    cache = RadixKvCache(block_size=4, pool_blocks=256, cache_cap_blocks=128, kv_heads=KV_HEADS, head_size=HEAD)
    live: dict[str, tuple] = {}
    next_id = 0
    for _ in range(400):
        roll = rng.random()
        if roll < 0.5 or not live:
            tokens = rng.integers(0, 6, size=rng.integers(1, 18)).tolist()
            sid = f"s{next_id}"
            next_id += 1
            try:
                table = cache.start_sequence(sid, tokens)
                commit(cache, table, tokens[table.total_tokens :], table.total_tokens)
                live[sid] = (table, list(tokens))
            except PoolExhausted:
                continue
        elif roll < 0.8:
            sid = list(live)[int(rng.integers(len(live)))]
            table, tokens = live[sid]
            extra = rng.integers(0, 6, size=rng.integers(1, 6)).tolist()
            try:
                commit(cache, table, extra, len(tokens))
                tokens.extend(extra)
            except PoolExhausted:
                continue
        else:
            sid = list(live)[int(rng.integers(len(live)))]
            table, _ = live.pop(sid)
            cache.release_sequence(table)

        # shadow check: every live sequence sees its own committed values
        for table, tokens in live.values():
            assert table.total_tokens == len(tokens)
            for pos, tok in enumerate(tokens):
                b = table.blocks[pos // 4]
                row = pos % 4
                want_k, want_v = kv_rows([tok], pos, KV_HEADS, HEAD)
                np.testing.assert_array_equal(cache.keys[b, row], want_k[0])
                np.testing.assert_array_equal(cache.values[b, row], want_v[0])


def test_shared_prefix_reuse_is_real():
    cache = RadixKvCache(block_size=2, pool_blocks=32, cache_cap_blocks=16, kv_heads=KV_HEADS, head_size=HEAD)
    t0, _ = build_seq(cache, "a", [7, 8, 9, 1])
    t1 = cache.start_sequence("b", [7, 8, 9, 1])
    assert t1.total_tokens == 4
    assert t1.blocks == t0.blocks  # physical sharing, not copies
