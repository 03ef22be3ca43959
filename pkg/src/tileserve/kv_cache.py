"""Block-paged K/V storage with radix-tree prefix reuse.

Keys and values live in fixed-size blocks drawn from a bounded pool.
A radix tree over token-id sequences indexes completed blocks so that
later requests can reuse matching prefixes token-wise; a mismatch
inside a block still reuses the matching head of that block. Shared
blocks are never written in place: appending to a block that the tree
or another sequence can see goes through copy-on-write. When the pool
or the cache-capacity cap runs out, least-recently-used unreferenced
leaf blocks are evicted from the tree.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .config import ServeConfig


class PoolExhausted(RuntimeError):
    """No free block is available even after eviction."""


@dataclass
class KvBlock:
    """Read-only view of one pool block (for tests and debugging)."""

    block_id: int
    token_count: int
    keys: np.ndarray
    values: np.ndarray
    ref_count: int


@dataclass
class RadixNode:
    """One cached block in the prefix tree.

    Children are keyed by their first token id; the tree therefore
    never holds two siblings starting with the same token.
    """

    token_key: tuple[int, ...]
    block_id: int
    parent: "RadixNode | None"
    children: dict[int, "RadixNode"] = field(default_factory=dict)
    last_used: int = 0
    alive: bool = True

    def is_leaf(self) -> bool:
        return not self.children


@dataclass
class BlockTable:
    """Ordered block list backing one sequence's K/V history.

    ``total_tokens`` counts the tokens this sequence considers valid;
    the last block may be only partially used from the sequence's
    point of view even when the underlying block is physically full
    (partial prefix match).
    """

    seq_id: object
    blocks: list[int] = field(default_factory=list)
    total_tokens: int = 0

    def last_block_tokens(self, block_size: int) -> int:
        if not self.blocks:
            return 0
        return self.total_tokens - (len(self.blocks) - 1) * block_size


@dataclass
class PrefixMatch:
    """Result of a prefix lookup: matched length and pinned blocks."""

    matched_len: int
    blocks: list[int]
    nodes: list[RadixNode] = field(default_factory=list, repr=False)


@dataclass
class KvView:
    """Snapshot handed to attention kernels: pool arrays plus the block list."""

    keys: np.ndarray  # [pool_blocks, block_size, kv_heads, head_size]
    values: np.ndarray
    block_ids: tuple[int, ...]
    total_tokens: int
    block_size: int


@dataclass
class _SeqState:
    tokens: list[int]
    cursor: RadixNode
    caching_ok: bool = True


class RadixKvCache:
    """Radix-tree managed, block-paged K/V cache.

    Single writer; prefix matches return immutable snapshots that are
    safe to hand to workers.
    """

    def __init__(
        self,
        block_size: int,
        pool_blocks: int,
        cache_cap_blocks: int,
        kv_heads: int,
        head_size: int,
    ):
        self.block_size = block_size
        self.pool_blocks = pool_blocks
        self.cache_cap_blocks = cache_cap_blocks
        self.keys = np.zeros((pool_blocks, block_size, kv_heads, head_size), dtype=np.float32)
        self.values = np.zeros_like(self.keys)
        self.token_count = [0] * pool_blocks
        self.ref_count = [0] * pool_blocks
        self._free: list[int] = list(range(pool_blocks - 1, -1, -1))
        self._root = RadixNode(token_key=(), block_id=-1, parent=None)
        self._node_of: dict[int, RadixNode] = {}  # block id -> tree node
        self._seqs: dict[object, _SeqState] = {}
        self._clock = 0

    @classmethod
    def from_config(cls, cfg: ServeConfig, kv_heads: int | None = None) -> "RadixKvCache":
        return cls(
            block_size=cfg.kv_block_size,
            pool_blocks=cfg.kv_pool_blocks,
            cache_cap_blocks=cfg.kv_cache_cap_blocks,
            kv_heads=kv_heads if kv_heads is not None else cfg.model.num_kv_heads,
            head_size=cfg.model.head_size,
        )

    # ------------------------------------------------------------------
    # Prefix matching
    # ------------------------------------------------------------------

    def match_prefix(self, tokens: list[int]) -> PrefixMatch:
        """Longest cached prefix of ``tokens``.

        Walks the tree comparing token ids one by one inside each
        node's key; a mismatch mid-block still counts the matching
        head of that block and stops there. Blocks in the returned
        match have their ref counts incremented (the caller owns a
        reference until :meth:`release_blocks` / sequence release)
        and the touched path is bumped to most-recently-used.
        """
        self._clock += 1
        node = self._root
        matched = 0
        blocks: list[int] = []
        nodes: list[RadixNode] = []
        i = 0
        while i < len(tokens):
            child = node.children.get(tokens[i])
            if child is None:
                break
            key = child.token_key
            k = 0
            limit = min(len(key), len(tokens) - i)
            while k < limit and key[k] == tokens[i + k]:
                k += 1
            if k == 0:
                break
            child.last_used = self._clock
            self.ref_count[child.block_id] += 1
            blocks.append(child.block_id)
            nodes.append(child)
            matched += k
            i += k
            if k < len(key):
                break
            node = child
        return PrefixMatch(matched, blocks, nodes)

    def start_sequence(self, seq_id, prompt_tokens: list[int], max_match: int | None = None) -> BlockTable:
        """Register a sequence, reusing the longest cached prefix.

        ``max_match`` caps how much of the match is kept (callers that
        must recompute at least one token pass ``len(prompt) - 1``).
        """
        if seq_id in self._seqs:
            raise ValueError(f"sequence {seq_id!r} already registered")
        m = self.match_prefix(prompt_tokens)
        use = m.matched_len if max_match is None else min(m.matched_len, max_match)
        keep_blocks = -(-use // self.block_size) if use > 0 else 0
        for bid in m.blocks[keep_blocks:]:
            self._release_block(bid)
        full_nodes = use // self.block_size
        cursor = m.nodes[full_nodes - 1] if full_nodes > 0 else self._root
        table = BlockTable(seq_id=seq_id, blocks=m.blocks[:keep_blocks], total_tokens=use)
        self._seqs[seq_id] = _SeqState(tokens=list(prompt_tokens[:use]), cursor=cursor)
        return table

    # ------------------------------------------------------------------
    # Committing new K/V
    # ------------------------------------------------------------------

    def commit_tokens(
        self,
        table: BlockTable,
        new_tokens: list[int],
        new_k: np.ndarray,
        new_v: np.ndarray,
        cacheable: bool = True,
    ) -> BlockTable:
        """Append K/V for ``new_tokens`` to the sequence.

        Appends in place only into a block this sequence exclusively
        owns; a block that is cached in the tree or referenced by
        anyone else is duplicated first (copy-on-write), so other
        referents never observe the write. Blocks that become full
        are inserted into the radix tree unless ``cacheable`` is
        False (used for speculative K/V that may be rolled back).

        Raises:
            PoolExhausted: no free block even after LRU eviction.
        """
        n = len(new_tokens)
        if new_k.shape[0] != n or new_v.shape[0] != n:
            raise ValueError("new_k/new_v first dimension must equal len(new_tokens)")
        if n == 0:
            return table
        st = self._seqs[table.seq_id]
        bs = self.block_size
        pos = 0
        while pos < n:
            view = table.last_block_tokens(bs)
            if table.blocks and view < bs:
                bid = table.blocks[-1]
                if not self._exclusively_owned(bid, view):
                    bid = self._cow_last_block(table, bid, view)
            else:
                bid = self._alloc_block()
                self.ref_count[bid] = 1
                self.token_count[bid] = 0
                table.blocks.append(bid)
                view = 0
            take = min(bs - view, n - pos)
            self.keys[bid, view : view + take] = new_k[pos : pos + take]
            self.values[bid, view : view + take] = new_v[pos : pos + take]
            self.token_count[bid] = view + take
            table.total_tokens += take
            st.tokens.extend(new_tokens[pos : pos + take])
            pos += take
            if view + take == bs and cacheable:
                self._try_cache_block(table, st, bid)
        return table

    def truncate_tokens(self, table: BlockTable, keep_total: int) -> None:
        """Drop the sequence's trailing tokens (speculative rollback).

        Only privately owned storage is touched; shared or cached
        blocks merely shrink from this sequence's point of view.
        """
        st = self._seqs[table.seq_id]
        if keep_total < 0 or keep_total > table.total_tokens:
            raise ValueError("keep_total out of range")
        cursor_cover = self._cursor_depth_tokens(st.cursor)
        if keep_total < cursor_cover:
            raise ValueError("cannot truncate into tree-cached prefix of this sequence")
        bs = self.block_size
        keep_blocks = -(-keep_total // bs) if keep_total > 0 else 0
        for bid in table.blocks[keep_blocks:]:
            self._release_block(bid)
        del table.blocks[keep_blocks:]
        table.total_tokens = keep_total
        del st.tokens[keep_total:]
        if table.blocks:
            last = table.blocks[-1]
            view = table.last_block_tokens(bs)
            if self._exclusively_owned_storage(last):
                self.token_count[last] = view

    def release_sequence(self, table: BlockTable) -> None:
        """Drop the sequence's references; uncached blocks return to the pool."""
        for bid in table.blocks:
            self._release_block(bid)
        table.blocks.clear()
        table.total_tokens = 0
        del self._seqs[table.seq_id]

    def release_blocks(self, match: PrefixMatch) -> None:
        """Release blocks pinned by a raw :meth:`match_prefix` call."""
        for bid in match.blocks:
            self._release_block(bid)
        match.blocks = []

    # ------------------------------------------------------------------
    # Eviction
    # ------------------------------------------------------------------

    def evict(self, needed: int) -> int:
        """Free up to ``needed`` blocks from unreferenced LRU leaves.

        Only leaf nodes whose blocks carry no sequence references are
        removed, oldest ``last_used`` first; a parent that becomes an
        unreferenced leaf joins the candidates in the same pass.
        Returns the number of blocks actually freed (may be short).
        """
        if needed < 1:
            raise ValueError("needed must be >= 1")
        heap: list[tuple[int, int, RadixNode]] = []
        for node in self._node_of.values():
            if node.is_leaf() and self.ref_count[node.block_id] == 0:
                heap.append((node.last_used, node.block_id, node))
        heapq.heapify(heap)
        freed = 0
        while freed < needed and heap:
            _, _, node = heapq.heappop(heap)
            if not node.alive or not node.is_leaf() or self.ref_count[node.block_id] != 0:
                continue
            self._remove_node(node)
            freed += 1
            parent = node.parent
            if (
                parent is not None
                and parent is not self._root
                and parent.is_leaf()
                and self.ref_count[parent.block_id] == 0
            ):
                heapq.heappush(heap, (parent.last_used, parent.block_id, parent))
        return freed

    # ------------------------------------------------------------------
    # Views and accounting
    # ------------------------------------------------------------------

    def kv_view(self, table: BlockTable) -> KvView:
        return KvView(
            keys=self.keys,
            values=self.values,
            block_ids=tuple(table.blocks),
            total_tokens=table.total_tokens,
            block_size=self.block_size,
        )

    def block(self, block_id: int) -> KvBlock:
        return KvBlock(
            block_id=block_id,
            token_count=self.token_count[block_id],
            keys=self.keys[block_id],
            values=self.values[block_id],
            ref_count=self.ref_count[block_id],
        )

    def cached_block_count(self) -> int:
        return len(self._node_of)

    def free_block_count(self) -> int:
        return len(self._free)

    def pool_partition(self) -> dict[str, set[int]]:
        """Disjoint partition of the pool: free / cached / referenced-only."""
        free = set(self._free)
        cached = set(self._node_of)
        referenced = {
            bid for bid in range(self.pool_blocks) if self.ref_count[bid] > 0 and bid not in cached
        }
        return {"free": free, "cached": cached, "referenced": referenced}

    def reachable_block_ids(self) -> set[int]:
        out: set[int] = set()
        stack = list(self._root.children.values())
        while stack:
            node = stack.pop()
            out.add(node.block_id)
            stack.extend(node.children.values())
        return out

    # ------------------------------------------------------------------
    # Internals
    # ------------------------------------------------------------------

    def _alloc_block(self) -> int:
        if not self._free:
            self.evict(1)
        if not self._free:
            raise PoolExhausted(
                f"no free K/V block in pool of {self.pool_blocks} after eviction"
            )
        return self._free.pop()

    def _release_block(self, bid: int) -> None:
        self.ref_count[bid] -= 1
        assert self.ref_count[bid] >= 0, "ref count underflow"
        if self.ref_count[bid] == 0 and bid not in self._node_of:
            self.token_count[bid] = 0
            self._free.append(bid)

    def _exclusively_owned(self, bid: int, view: int) -> bool:
        return (
            self.ref_count[bid] == 1
            and bid not in self._node_of
            and self.token_count[bid] == view
        )

    def _exclusively_owned_storage(self, bid: int) -> bool:
        return self.ref_count[bid] == 1 and bid not in self._node_of

    def _cow_last_block(self, table: BlockTable, old_bid: int, view: int) -> int:
        new_bid = self._alloc_block()
        self.keys[new_bid, :view] = self.keys[old_bid, :view]
        self.values[new_bid, :view] = self.values[old_bid, :view]
        self.token_count[new_bid] = view
        self.ref_count[new_bid] = 1
        table.blocks[-1] = new_bid
        self._release_block(old_bid)
        return new_bid

    def _try_cache_block(self, table: BlockTable, st: _SeqState, bid: int) -> None:
        if not st.caching_ok:
            return
        if not st.cursor.alive:
            st.caching_ok = False
            return
        start = (len(table.blocks) - 1) * self.block_size
        key = tuple(st.tokens[start : start + self.block_size])
        child = st.cursor.children.get(key[0])
        if child is not None:
            if child.token_key == key:
                # Equivalent block already cached; chain under it but keep
                # this sequence's own copy (no aliasing of committed data).
                st.cursor = child
            else:
                # First-token collision with different content: the child
                # edge must stay deterministic, so caching stops here.
                st.caching_ok = False
            return
        if self.cache_cap_blocks == 0:
            st.caching_ok = False
            return
        if len(self._node_of) >= self.cache_cap_blocks and self.evict(1) == 0:
            st.caching_ok = False
            return
        self._clock += 1
        node = RadixNode(token_key=key, block_id=bid, parent=st.cursor, last_used=self._clock)
        st.cursor.children[key[0]] = node
        self._node_of[bid] = node
        st.cursor = node

    def _remove_node(self, node: RadixNode) -> None:
        node.alive = False
        assert node.parent is not None
        del node.parent.children[node.token_key[0]]
        del self._node_of[node.block_id]
        self.token_count[node.block_id] = 0
        self._free.append(node.block_id)

    def _cursor_depth_tokens(self, node: RadixNode) -> int:
        depth = 0
        while node is not self._root:
            depth += len(node.token_key)
            node = node.parent
        return depth
