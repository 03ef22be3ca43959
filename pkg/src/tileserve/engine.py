"""Serving loop: chunks from the scheduler run through the planner,
the tiled kernels, and the paged K/V caches.

The engine drives one radix cache per transformer layer with an
identical operation sequence, so the layer caches stay congruent
(same block ids, same tables). Numeric mode executes the toy model
for real and can verify every computed row against a dense recompute;
simulate mode replays the same control flow with seeded stand-in
tokens and only costs the work on the accelerator model. Both modes
account time in simulator ticks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionTileJob, run_tile, skip_plan
from .config import ServeConfig
from .gemm import TilePrimitive, gemm_virtual_pad, fused_sv_write, smooth_shape
from .kv_cache import RadixKvCache
from .oracle import ToyModel, dense_forward, rms_norm, silu
from .planner import (
    LinearOp,
    decompose_attention,
    decompose_linear,
    lookup_linear_tasktable,
    reorder_attention,
)
from .profiles import ProfileStore
from .scheduler import Chunk, Request, Stage, StageResult, TokenScheduler
from .simulator import Schedule, l2_kv_split_blocks, profile_swizzle, simulate_attention, simulate_linear
from .spec_decode import SeededProposer, SpecTree, tree_mask, verify_accept


class OracleCheckFailure(AssertionError):
    """A computed logits row diverged from the dense recompute."""


@dataclass
class EngineRequest:
    req_id: object
    prompt: list[int]
    output_len: int
    arrival: int = 0
    spec: tuple[int, int] | None = None  # (width, depth)


@dataclass
class _Runtime:
    request: EngineRequest
    matched: int
    tables: list
    last_token: int | None = None
    outputs: list[int] = field(default_factory=list)
    logits_rows: dict[int, np.ndarray] = field(default_factory=dict)
    first_token_tick: float | None = None
    token_ticks: list[float] = field(default_factory=list)
    done: bool = False

    @property
    def full_prompt(self) -> list[int]:
        return self.request.prompt


class Engine:
    def __init__(
        self,
        model: ToyModel,
        cfg: ServeConfig | None = None,
        *,
        numeric: bool = True,
        check: bool = False,
        seed: int = 0,
        profile_linear: bool = False,
        check_tol: float = 1e-3,
    ):
        if cfg is None:
            cfg = ServeConfig(budget=32, kv_block_size=8, kv_pool_blocks=512, kv_cache_cap_blocks=256)
            cfg.model = model.cfg
        cfg.validate()
        self.cfg = cfg
        self.model = model
        self.numeric = numeric
        self.check = check
        self.check_tol = check_tol
        self.rng = np.random.default_rng(seed)
        self.sched = TokenScheduler(cfg.budget, cfg.reserve)
        self.caches = [RadixKvCache.from_config(cfg) for _ in range(cfg.model.num_layers)]
        self.store = ProfileStore()
        self._weights32 = self._cast_weights(model)
        self.runtimes: dict[object, _Runtime] = {}
        self.pending: list[EngineRequest] = []
        self.ticks = 0.0
        self.chunk_log: list[dict] = []
        self.skip_computed = 0
        self.skip_skipped = 0
        if profile_linear:
            self._profile_linears()

    # ------------------------------------------------------------------

    def submit(self, req: EngineRequest) -> None:
        if len(req.prompt) < 1:
            raise ValueError("prompt must be nonempty")
        self.pending.append(req)
        self.pending.sort(key=lambda r: (r.arrival, str(r.req_id)))

    def run(self) -> dict:
        while True:
            self._admit_arrived()
            chunk = self.sched.schedule_next()
            if chunk is None:
                if self.pending:
                    self.ticks = max(self.ticks, float(self.pending[0].arrival))
                    continue
                break
            self._execute_chunk(chunk)
        if self.check:
            self._run_checks()
        return self.report()

    def prompt_logits(self, req_id) -> np.ndarray | None:
        rt = self.runtimes.get(req_id)
        if rt is None or not self.numeric:
            return None
        n = len(rt.full_prompt)
        rows = [rt.logits_rows.get(p) for p in range(n)]
        if any(r is None for r in rows):
            return None
        return np.stack(rows)

    # ------------------------------------------------------------------

    def _admit_arrived(self) -> None:
        while self.pending and self.pending[0].arrival <= self.ticks:
            req = self.pending.pop(0)
            matched = None
            tables = []
            for cache in self.caches:
                table = cache.start_sequence(req.req_id, req.prompt, max_match=len(req.prompt) - 1)
                if matched is None:
                    matched = table.total_tokens
                assert table.total_tokens == matched, "layer caches diverged"
                tables.append(table)
            self.runtimes[req.req_id] = _Runtime(request=req, matched=matched, tables=tables)
            self.sched.add_request(
                Request(
                    req_id=req.req_id,
                    prompt_tokens=req.prompt[matched:],
                    output_len=req.output_len,
                    arrival=req.arrival,
                    kv_len=matched,
                    spec=req.spec,
                )
            )

    def _execute_chunk(self, chunk: Chunk) -> None:
        tiles = decompose_attention(chunk, self.cfg.model.num_heads, self.cfg)
        tasktable = reorder_attention(tiles, self.cfg.hw.core_num)
        for t in tiles:
            c, s = skip_plan(t, self.cfg.kv_block_size)
            self.skip_computed += c
            self.skip_skipped += s
        if self.numeric:
            results = self._forward_chunk(chunk, tiles)
        else:
            results = self._fake_results(chunk)
        span = self._simulate_chunk(chunk, tasktable, tiles)
        self.ticks += span
        self._record_outputs(chunk, results)
        self.sched.complete_chunk(chunk, results)
        self.chunk_log.append(
            {
                "chunk_id": chunk.chunk_id,
                "tokens": chunk.total_tokens,
                "stages": "".join(sorted(e.stage.value for e in chunk.entries)),
                "ticks": span,
            }
        )
        for rt in self.runtimes.values():
            if not rt.done and rt.request.req_id in self.sched.retired:
                rt.done = True
                for table, cache in zip(rt.tables, self.caches):
                    cache.release_sequence(table)

    # ------------------------------------------------------------------
    # Numeric forward
    # ------------------------------------------------------------------

    def _cast_weights(self, model: ToyModel) -> dict:
        w32 = {
            "embed": model.embed.astype(np.float32),
            "pos": model.pos.astype(np.float32),
            "final_norm": model.final_norm.astype(np.float32),
            "lm_head": model.lm_head.astype(np.float32),
            "layers": [],
        }
        for layer in model.layers:
            w32["layers"].append({k: v.astype(np.float32) for k, v in layer.items()})
        return w32

    def _chunk_tokens_positions(self, chunk: Chunk) -> tuple[list[int], list[int]]:
        tokens: list[int] = []
        positions: list[int] = []
        for entry in chunk.entries:
            rt = self.runtimes[entry.req_id]
            if entry.stage is Stage.PREFILL:
                tokens.extend(rt.full_prompt[entry.kv_len : entry.kv_len + entry.token_num])
                positions.extend(range(entry.kv_len, entry.kv_len + entry.token_num))
            elif entry.stage is Stage.DECODE:
                tokens.append(rt.last_token)
                positions.append(entry.kv_len)
            else:
                tree = entry.spec_tree
                tokens.extend(tree.tokens)
                positions.extend(entry.kv_len + tree.depth(i) for i in range(tree.spec_len))
        return tokens, positions

    def _forward_chunk(self, chunk: Chunk, tiles) -> dict[object, StageResult]:
        cfg = self.cfg.model
        w = self._weights32
        tokens, positions = self._chunk_tokens_positions(chunk)
        n = len(tokens)
        x = w["embed"][np.asarray(tokens)] + w["pos"][np.asarray(positions)]
        x = x.astype(np.float32)
        scale = 1.0 / np.sqrt(cfg.head_size)
        spec_kv: dict[int, list[tuple[np.ndarray, np.ndarray]]] = {}

        for li, layer in enumerate(w["layers"]):
            hidden = rms_norm(x, layer["norm1"]).astype(np.float32)
            qkv2d = self._linear(chunk, hidden, layer["wqkv"], LinearOp.QKV)
            qkv = qkv2d.reshape(n, cfg.num_heads + 2 * cfg.num_kv_heads, cfg.head_size)
            for ei, entry in enumerate(chunk.entries):
                rt = self.runtimes[entry.req_id]
                rows = slice(entry.start_pos, entry.start_pos + entry.token_num)
                new_k = np.ascontiguousarray(qkv[rows, cfg.num_heads : cfg.num_heads + cfg.num_kv_heads, :])
                new_v = np.ascontiguousarray(qkv[rows, cfg.num_heads + cfg.num_kv_heads :, :])
                if entry.stage is Stage.VERIFY:
                    spec_kv.setdefault(ei, []).append((new_k, new_v))
                self.caches[li].commit_tokens(
                    rt.tables[li],
                    tokens[rows],
                    new_k,
                    new_v,
                    cacheable=entry.stage is not Stage.VERIFY,
                )
            out = np.zeros((n, cfg.num_heads, cfg.head_size), dtype=np.float32)
            for tile in tiles:
                entry = chunk.entries[tile.stage_id]
                rt = self.runtimes[entry.req_id]
                job = AttentionTileJob(
                    tile=tile,
                    qkv=qkv,
                    q_rows=(
                        entry.start_pos + tile.q_start,
                        entry.start_pos + tile.q_start + tile.q_len,
                    ),
                    kv=self.caches[li].kv_view(rt.tables[li]),
                    scale=scale,
                    kv_heads=cfg.num_kv_heads,
                    spec_mask=tree_mask(entry.spec_tree) if entry.stage is Stage.VERIFY else None,
                )
                split = l2_kv_split_blocks(
                    tile.q_len, tile.kv_len + tile.stage_tokens, self.cfg.kv_block_size, self.cfg.hw
                )
                fused_sv_write(
                    out, tile.head, entry.start_pos + tile.q_start, run_tile(job, split)
                )
            attn = out.reshape(n, cfg.num_heads * cfg.head_size)
            x = x + self._linear(chunk, attn, layer["wo"], LinearOp.O_PROJ)
            hidden = rms_norm(x, layer["norm2"]).astype(np.float32)
            gu = self._linear(chunk, hidden, layer["wgu"], LinearOp.GATE_UP)
            gate, up = np.split(gu, 2, axis=1)
            act = (silu(gate) * up).astype(np.float32)
            x = x + self._linear(chunk, act, layer["wdown"], LinearOp.DOWN)

        logits = rms_norm(x, w["final_norm"]).astype(np.float32) @ w["lm_head"]
        return self._apply_logits(chunk, logits, spec_kv, tokens)

    def _linear(self, chunk: Chunk, a: np.ndarray, b: np.ndarray, op: LinearOp) -> np.ndarray:
        m, k = a.shape
        n = b.shape[1]
        tile_k = 128 if k % 128 == 0 else 64
        prim = TilePrimitive(tile_m=16, tile_n=min(128, n), tile_k=tile_k)
        smoothed = self._smoothed_m(op, m, n, k)
        entry, grid = decompose_linear(chunk, op, n, prim.tile_m, prim.tile_n, self.cfg.quantum)
        table = lookup_linear_tasktable(
            self.store, op, (smoothed, n, k), self.cfg.hw.core_num, grid
        )
        return gemm_virtual_pad(a, b, prim, order=table)

    def _smoothed_m(self, op: LinearOp, m: int, n: int, k: int) -> int:
        profiled = self.store.profiled_ms(op.value, n, k)
        if profiled:
            return smooth_shape(m, self.cfg.budget, profiled)
        return smooth_shape(m, self.cfg.budget, self.cfg.quantum)

    def _apply_logits(
        self,
        chunk: Chunk,
        logits: np.ndarray,
        spec_kv: dict[int, list[tuple[np.ndarray, np.ndarray]]],
        flat_tokens: list[int],
    ) -> dict[object, StageResult]:
        results: dict[object, StageResult] = {}
        for ei, entry in enumerate(chunk.entries):
            rt = self.runtimes[entry.req_id]
            req = rt.request
            if entry.stage is Stage.PREFILL:
                for i in range(entry.token_num):
                    rt.logits_rows[entry.kv_len + i] = logits[entry.start_pos + i].copy()
                final = entry.kv_len + entry.token_num == len(rt.full_prompt)
                if not final:
                    continue
                next_token = int(np.argmax(logits[entry.start_pos + entry.token_num - 1]))
                rt.last_token = next_token
                results[req.req_id] = StageResult(
                    next_token=next_token,
                    next_tree=self._propose(rt, next_token) if req.spec else None,
                )
            elif entry.stage is Stage.DECODE:
                rt.logits_rows[entry.kv_len] = logits[entry.start_pos].copy()
                next_token = int(np.argmax(logits[entry.start_pos]))
                rt.last_token = next_token
                results[req.req_id] = StageResult(next_token=next_token)
            else:
                results[req.req_id] = self._accept_verify(
                    entry, rt, logits, spec_kv.get(ei, []), flat_tokens
                )
        return results

    def _accept_verify(self, entry, rt: _Runtime, logits, layer_kv, flat_tokens) -> StageResult:
        tree: SpecTree = entry.spec_tree
        rows = [entry.start_pos + j for j in range(tree.spec_len)]
        target_next = [int(np.argmax(logits[r])) for r in rows]
        path = verify_accept(tree, target_next, rt.last_token)
        assert path, "engine roots trees at the previous target pick, so the root accepts"
        for j, node in enumerate(path):
            rt.logits_rows[entry.kv_len + j] = logits[rows[node]].copy()
        bonus = target_next[path[-1]]
        # Roll the speculative K/V back to the accepted path, per layer.
        keep_tokens = [tree.tokens[j] for j in path]
        for li, (new_k, new_v) in enumerate(layer_kv):
            cache = self.caches[li]
            table = rt.tables[li]
            cache.truncate_tokens(table, entry.kv_len)
            cache.commit_tokens(
                table, keep_tokens, new_k[path], new_v[path], cacheable=True
            )
        new_list = [tree.tokens[j] for j in path[1:]] + [bonus]
        remaining = rt.request.output_len - (len(rt.outputs))
        delivered = new_list[: max(0, remaining)]
        rt.last_token = bonus
        continuing = len(rt.outputs) + len(delivered) < rt.request.output_len
        return StageResult(
            committed=len(path),
            new_tokens=len(delivered),
            next_tree=self._propose(rt, bonus) if continuing else None,
            delivered=delivered,
        )

    def _propose(self, rt: _Runtime, root_token: int) -> SpecTree:
        width, depth = rt.request.spec
        proposer = SeededProposer(width, depth, self.cfg.model.vocab_size, seed=17)
        context = rt.full_prompt + rt.outputs
        return proposer.propose(context, root_token)

    # ------------------------------------------------------------------
    # Simulate-only results
    # ------------------------------------------------------------------

    def _fake_results(self, chunk: Chunk) -> dict[object, StageResult]:
        results: dict[object, StageResult] = {}
        cfg = self.cfg.model
        tokens, _ = self._chunk_tokens_positions(chunk)
        for entry in chunk.entries:
            rt = self.runtimes[entry.req_id]
            req = rt.request
            rows = slice(entry.start_pos, entry.start_pos + entry.token_num)
            zeros = np.zeros((entry.token_num, cfg.num_kv_heads, cfg.head_size), dtype=np.float32)
            for cache, table in zip(self.caches, rt.tables):
                cache.commit_tokens(
                    table, tokens[rows], zeros, zeros, cacheable=entry.stage is not Stage.VERIFY
                )
            if entry.stage is Stage.PREFILL:
                final = entry.kv_len + entry.token_num == len(rt.full_prompt)
                if not final:
                    continue
                next_token = int(self.rng.integers(cfg.vocab_size))
                rt.last_token = next_token
                results[req.req_id] = StageResult(
                    next_token=next_token,
                    next_tree=self._propose(rt, next_token) if req.spec else None,
                )
            elif entry.stage is Stage.DECODE:
                next_token = int(self.rng.integers(cfg.vocab_size))
                rt.last_token = next_token
                results[req.req_id] = StageResult(next_token=next_token)
            else:
                tree = entry.spec_tree
                accepted = int(self.rng.integers(1, tree.spec_len + 1))
                for cache, table in zip(self.caches, rt.tables):
                    cache.truncate_tokens(table, entry.kv_len)
                    keep = np.zeros((accepted, cfg.num_kv_heads, cfg.head_size), dtype=np.float32)
                    cache.commit_tokens(table, list(tree.tokens[:accepted]), keep, keep, cacheable=True)
                bonus = int(self.rng.integers(cfg.vocab_size))
                remaining = req.output_len - len(rt.outputs)
                delivered = ([tree.tokens[j] for j in range(1, accepted)] + [bonus])[: max(0, remaining)]
                rt.last_token = bonus
                continuing = len(rt.outputs) + len(delivered) < req.output_len
                results[req.req_id] = StageResult(
                    committed=accepted,
                    new_tokens=len(delivered),
                    next_tree=self._propose(rt, bonus) if continuing else None,
                    delivered=delivered,
                )
        return results

    # ------------------------------------------------------------------
    # Timing, metrics, checks
    # ------------------------------------------------------------------

    def _simulate_chunk(self, chunk: Chunk, tasktable, tiles) -> float:
        hw = self.cfg.hw
        bs = self.cfg.kv_block_size
        all_decode = all(t.q_len == 1 for t in tiles)
        max_q = max(t.q_len for t in tiles)
        max_kv = max(t.kv_len + t.stage_tokens for t in tiles)
        split = l2_kv_split_blocks(max_q, max_kv, bs, hw)
        if all_decode:
            schedule, split = Schedule.DECODE_PIPE, None
        elif split is not None:
            schedule = Schedule.PIPE4
        else:
            schedule = Schedule.PIPE3
        attn = simulate_attention(
            tasktable,
            hw,
            schedule,
            head_size=self.cfg.model.head_size,
            kv_block_size=bs,
            kv_split_blocks=split,
        )
        span = attn.makespan
        mcfg = self.cfg.model
        dims = {
            LinearOp.QKV: (mcfg.qkv_out, mcfg.hidden_size),
            LinearOp.O_PROJ: (mcfg.hidden_size, mcfg.num_heads * mcfg.head_size),
            LinearOp.GATE_UP: (2 * mcfg.intermediate_size, mcfg.hidden_size),
            LinearOp.DOWN: (mcfg.hidden_size, mcfg.intermediate_size),
        }
        m = chunk.total_tokens
        for op, (n, k) in dims.items():
            tile_k = 128 if k % 128 == 0 else 64
            prim = TilePrimitive(16, min(128, n), tile_k)
            _, grid = decompose_linear(chunk, op, n, prim.tile_m, prim.tile_n, self.cfg.quantum)
            table = lookup_linear_tasktable(
                self.store, op, (self._smoothed_m(op, m, n, k), n, k), hw.core_num, grid
            )
            span += simulate_linear(grid, table, hw, prim, m, n, k).makespan
        return span * self.cfg.model.num_layers

    def _profile_linears(self) -> None:
        mcfg = self.cfg.model
        dims = {
            LinearOp.QKV: (mcfg.qkv_out, mcfg.hidden_size),
            LinearOp.O_PROJ: (mcfg.hidden_size, mcfg.num_heads * mcfg.head_size),
            LinearOp.GATE_UP: (2 * mcfg.intermediate_size, mcfg.hidden_size),
            LinearOp.DOWN: (mcfg.hidden_size, mcfg.intermediate_size),
        }
        sizes = []
        m = self.cfg.quantum
        while m < self.cfg.budget:
            sizes.append(m)
            m *= 2
        sizes.append(self.cfg.budget)
        for op, (n, k) in dims.items():
            tile_k = 128 if k % 128 == 0 else 64
            prim = TilePrimitive(16, min(128, n), tile_k)
            for sm in sizes:
                profile_swizzle(op.value, (sm, n, k), self.cfg.hw, prim, store=self.store)

    def _record_outputs(self, chunk: Chunk, results: dict[object, StageResult]) -> None:
        for entry in chunk.entries:
            result = results.get(entry.req_id)
            if result is None:
                continue
            rt = self.runtimes[entry.req_id]
            new: list[int] = []
            if entry.stage is Stage.VERIFY:
                new = list(result.delivered)
            elif result.next_token is not None and entry.stage in (Stage.PREFILL, Stage.DECODE):
                new = [result.next_token]
            for token in new:
                rt.outputs.append(token)
                rt.token_ticks.append(self.ticks)
                if rt.first_token_tick is None:
                    rt.first_token_tick = self.ticks

    def _run_checks(self) -> None:
        for rt in self.runtimes.values():
            seq = rt.full_prompt + rt.outputs
            if len(seq) < 2:
                continue
            ref = dense_forward(self.model, seq[:-1])
            for pos, row in sorted(rt.logits_rows.items()):
                err = float(np.max(np.abs(row - ref[pos])))
                if err > self.check_tol:
                    raise OracleCheckFailure(
                        f"request {rt.request.req_id!r} position {pos}: max abs err {err:.2e}"
                    )

    def report(self) -> dict:
        requests = {}
        for rid, rt in sorted(self.runtimes.items(), key=lambda kv: str(kv[0])):
            ticks = rt.token_ticks
            tbt = (
                (ticks[-1] - ticks[0]) / (len(ticks) - 1)
                if len(ticks) > 1
                else 0.0
            )
            requests[str(rid)] = {
                "ttft": rt.first_token_tick if rt.first_token_tick is not None else -1.0,
                "tbt": tbt,
                "generated": len(rt.outputs),
                "done": rt.done,
            }
        composition: dict[str, int] = {}
        for c in self.chunk_log:
            composition[c["stages"]] = composition.get(c["stages"], 0) + 1
        total_blocks = self.skip_computed + self.skip_skipped
        return {
            "requests": requests,
            "completed": sum(1 for r in requests.values() if r["done"]),
            "makespan_ticks": self.ticks,
            "qps": (
                sum(1 for r in requests.values() if r["done"]) / (self.ticks / 1e6)
                if self.ticks > 0
                else 0.0
            ),
            "chunks": {"count": len(self.chunk_log), "composition": dict(sorted(composition.items()))},
            "skip": {
                "computed_blocks": self.skip_computed,
                "skipped_blocks": self.skip_skipped,
                "skip_ratio": (self.skip_skipped / total_blocks) if total_blocks else 0.0,
            },
        }
