"""Deterministic discrete-event model of a tile-based accelerator.

Each core owns a matrix (cube) unit and a vector unit; a memory mover
(MTE) streams data in and out. Attention task tables execute through
one of four disciplines: strictly sequential, the three-stage
QK/Softmax/SV pipeline, the four-stage pipeline with the split Update,
or the decode pipeline that fuses QK+Softmax onto the vector unit
while the cube runs the previous tile's SV. Pipelined disciplines are
rigid alternating rounds: each unit follows its fixed slot pattern and
a round lasts as long as its slowest op, which reproduces the textbook
alternating timeline exactly. Linear grids run through a shared-L2
reuse model where a panel's first touch pays the HBM rate and
re-touches inside the working set pay the L2 rate.

Costs are plain rate models (work divided by unit rate); time is
abstract ticks. Identical inputs produce byte-identical traces.
"""

from __future__ import annotations

import heapq
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum

from .attention import skip_plan
from .config import HwConfig
from .gemm import TilePrimitive
from .planner import TaskTable, TileUnit
from .profiles import (
    CANDIDATE_ORDERINGS,
    OrderingDescriptor,
    ProfileEntry,
    ProfileStore,
    grid_order,
)
from .scheduler import Stage

BYTES = 4  # fp32 everywhere


class ScheduleViolation(ValueError):
    """Schedule preconditions (split rule, decode-only) were broken."""


class Schedule(Enum):
    SEQ = "seq"
    PIPE3 = "pipe3"
    PIPE4 = "pipe4"
    DECODE_PIPE = "decode"


@dataclass(frozen=True)
class StageEvent:
    core: int
    unit: str  # "cube" | "vector" | "mte"
    kind: str  # QK | Softmax | SV | Update | QKSoftmax | Gemm | Load | Store
    tile: str
    start: float
    end: float


@dataclass
class SimTrace:
    events: list[StageEvent] = field(default_factory=list)
    makespan: float = 0.0
    busy: dict[str, float] = field(default_factory=dict)
    per_core_load: list[float] = field(default_factory=list)
    utilization: dict[str, float] = field(default_factory=dict)
    hbm_load_bytes: int = 0
    l2_load_bytes: int = 0

    def to_csv(self) -> str:
        lines = ["unit,kind,tile,start,end"]
        for e in self.events:
            lines.append(f"core{e.core}.{e.unit},{e.kind},{e.tile},{e.start!r},{e.end!r}")
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {
            "makespan": self.makespan,
            "busy": dict(sorted(self.busy.items())),
            "per_core_load": list(self.per_core_load),
            "utilization": dict(sorted(self.utilization.items())),
            "hbm_load_bytes": self.hbm_load_bytes,
            "l2_load_bytes": self.l2_load_bytes,
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True)


def l2_kv_split_blocks(
    tile_size: int, kv_tokens: int, kv_block_size: int, hw: HwConfig
) -> int | None:
    """Blocks per K/V split so the intermediate buffers fit in L2.

    Splitting triggers when pipeDepth x tileSize x kvLen x coreNum
    fp32 intermediates overflow the L2 budget; otherwise None.
    """
    footprint = hw.pipe_depth * tile_size * kv_tokens * hw.core_num * BYTES
    if footprint <= hw.l2_bytes:
        return None
    per_block = hw.pipe_depth * tile_size * kv_block_size * hw.core_num * BYTES
    return max(1, hw.l2_bytes // per_block)


# ---------------------------------------------------------------------------
# Attention simulation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Unit:
    """One (tile, split) work item and its op costs in ticks."""

    ref: str
    qk: float
    softmax: float
    sv: float
    update: float
    fused: float
    load_bytes: int
    store_bytes: int


def _tile_units(
    tiles: list[TileUnit],
    head_size: int,
    kv_block_size: int,
    kv_split_blocks: int | None,
    hw: HwConfig,
) -> list[_Unit]:
    units = []
    for t in tiles:
        computed, _ = skip_plan(t, kv_block_size)
        splits = _split_ranges(computed, kv_split_blocks)
        for s, (b0, b1) in enumerate(splits):
            tokens = (b1 - b0) * kv_block_size
            units.append(
                _Unit(
                    ref=f"{t.stage_id}.{t.head}.{t.q_start}.{s}",
                    qk=2.0 * t.q_len * head_size * tokens / hw.cube_flops_per_tick,
                    softmax=t.q_len * tokens / hw.vector_elems_per_tick,
                    sv=2.0 * t.q_len * tokens * head_size / hw.cube_flops_per_tick,
                    update=t.q_len * (head_size + 2) / hw.vector_elems_per_tick,
                    fused=(tokens * head_size + 2.0 * t.q_len * tokens)
                    / hw.vector_elems_per_tick,
                    load_bytes=2 * tokens * head_size * BYTES,
                    store_bytes=t.q_len * head_size * BYTES if b1 == computed else 0,
                )
            )
    return units


def _split_ranges(n_blocks: int, split: int | None) -> list[tuple[int, int]]:
    if n_blocks <= 0:
        return []
    if split is None or split >= n_blocks:
        return [(0, n_blocks)]
    return [(s, min(s + split, n_blocks)) for s in range(0, n_blocks, split)]


def _rounds(schedule: Schedule, n: int) -> list[tuple[tuple[str, int] | None, tuple[str, int] | None]]:
    """Per-round (cube op, vector op) slots; unit indices are 1-based.

    The pipelined patterns are the rigid alternating schedules: after
    the lead-in, the cube ping-pongs QK/SV and the vector Softmax/
    Update on fixed slots, idling when its slot's op does not exist.
    """
    rounds: list[tuple[tuple[str, int] | None, tuple[str, int] | None]] = []

    def slot(kind: str, idx: int) -> tuple[str, int] | None:
        return (kind, idx) if 1 <= idx <= n else None

    if schedule is Schedule.PIPE4:
        for r in range(2 * n + 2):
            if r == 0:
                cube = slot("QK", 1)
            elif r == 1:
                cube = slot("QK", 2)
            elif r % 2 == 0:
                cube = slot("SV", r // 2)
            else:
                cube = slot("QK", (r + 3) // 2)
            if r == 0:
                vec = None
            elif r == 1:
                vec = slot("Softmax", 1)
            elif r % 2 == 0:
                vec = slot("Softmax", r // 2 + 1)
            else:
                vec = slot("Update", (r - 1) // 2)
            rounds.append((cube, vec))
    elif schedule is Schedule.PIPE3:
        for r in range(2 * n + 1):
            if r == 0:
                cube = slot("QK", 1)
            elif r == 1:
                cube = slot("QK", 2)
            elif r % 2 == 0:
                cube = slot("SV", r // 2)
            else:
                cube = slot("QK", (r + 3) // 2)
            if r == 1:
                vec = slot("Softmax", 1)
            elif r >= 2 and r % 2 == 0:
                vec = slot("Softmax", r // 2 + 1)
            else:
                vec = None
            rounds.append((cube, vec))
    elif schedule is Schedule.DECODE_PIPE:
        for r in range(n + 1):
            cube = slot("SV", r) if r >= 1 else None
            vec = slot("QKSoftmax", r + 1)
            rounds.append((cube, vec))
    else:
        raise ValueError(f"no round pattern for {schedule}")
    return rounds


def _op_cost(unit: _Unit, kind: str) -> float:
    return {
        "QK": unit.qk,
        "Softmax": unit.softmax,
        "SV": unit.sv,
        "Update": unit.update,
        "QKSoftmax": unit.fused,
    }[kind]


def simulate_attention(
    tasktable: TaskTable,
    hw: HwConfig,
    schedule: Schedule,
    *,
    head_size: int,
    kv_block_size: int,
    kv_split_blocks: int | None = None,
    decode_fused: bool = False,
) -> SimTrace:
    """Run an attention task table through one pipeline discipline.

    Cores are independent; within a core the chosen discipline orders
    the cube and vector ops. MTE transfers are modeled as prefetch and
    write-back overlapped with compute (intermediates stay in L2), so
    they are recorded but never stretch the makespan.
    """
    if schedule is Schedule.PIPE4 and kv_split_blocks is None:
        raise ScheduleViolation("four-stage pipeline requires K/V splitting (L2 rule)")
    if schedule in (Schedule.PIPE3, Schedule.DECODE_PIPE) and kv_split_blocks is not None:
        raise ScheduleViolation(f"{schedule.value} runs unsplit K/V only")
    if schedule is Schedule.DECODE_PIPE or (schedule is Schedule.SEQ and decode_fused):
        for t in tasktable.all_items():
            if t.q_len != 1:
                raise ScheduleViolation("decode pipeline requires qTileLen == 1 everywhere")

    has_update = kv_split_blocks is not None
    trace = SimTrace()
    busy = {"cube": 0.0, "vector": 0.0, "mte": 0.0}
    per_core = []
    makespan = 0.0
    for core, tiles in enumerate(tasktable.per_core):
        units = _tile_units(list(tiles), head_size, kv_block_size, kv_split_blocks, hw)
        events = (
            _run_seq(core, units, has_update, decode_fused)
            if schedule is Schedule.SEQ
            else _run_rounds(core, units, schedule)
        )
        core_busy = 0.0
        core_end = 0.0
        for e in events:
            trace.events.append(e)
            busy[e.unit] += e.end - e.start
            core_busy += e.end - e.start
            core_end = max(core_end, e.end)
        trace.events.extend(_mte_events(core, units, events, hw, busy))
        per_core.append(core_busy)
        makespan = max(makespan, core_end)
    trace.makespan = makespan
    trace.busy = busy
    trace.per_core_load = per_core
    denom = makespan * max(1, tasktable.core_num)
    trace.utilization = {
        u: (b / denom if denom > 0 else 0.0) for u, b in busy.items() if u != "mte"
    }
    trace.events.sort(key=lambda e: (e.core, e.unit, e.start, e.kind, e.tile))
    return trace


def _run_seq(core: int, units: list[_Unit], has_update: bool, fused: bool) -> list[StageEvent]:
    events = []
    t = 0.0
    for u in units:
        if fused:
            ops = [("vector", "QKSoftmax", u.fused), ("cube", "SV", u.sv)]
        else:
            ops = [("cube", "QK", u.qk), ("vector", "Softmax", u.softmax), ("cube", "SV", u.sv)]
            if has_update:
                ops.append(("vector", "Update", u.update))
        for unit_name, kind, cost in ops:
            events.append(StageEvent(core, unit_name, kind, u.ref, t, t + cost))
            t += cost
    return events


def _run_rounds(core: int, units: list[_Unit], schedule: Schedule) -> list[StageEvent]:
    n = len(units)
    if n == 0:
        return []
    events = []
    t = 0.0
    for cube_slot, vec_slot in _rounds(schedule, n):
        dur = 0.0
        if cube_slot is not None:
            dur = max(dur, _op_cost(units[cube_slot[1] - 1], cube_slot[0]))
        if vec_slot is not None:
            dur = max(dur, _op_cost(units[vec_slot[1] - 1], vec_slot[0]))
        if dur == 0.0:
            continue
        if cube_slot is not None:
            kind, idx = cube_slot
            cost = _op_cost(units[idx - 1], kind)
            events.append(StageEvent(core, "cube", kind, units[idx - 1].ref, t, t + cost))
        if vec_slot is not None:
            kind, idx = vec_slot
            cost = _op_cost(units[idx - 1], kind)
            events.append(StageEvent(core, "vector", kind, units[idx - 1].ref, t, t + cost))
        t += dur
    return events


def _mte_events(
    core: int, units: list[_Unit], events: list[StageEvent], hw: HwConfig, busy: dict
) -> list[StageEvent]:
    """K/V prefetch before each unit's first op and output write-back
    after its last; clipped inside the compute window (L2-resident
    intermediates keep the MTE off the critical path)."""
    first_start: dict[str, float] = {}
    last_end: dict[str, float] = {}
    for e in events:
        first_start[e.tile] = min(first_start.get(e.tile, e.start), e.start)
        last_end[e.tile] = max(last_end.get(e.tile, e.end), e.end)
    out = []
    for u in units:
        if u.ref not in first_start:
            continue
        load_ticks = u.load_bytes / hw.hbm_bytes_per_tick
        s = first_start[u.ref]
        ev = StageEvent(core, "mte", "Load", u.ref, max(0.0, s - load_ticks), s)
        out.append(ev)
        busy["mte"] += ev.end - ev.start
        if u.store_bytes:
            st = u.store_bytes / hw.hbm_bytes_per_tick
            e = last_end[u.ref]
            ev = StageEvent(core, "mte", "Store", u.ref, max(0.0, e - st), e)
            out.append(ev)
            busy["mte"] += ev.end - ev.start
    return out


# ---------------------------------------------------------------------------
# Linear simulation
# ---------------------------------------------------------------------------


def simulate_linear(
    grid: tuple[int, int],
    tasktable: TaskTable,
    hw: HwConfig,
    prim: TilePrimitive,
    m: int,
    n: int,
    k: int,
) -> SimTrace:
    """Execute a linear tile grid under the shared-L2 reuse model.

    Every output tile loads one A row-panel and one B column-panel;
    the first touch of a panel inside the sliding working set costs
    the HBM rate, a re-touch the L2 rate. Cores run concurrently and
    share the working set; ties resolve by core id, so runs are
    deterministic.
    """
    rows, cols = grid
    if rows < 1 or cols < 1:
        raise ValueError("grid must be nonempty")
    queues = [list(core) for core in tasktable.per_core]
    heap = [(0.0, core) for core in range(len(queues)) if queues[core]]
    heapq.heapify(heap)
    lru: OrderedDict[tuple[str, int], int] = OrderedDict()
    lru_bytes = 0
    trace = SimTrace()
    busy = {"cube": 0.0, "vector": 0.0, "mte": 0.0}
    per_core = [0.0] * len(queues)
    makespan = 0.0

    def touch(panel: tuple[str, int], nbytes: int) -> tuple[int, int]:
        nonlocal lru_bytes
        if panel in lru:
            lru.move_to_end(panel)
            return 0, nbytes
        lru[panel] = nbytes
        lru_bytes += nbytes
        while lru_bytes > hw.l2_bytes and len(lru) > 1:
            _, evicted = lru.popitem(last=False)
            lru_bytes -= evicted
        return nbytes, 0

    while heap:
        t, core = heapq.heappop(heap)
        i, j = queues[core].pop(0)
        if not (0 <= i < rows and 0 <= j < cols):
            raise ValueError(f"tile ({i}, {j}) outside grid {grid}")
        rows_valid = min(prim.tile_m, m - i * prim.tile_m)
        cols_valid = min(prim.tile_n, n - j * prim.tile_n)
        hbm_a, l2_a = touch(("A", i), rows_valid * k * BYTES)
        hbm_b, l2_b = touch(("B", j), k * cols_valid * BYTES)
        hbm = hbm_a + hbm_b
        l2 = l2_a + l2_b
        load = hbm / hw.hbm_bytes_per_tick + l2 / hw.l2_hit_bytes_per_tick
        compute = 2.0 * prim.tile_m * prim.tile_n * k / hw.cube_flops_per_tick
        store_bytes = rows_valid * cols_valid * BYTES
        store = store_bytes / hw.hbm_bytes_per_tick
        ref = f"{i}.{j}"
        trace.events.append(StageEvent(core, "mte", "Load", ref, t, t + load))
        trace.events.append(StageEvent(core, "cube", "Gemm", ref, t + load, t + load + compute))
        end = t + load + compute + store
        trace.events.append(StageEvent(core, "mte", "Store", ref, t + load + compute, end))
        busy["mte"] += load + store
        busy["cube"] += compute
        per_core[core] += compute
        trace.hbm_load_bytes += hbm
        trace.l2_load_bytes += l2
        makespan = max(makespan, end)
        if queues[core]:
            heapq.heappush(heap, (end, core))
    trace.makespan = makespan
    trace.busy = busy
    trace.per_core_load = per_core
    denom = makespan * max(1, len(queues))
    trace.utilization = {"cube": busy["cube"] / denom if denom > 0 else 0.0}
    trace.events.sort(key=lambda e: (e.start, e.core, e.unit, e.kind))
    return trace


def profile_swizzle(
    op: str,
    shape: tuple[int, int, int],
    hw: HwConfig,
    prim: TilePrimitive,
    candidates: tuple[OrderingDescriptor, ...] = CANDIDATE_ORDERINGS,
    store: ProfileStore | None = None,
) -> OrderingDescriptor:
    """Pick the ordering with the lowest simulated makespan for a shape.

    Ties keep the earliest candidate (row-major first in the canonical
    list). The winner is recorded in the profile store when given.
    """
    m, n, k = shape
    rows = -(-m // prim.tile_m)
    cols = -(-n // prim.tile_n)
    best: OrderingDescriptor | None = None
    best_span = float("inf")
    for desc in candidates:
        order = grid_order(desc, rows, cols)
        table = _deal_round_robin(order, hw.core_num)
        span = simulate_linear((rows, cols), table, hw, prim, m, n, k).makespan
        if span < best_span:
            best, best_span = desc, span
    assert best is not None
    if store is not None:
        store.put(op, m, n, k, ProfileEntry(prim.tile_m, prim.tile_n, prim.tile_k, best))
    return best


def _deal_round_robin(order: list[tuple[int, int]], core_num: int) -> TaskTable:
    per_core: list[list] = [[] for _ in range(core_num)]
    for idx, cell in enumerate(order):
        per_core[idx % core_num].append(cell)
    return TaskTable(tuple(tuple(c) for c in per_core))
