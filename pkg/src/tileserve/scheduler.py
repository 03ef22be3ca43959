"""Token-budget chunk scheduler over prefill/decode/verify queues.

Each scheduling step drains decode and verify tokens first (FIFO,
decode before verify, verify requests admitted whole), then fills the
remaining budget with prefill tokens in arrival order, splitting a
prompt whose remainder does not fit. While decode or verify tokens are
queued, a slice of the budget is held back for them, so prefill-only
chunks appear only when those queues are empty.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from .spec_decode import SpecTree


class UnknownRequest(KeyError):
    """A chunk completion referenced a request that is not in flight."""


class Stage(Enum):
    PREFILL = "P"
    DECODE = "D"
    VERIFY = "V"


@dataclass
class Request:
    """One serving request as the scheduler sees it.

    ``prompt_tokens`` holds only the uncached suffix; ``kv_len`` starts
    at the matched-prefix length and then tracks how many of this
    request's tokens have K/V committed.
    """

    req_id: object
    prompt_tokens: list[int]
    output_len: int
    arrival: int = 0
    kv_len: int = 0
    spec: tuple[int, int] | None = None  # (width, depth) or None
    spec_tree: SpecTree | None = None
    # progress
    stage: Stage = Stage.PREFILL
    scheduled: int = 0  # prompt tokens handed out so far
    generated: int = 0

    def remaining_prompt(self) -> int:
        return len(self.prompt_tokens) - self.scheduled


@dataclass(frozen=True)
class ChunkEntry:
    """One stage instance inside a chunk; ``start_pos`` is the offset
    into the chunk's flat token tensor."""

    req_id: object
    stage: Stage
    start_pos: int
    token_num: int
    kv_len: int
    spec_tree: SpecTree | None = None


@dataclass
class Chunk:
    chunk_id: int
    entries: list[ChunkEntry]
    total_tokens: int


@dataclass
class StageResult:
    """Per-request outcome the driver reports back after running a chunk."""

    next_token: int | None = None  # prefill-final and decode
    committed: int = 0  # verify: tokens whose K/V was kept
    new_tokens: int = 0  # verify: tokens added to the output this round
    next_tree: SpecTree | None = None  # verify continuation (and prefill->verify)
    delivered: list[int] = field(default_factory=list)  # verify: the tokens themselves


class TokenScheduler:
    """Single-threaded scheduler; callers alternate schedule/complete."""

    def __init__(self, budget: int, reserve: int | None = None):
        if budget < 1:
            raise ValueError("budget must be >= 1")
        self.budget = budget
        self.reserve = budget // 4 if reserve is None else reserve
        if not 0 <= self.reserve < budget:
            raise ValueError("reserve must satisfy 0 <= reserve < budget")
        self._prefill: deque[Request] = deque()
        self._decode: deque[Request] = deque()
        self._verify: deque[Request] = deque()
        self._requests: dict[object, Request] = {}
        self._in_flight: dict[object, int] = {}
        self._retired: dict[object, Request] = {}
        self._next_chunk_id = 0

    # ------------------------------------------------------------------

    def add_request(self, req: Request) -> None:
        if req.req_id in self._requests or req.req_id in self._retired:
            raise ValueError(f"duplicate request id {req.req_id!r}")
        self._requests[req.req_id] = req
        if not req.prompt_tokens:
            raise ValueError("request needs at least one uncached prompt token")
        self._prefill.append(req)

    def queued_dv_tokens(self) -> int:
        return len(self._decode) + sum(r.spec_tree.spec_len for r in self._verify)

    def is_idle(self) -> bool:
        return (
            not self._prefill
            and not self._decode
            and not self._verify
            and not self._in_flight
        )

    @property
    def retired(self) -> dict[object, Request]:
        return self._retired

    # ------------------------------------------------------------------

    def schedule_next(self) -> Chunk | None:
        """Build the next fixed-budget chunk, or None if queues are empty."""
        entries: list[ChunkEntry] = []
        used = 0

        while self._decode and used < self.budget:
            req = self._decode.popleft()
            entries.append(ChunkEntry(req.req_id, Stage.DECODE, used, 1, req.kv_len))
            req.kv_len += 1
            used += 1
            self._mark_in_flight(req)

        while self._verify:
            spec_len = self._verify[0].spec_tree.spec_len
            if used + spec_len > self.budget:
                break  # verify trees are atomic; FIFO head blocks
            req = self._verify.popleft()
            entries.append(
                ChunkEntry(req.req_id, Stage.VERIFY, used, spec_len, req.kv_len, req.spec_tree)
            )
            used += spec_len
            self._mark_in_flight(req)

        dv = used
        if self._prefill:
            # With D/V admitted, hold `reserve` slots back from prefill so the
            # next rounds' decode tokens are not starved; prefill alone may
            # use the full budget.
            cap = self.budget if dv == 0 else self.budget - max(dv, self.reserve)
            room = max(0, cap - (used - dv))
            while self._prefill and room > 0:
                req = self._prefill[0]
                take = min(req.remaining_prompt(), room)
                if take == 0:
                    break
                entries.append(ChunkEntry(req.req_id, Stage.PREFILL, used, take, req.kv_len))
                req.kv_len += take
                req.scheduled += take
                used += take
                room -= take
                self._mark_in_flight(req)
                if req.remaining_prompt() == 0:
                    self._prefill.popleft()
                else:
                    break  # split: remainder stays at the queue head

        if not entries:
            return None
        chunk = Chunk(self._next_chunk_id, entries, used)
        self._next_chunk_id += 1
        return chunk

    def complete_chunk(self, chunk: Chunk, results: dict[object, StageResult]) -> None:
        """Apply a finished chunk: advance, re-enqueue, or retire requests."""
        for entry in chunk.entries:
            req = self._requests.get(entry.req_id)
            if req is None or self._in_flight.get(entry.req_id, 0) <= 0:
                raise UnknownRequest(entry.req_id)
            self._in_flight[entry.req_id] -= 1
            if self._in_flight[entry.req_id] == 0:
                del self._in_flight[entry.req_id]
            result = results.get(entry.req_id, StageResult())

            if entry.stage is Stage.PREFILL:
                final = entry.kv_len + entry.token_num == req.kv_len and req.remaining_prompt() == 0
                if not final:
                    continue  # split continuation is already queued
                if result.next_token is None:
                    raise ValueError(f"prefill completion for {req.req_id!r} needs next_token")
                req.generated = 1
                if req.generated >= req.output_len:
                    self._retire(req)
                elif req.spec is not None:
                    if result.next_tree is None:
                        raise ValueError("speculative request needs next_tree after prefill")
                    req.spec_tree = result.next_tree
                    req.stage = Stage.VERIFY
                    self._verify.append(req)
                else:
                    req.stage = Stage.DECODE
                    self._decode.append(req)

            elif entry.stage is Stage.DECODE:
                if result.next_token is None:
                    raise ValueError(f"decode completion for {req.req_id!r} needs next_token")
                req.generated += 1
                if req.generated >= req.output_len:
                    self._retire(req)
                else:
                    self._decode.append(req)

            else:  # VERIFY
                req.kv_len += result.committed
                req.generated += result.new_tokens
                if req.generated >= req.output_len:
                    self._retire(req)
                else:
                    if result.next_tree is None:
                        raise ValueError("verify continuation needs next_tree")
                    req.spec_tree = result.next_tree
                    self._verify.append(req)

    # ------------------------------------------------------------------

    def _mark_in_flight(self, req: Request) -> None:
        self._in_flight[req.req_id] = self._in_flight.get(req.req_id, 0) + 1

    def _retire(self, req: Request) -> None:
        del self._requests[req.req_id]
        self._retired[req.req_id] = req
