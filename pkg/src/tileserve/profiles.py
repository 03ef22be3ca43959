"""Offline-profiled GEMM task orderings.

An ordering descriptor names how a result-matrix tile grid is walked
(and thus dealt to cores): plain row/column major, or zigzag with a
column-group width that keeps a small set of weight panels hot in L2.
The profile store maps (op, M, N, K) to the tiling and ordering picked
by the offline simulator sweep.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

STORE_VERSION = 1


class MissingProfile(KeyError):
    """Shape was never profiled; callers fall back to row-major order."""


@dataclass(frozen=True)
class OrderingDescriptor:
    kind: str  # "row_major" | "col_major" | "zigzag"
    width: int = 0

    def name(self) -> str:
        return f"zigzag-width-{self.width}" if self.kind == "zigzag" else self.kind


ROW_MAJOR = OrderingDescriptor("row_major")
COL_MAJOR = OrderingDescriptor("col_major")

#: Canonical candidate list; earlier entries win simulator ties.
CANDIDATE_ORDERINGS: tuple[OrderingDescriptor, ...] = (
    ROW_MAJOR,
    COL_MAJOR,
    OrderingDescriptor("zigzag", 2),
    OrderingDescriptor("zigzag", 4),
    OrderingDescriptor("zigzag", 8),
)


def grid_order(desc: OrderingDescriptor, rows: int, cols: int) -> list[tuple[int, int]]:
    """Visit order of an (rows x cols) tile grid under a descriptor."""
    if desc.kind == "row_major":
        return [(i, j) for i in range(rows) for j in range(cols)]
    if desc.kind == "col_major":
        return [(i, j) for j in range(cols) for i in range(rows)]
    if desc.kind == "zigzag":
        if desc.width < 1:
            raise ValueError("zigzag width must be >= 1")
        out = []
        for g in range(0, cols, desc.width):
            hi = min(g + desc.width, cols)
            for i in range(rows):
                for j in range(g, hi):
                    out.append((i, j))
        return out
    raise ValueError(f"unknown ordering kind {desc.kind!r}")


@dataclass(frozen=True)
class ProfileEntry:
    tile_m: int
    tile_n: int
    tile_k: int
    order: OrderingDescriptor


class ProfileStore:
    """Versioned key-value store: (op, M, N, K) -> ProfileEntry."""

    def __init__(self):
        self._entries: dict[tuple[str, int, int, int], ProfileEntry] = {}

    def put(self, op: str, m: int, n: int, k: int, entry: ProfileEntry) -> None:
        self._entries[(op, m, n, k)] = entry

    def get(self, op: str, m: int, n: int, k: int) -> ProfileEntry:
        try:
            return self._entries[(op, m, n, k)]
        except KeyError:
            raise MissingProfile((op, m, n, k)) from None

    def __contains__(self, key: tuple[str, int, int, int]) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def profiled_ms(self, op: str, n: int, k: int) -> list[int]:
        return sorted(m for (o, m, nn, kk) in self._entries if (o, nn, kk) == (op, n, k))

    def save(self, path: str | Path) -> None:
        data = {
            "version": STORE_VERSION,
            "entries": {
                f"{op}:{m}:{n}:{k}": {
                    "tile_m": e.tile_m,
                    "tile_n": e.tile_n,
                    "tile_k": e.tile_k,
                    "order": {"kind": e.order.kind, "width": e.order.width},
                }
                for (op, m, n, k), e in sorted(self._entries.items())
            },
        }
        Path(path).write_text(json.dumps(data, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "ProfileStore":
        data = json.loads(Path(path).read_text())
        if data.get("version") != STORE_VERSION:
            raise ValueError(f"unsupported profile store version {data.get('version')!r}")
        store = cls()
        for key, e in data["entries"].items():
            op, m, n, k = key.rsplit(":", 3)
            store.put(
                op,
                int(m),
                int(n),
                int(k),
                ProfileEntry(
                    tile_m=e["tile_m"],
                    tile_n=e["tile_n"],
                    tile_k=e["tile_k"],
                    order=OrderingDescriptor(e["order"]["kind"], e["order"]["width"]),
                ),
            )
        return store
