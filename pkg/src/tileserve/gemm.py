"""Fixed-tile GEMM with virtual padding on the token dimension.

The primitive only ever multiplies full (tileM x tileK) by
(tileK x tileN) buffers. Arbitrary token counts are handled by
allocating the on-chip buffer at full tile height, copying in only
the valid rows (selective read, zeros elsewhere), and writing back
only the valid rows (selective write); no padded data ever reaches
the output. Split/permute of the fused QKV tensor and of the
attention output are strided views instead of materialized copies.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

QUANTUM = 16
SUPPORTED_TILE_MN = (16, 32, 64, 128, 256)
SUPPORTED_TILE_K = (64, 128)


class ShapeMismatch(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


@dataclass(frozen=True)
class TilePrimitive:
    """A fixed-shape matmul kernel; no edge-case branches inside."""

    tile_m: int
    tile_n: int
    tile_k: int

    def __post_init__(self):
        for name, value, allowed in (
            ("tile_m", self.tile_m, SUPPORTED_TILE_MN),
            ("tile_n", self.tile_n, SUPPORTED_TILE_MN),
            ("tile_k", self.tile_k, SUPPORTED_TILE_K),
        ):
            if value not in allowed:
                raise ShapeMismatch(f"{name}={value} not in supported set {allowed}")


def _flatten_order(order, rows: int, cols: int) -> Iterable[tuple[int, int]]:
    if order is None:
        return ((i, j) for i in range(rows) for j in range(cols))
    if hasattr(order, "per_core"):
        return (cell for core in order.per_core for cell in core)
    return iter(order)


def gemm_virtual_pad(
    a: np.ndarray,
    b: np.ndarray,
    prim: TilePrimitive,
    order=None,
    out: np.ndarray | None = None,
) -> np.ndarray:
    """C = A @ B with virtual padding on M.

    A is (M x K) fp32 with arbitrary M; K must be a multiple of the
    primitive's tileK. Accumulation is fp32 with tiles visited in
    ascending K, so the result is deterministic and independent of the
    (row, col) visit order, which may come from a task table.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"incompatible operands {a.shape} @ {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    if k % prim.tile_k != 0:
        raise ShapeMismatch(f"K={k} must be a multiple of tileK={prim.tile_k}")
    if out is None:
        out = np.empty((m, n), dtype=np.float32)
    elif out.shape != (m, n):
        raise ShapeMismatch(f"out has shape {out.shape}, expected {(m, n)}")
    a = np.ascontiguousarray(a, dtype=np.float32)
    b = np.ascontiguousarray(b, dtype=np.float32)
    rows = -(-m // prim.tile_m)
    cols = -(-n // prim.tile_n)
    a_buf = np.zeros((prim.tile_m, prim.tile_k), dtype=np.float32)
    for i, j in _flatten_order(order, rows, cols):
        if not (0 <= i < rows and 0 <= j < cols):
            raise ShapeMismatch(f"tile ({i}, {j}) outside grid {(rows, cols)}")
        r0 = i * prim.tile_m
        valid = min(prim.tile_m, m - r0)
        c0 = j * prim.tile_n
        c1 = min(c0 + prim.tile_n, n)
        acc = np.zeros((prim.tile_m, c1 - c0), dtype=np.float32)
        for k0 in range(0, k, prim.tile_k):
            a_buf[:valid] = a[r0 : r0 + valid, k0 : k0 + prim.tile_k]
            a_buf[valid:] = 0.0
            acc += a_buf @ b[k0 : k0 + prim.tile_k, c0:c1]
        out[r0 : r0 + valid, c0:c1] = acc[:valid]
    return out


def smooth_shape(m: int, budget: int, grid: int | Sequence[int]) -> int:
    """Smallest supported size >= m.

    ``grid`` is either a step (supported sizes are its multiples up to
    the budget) or an explicit collection of supported sizes; the
    budget itself is always supported.
    """
    if not 1 <= m <= budget:
        raise ValueError(f"m={m} must be in [1, budget={budget}]")
    if isinstance(grid, int):
        sizes = list(range(grid, budget + 1, grid))
    else:
        sizes = sorted(s for s in grid if s <= budget)
    if not sizes or sizes[-1] != budget:
        sizes.append(budget)
    for s in sizes:
        if s >= m:
            return s
    return budget


class QkvSel(Enum):
    Q = "q"
    K = "k"
    V = "v"


def _section(qkv: np.ndarray, sel: QkvSel, kv_heads: int) -> tuple[int, int]:
    total = qkv.shape[1]
    heads = total - 2 * kv_heads
    if heads < 1:
        raise ShapeMismatch(f"QKV head axis {total} too small for kv_heads={kv_heads}")
    if sel is QkvSel.Q:
        return 0, heads
    if sel is QkvSel.K:
        return heads, kv_heads
    return heads + kv_heads, kv_heads


def fused_qkv_read(
    qkv: np.ndarray,
    sel: QkvSel,
    head: int,
    row_span: tuple[int, int],
    kv_heads: int,
) -> np.ndarray:
    """Strided view of one head's Q, K, or V slice of the fused
    [tokens, heads + 2*kvHeads, headSize] tensor; nothing is copied."""
    if qkv.ndim != 3:
        raise ShapeMismatch(f"QKV tensor must be 3-D, got {qkv.shape}")
    offset, count = _section(qkv, sel, kv_heads)
    if not 0 <= head < count:
        raise IndexOutOfRange(f"head {head} out of range for {sel.value} section of {count}")
    r0, r1 = row_span
    if not 0 <= r0 <= r1 <= qkv.shape[0]:
        raise IndexOutOfRange(f"row span {row_span} outside [0, {qkv.shape[0]}]")
    return qkv[r0:r1, offset + head, :]


def fused_sv_write(o: np.ndarray, head: int, row_start: int, tile: np.ndarray) -> None:
    """Write one head's attention-output tile straight into the
    [tokens, heads, headSize] tensor feeding the output projection."""
    if o.ndim != 3:
        raise ShapeMismatch(f"output tensor must be 3-D, got {o.shape}")
    if not 0 <= head < o.shape[1]:
        raise IndexOutOfRange(f"head {head} out of range for {o.shape[1]}")
    rows = tile.shape[0]
    if row_start < 0 or row_start + rows > o.shape[0]:
        raise IndexOutOfRange(f"rows [{row_start}, {row_start + rows}) outside [0, {o.shape[0]})")
    o[row_start : row_start + rows, head, :] = tile
