"""Exact attention oracle and blockwise online-softmax attention.

The reference path computes grouped-query causal attention head by head in
float64 and is the numerical ground truth for everything else.  The
blockwise path visits only the key/value tiles listed in a per-(head,
query-tile) schedule, merging tiles in ascending order through a running
online softmax, and reports its tile counts to a :class:`CostLedger`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .ledger import CostLedger

NEG_INF = -np.inf


@dataclass
class Workload:
    """A single-sequence attention problem.

    Attributes:
        q: Queries, shape ``[num_queries, num_heads, head_dim]``.
        k: Keys, shape ``[num_history, num_kv_heads, head_dim]``.
        v: Values, same shape as ``k``.

    The history axis includes the query tokens' own keys at the tail:
    under the causal rule, query row ``i`` attends to history positions
    ``<= num_history - num_queries + i``.
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        q, k, v = (np.asarray(t) for t in (self.q, self.k, self.v))
        if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
            raise ValueError("q, k, v must be rank-3 [tokens, heads, dim]")
        if k.shape != v.shape:
            raise ValueError(f"k and v shapes differ: {k.shape} vs {v.shape}")
        if q.shape[2] != k.shape[2]:
            raise ValueError("head_dim mismatch between q and k")
        if min(q.shape) < 1 or min(k.shape) < 1:
            raise ValueError("all tensor dimensions must be positive")
        if q.shape[1] % k.shape[1] != 0:
            raise ValueError(
                f"query head count {q.shape[1]} is not a multiple of "
                f"KV head count {k.shape[1]}"
            )
        for name, t in (("q", q), ("k", k), ("v", v)):
            if not np.isfinite(t).all():
                raise ValueError(f"non-finite values in {name}")
        self.q, self.k, self.v = q, k, v

    @property
    def num_queries(self) -> int:
        return self.q.shape[0]

    @property
    def num_history(self) -> int:
        return self.k.shape[0]

    @property
    def num_heads(self) -> int:
        return self.q.shape[1]

    @property
    def num_kv_heads(self) -> int:
        return self.k.shape[1]

    @property
    def head_dim(self) -> int:
        return self.q.shape[2]

    @property
    def group_size(self) -> int:
        return self.num_heads // self.num_kv_heads

    def astype(self, dtype) -> "Workload":
        return Workload(self.q.astype(dtype), self.k.astype(dtype),
                        self.v.astype(dtype))


def gqa_map(head: int, group_size: int) -> int:
    """Map a query head index to its KV head index: floor(head / group_size)."""
    if head < 0:
        raise IndexError(f"query head index {head} out of range")
    if group_size < 1:
        raise ValueError(f"group size must be >= 1, got {group_size}")
    return head // group_size


# -- tile geometry ---------------------------------------------------------


def kv_tile_count(num_history: int, tile_k: int) -> int:
    """Number of key tiles covering the history axis (last one may be ragged)."""
    return -(-num_history // tile_k)


def query_tile_count(num_queries: int, tile_q: int) -> int:
    return -(-num_queries // tile_q)


def diagonal_tile(query_tile: int, tile_q: int, tile_k: int,
                  num_queries: int, num_history: int) -> int:
    """Index of the most recent KV tile visible to any row of a query tile."""
    q_last = min((query_tile + 1) * tile_q, num_queries) - 1
    return (num_history - num_queries + q_last) // tile_k


def full_causal_schedule(query_tile: int, tile_q: int, tile_k: int,
                         num_queries: int, num_history: int) -> range:
    """Every tile a dense causal pass visits for the given query tile."""
    diag = diagonal_tile(query_tile, tile_q, tile_k, num_queries, num_history)
    return range(diag + 1)


# -- reference path --------------------------------------------------------


def reference_attention(w: Workload, causal: bool = True) -> np.ndarray:
    """Dense softmax(q K^T / sqrt(D)) V per head, computed in float64.

    With ``causal`` set, query row ``i`` sees history positions up to
    ``num_history - num_queries + i`` inclusive.

    Returns:
        Output of shape ``[num_queries, num_heads, head_dim]``, float64.
    """
    n, s = w.num_queries, w.num_history
    if causal and s < n:
        raise ValueError(
            f"causal attention needs history >= queries, got S={s}, N={n}"
        )
    q = w.q.astype(np.float64)
    k = w.k.astype(np.float64)
    v = w.v.astype(np.float64)
    scale = 1.0 / math.sqrt(w.head_dim)

    out = np.empty((n, w.num_heads, w.head_dim), dtype=np.float64)
    mask = None
    if causal:
        rows = np.arange(n)[:, None] + (s - n)
        cols = np.arange(s)[None, :]
        mask = cols > rows
    for h in range(w.num_heads):
        kv = gqa_map(h, w.group_size)
        scores = (q[:, h, :] @ k[:, kv, :].T) * scale
        if mask is not None:
            scores = np.where(mask, NEG_INF, scores)
        scores -= scores.max(axis=1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(axis=1, keepdims=True)
        out[:, h, :] = weights @ v[:, kv, :]
    return out


# -- online softmax --------------------------------------------------------


@dataclass
class SoftmaxState:
    """Running max / denominator / weighted output for a batch of query rows."""

    running_max: np.ndarray
    running_denominator: np.ndarray
    running_output: np.ndarray

    @classmethod
    def initial(cls, rows: int, dim: int, dtype=np.float64) -> "SoftmaxState":
        return cls(
            running_max=np.full(rows, NEG_INF, dtype=dtype),
            running_denominator=np.zeros(rows, dtype=dtype),
            running_output=np.zeros((rows, dim), dtype=dtype),
        )

    def finalize(self) -> np.ndarray:
        """Normalized attention output; requires every row to have seen a score."""
        if np.any(self.running_denominator <= 0):
            raise ValueError("row with no attended positions (denominator is 0)")
        return self.running_output / self.running_denominator[:, None]


def merge_block(state: SoftmaxState, scores: np.ndarray,
                values: np.ndarray) -> SoftmaxState:
    """Fold one block of scores/values into the running softmax state.

    ``scores`` may contain ``-inf`` for masked positions; a block of all
    ``-inf`` leaves the state unchanged.  Rescaling by the running max keeps
    the denominator finite regardless of score magnitudes.

    Args:
        scores: ``[rows, block]`` (or ``[block]`` for a single row).
        values: ``[block, dim]``.

    Returns:
        A new state; the input state is not modified.
    """
    scores = np.asarray(scores)
    if scores.ndim == 1:
        scores = scores[None, :]
    values = np.asarray(values)
    if np.any(np.isposinf(scores)) or np.any(np.isnan(scores)):
        raise ValueError("scores must be finite or -inf")
    if not np.isfinite(values).all():
        raise ValueError("values must be finite")

    dtype = state.running_max.dtype
    m_old = state.running_max
    m_new = np.maximum(m_old, scores.max(axis=1))
    # Rows where nothing finite has been seen keep max at -inf; shift through
    # 0 there so exp() never sees (-inf) - (-inf).
    live = m_new > NEG_INF
    shift = np.where(live, m_new, 0.0).astype(dtype)
    probs = np.exp(scores - shift[:, None])
    alpha = np.where(m_old > NEG_INF, np.exp(m_old - shift), 0.0).astype(dtype)
    return SoftmaxState(
        running_max=m_new,
        running_denominator=alpha * state.running_denominator
        + probs.sum(axis=1),
        running_output=alpha[:, None] * state.running_output + probs @ values,
    )


# -- blockwise path --------------------------------------------------------

Schedule = Sequence[int]


def _materialize(schedule: Iterable[int]) -> list[int]:
    tiles = [int(t) for t in schedule]
    for a, b in zip(tiles, tiles[1:]):
        if b <= a:
            raise ValueError(f"schedule must be strictly ascending, got {tiles}")
    return tiles


def blockwise_attention(
    w: Workload,
    schedules: Mapping[tuple[int, int], Schedule],
    tile_q: int,
    tile_k: int,
    stage: str = "attention",
) -> tuple[np.ndarray, CostLedger]:
    """Causal attention restricted to scheduled KV tiles, via online softmax.

    Tiles partition the history axis in chunks of ``tile_k`` (the last tile
    may be ragged).  For each (head, query tile) the schedule must list
    ascending tile indices and include the diagonal tile; tiles straddling
    the causal boundary are masked element-wise, all others are computed in
    full.  Merge order along the KV axis is fixed ascending, so outputs are
    independent of any parallel evaluation of (head, query-tile) pairs.

    Args:
        schedules: ``{(head, query_tile): tile indices}``; every pair must
            be present.
        stage: Label under which tile counts are recorded in the ledger.

    Returns:
        ``(output [num_queries, num_heads, head_dim], ledger delta)`` where
        the ledger holds per-head visited and total (dense-causal) tile
        counts.
    """
    if tile_q < 1 or tile_k < 1:
        raise ValueError("tile sizes must be >= 1")
    n, s = w.num_queries, w.num_history
    if s < n:
        raise ValueError(f"history must cover queries, got S={s}, N={n}")
    dtype = w.q.dtype
    scale = dtype.type(1.0 / math.sqrt(w.head_dim))
    n_tiles = kv_tile_count(s, tile_k)
    n_qtiles = query_tile_count(n, tile_q)

    out = np.zeros((n, w.num_heads, w.head_dim), dtype=dtype)
    ledger = CostLedger()

    for h in range(w.num_heads):
        kv = gqa_map(h, w.group_size)
        k_h = w.k[:, kv, :]
        v_h = w.v[:, kv, :]
        for qt in range(n_qtiles):
            r0 = qt * tile_q
            r1 = min(n, r0 + tile_q)
            positions = np.arange(r0, r1) + (s - n)
            diag = diagonal_tile(qt, tile_q, tile_k, n, s)
            tiles = _materialize(schedules[(h, qt)])
            if any(t < 0 or t >= n_tiles for t in tiles):
                raise ValueError(
                    f"schedule for head {h}, query tile {qt} references a "
                    f"tile outside [0, {n_tiles})"
                )
            if tiles and tiles[-1] > diag:
                raise ValueError(
                    f"schedule for head {h}, query tile {qt} references tile "
                    f"{tiles[-1]} beyond the causal diagonal {diag}"
                )
            if diag not in tiles:
                raise ValueError(
                    f"schedule for head {h}, query tile {qt} omits the most "
                    f"recent KV tile {diag}"
                )
            q_rows = w.q[r0:r1, h, :]
            state = SoftmaxState.initial(r1 - r0, w.head_dim, dtype)
            for t in tiles:
                c0 = t * tile_k
                c1 = min(s, c0 + tile_k)
                scores = (q_rows @ k_h[c0:c1].T) * scale
                if c1 - 1 > positions[0]:
                    col_pos = np.arange(c0, c1)
                    scores = np.where(
                        col_pos[None, :] > positions[:, None], NEG_INF, scores
                    )
                state = merge_block(state, scores, v_h[c0:c1])
            out[r0:r1, h, :] = state.finalize()
            ledger.record_tiles(stage, h, visited=len(tiles), total=diag + 1)

    return out, ledger
