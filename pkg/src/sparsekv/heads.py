"""Head role classification and static streaming-attention schedules.

Gate values (one scalar per query head, produced offline) are thresholded
at a sparsity quantile to split heads into retrieval and streaming roles.
Streaming heads attend a fixed sink-plus-local window, expressed as a
segment-based block iterator that jumps between visited tiles without
scanning the skipped ones.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

RETRIEVAL = "retrieval"
STREAMING = "streaming"


@dataclass(frozen=True)
class HeadProfile:
    head: int
    gate: float
    role: str
    sink_blocks: int = 1
    local_blocks: int = 2

    def __post_init__(self):
        if self.role not in (RETRIEVAL, STREAMING):
            raise ValueError(f"unknown role {self.role!r}")
        if self.role == STREAMING and (self.sink_blocks < 1 or self.local_blocks < 1):
            raise ValueError("streaming heads need sink_blocks >= 1 and local_blocks >= 1")


@dataclass(frozen=True)
class BlockIterator:
    """Ordered, non-overlapping [start, end) tile ranges; the unit of sparsity."""

    segments: tuple[tuple[int, int], ...]

    def __post_init__(self):
        prev_end = None
        for start, end in self.segments:
            if end <= start or start < 0:
                raise ValueError(f"empty or negative segment [{start}, {end})")
            if prev_end is not None and start < prev_end:
                raise ValueError("segments must be strictly ascending and disjoint")
            prev_end = end

    def __iter__(self) -> Iterator[int]:
        return iterate(self)

    def __len__(self) -> int:
        return sum(end - start for start, end in self.segments)

    def tiles(self) -> list[int]:
        return list(iterate(self))


def iterate(it: BlockIterator) -> Iterator[int]:
    """Yield visited tiles in ascending order; cost is O(visited), not O(total)."""
    for start, end in it.segments:
        yield from range(start, end)


def classify_heads(gates: Sequence[float], target_sparsity: float,
                   sink_blocks: int = 1, local_blocks: int = 2) -> list[HeadProfile]:
    """Assign retrieval/streaming roles by comparing gates to a quantile cut.

    Exactly ``ceil((1 - target_sparsity) * H)`` heads become retrieval heads;
    ties at the threshold break toward the lower head index.  The partition
    depends only on gate ranks, so any strictly increasing transform of the
    gates leaves it unchanged.
    """
    gates = [float(g) for g in gates]
    if not gates:
        raise ValueError("gate list is empty")
    if any(g < 0.0 or g > 1.0 for g in gates):
        raise ValueError("gates must lie in [0, 1]")
    if not 0.0 <= target_sparsity < 1.0:
        raise ValueError(f"target sparsity must be in [0, 1), got {target_sparsity}")
    n_heads = len(gates)
    n_retrieval = _ceil_fraction(1.0 - target_sparsity, n_heads)
    order = sorted(range(n_heads), key=lambda h: (-gates[h], h))
    retrieval = set(order[:n_retrieval])
    return [
        HeadProfile(head=h, gate=gates[h],
                    role=RETRIEVAL if h in retrieval else STREAMING,
                    sink_blocks=sink_blocks, local_blocks=local_blocks)
        for h in range(n_heads)
    ]


def _ceil_fraction(fraction: float, count: int) -> int:
    # Tiny backoff guards against upward float error in fraction * count.
    return math.ceil(fraction * count - 1e-12)


def gate_threshold(gates: Sequence[float], target_sparsity: float) -> float:
    """The quantile cut: the smallest gate still classified as retrieval."""
    profiles = classify_heads(gates, target_sparsity)
    return min(p.gate for p in profiles if p.role == RETRIEVAL)


def streaming_schedule(seq_tiles: int, profile: HeadProfile,
                       query_tile: int) -> BlockIterator:
    """Sink + local tile window for one query tile of a streaming head.

    ``query_tile`` is the index of the tile containing the query's most
    recent visible KV position (for aligned prefill this equals the query
    tile index; at decode it is the last tile).  Short sequences degrade to
    all tiles without double counting.
    """
    if profile.role != STREAMING:
        raise ValueError(f"head {profile.head} is not a streaming head")
    if seq_tiles < 1:
        raise ValueError("need at least one KV tile")
    diag = min(query_tile, seq_tiles - 1)
    sink_end = min(profile.sink_blocks, diag + 1)
    local_start = max(diag + 1 - profile.local_blocks, 0)
    if local_start <= sink_end:
        return BlockIterator(((0, diag + 1),))
    return BlockIterator(((0, sink_end), (local_start, diag + 1)))


def load_gates(path: str | Path, layer: int = 0) -> list[float]:
    """Read one layer's gate values from a JSON array of per-layer arrays."""
    with open(path) as fp:
        layers = json.load(fp)
    if not isinstance(layers, list) or not layers:
        raise ValueError(f"{path}: expected a non-empty JSON array of layers")
    if not 0 <= layer < len(layers):
        raise ValueError(f"layer {layer} outside [0, {len(layers)})")
    return [float(g) for g in layers[layer]]
