"""Tile-count cost accounting: the stand-in for kernel wall-clock time.

One tile is one query-tile x key-tile score block plus its matching
value block.  The ledger tracks how many tiles each head actually visited
versus how many a dense pass would have visited, per pipeline stage, and
how often the page selector ran.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field


@dataclass
class CostLedger:
    """Visited/total tile counts per (stage, head) plus selector invocations."""

    tiles: dict[tuple[str, int], list[int]] = field(default_factory=dict)
    selector_invocations: dict[int, int] = field(default_factory=dict)

    def record_tiles(self, stage: str, head: int, visited: int, total: int) -> None:
        if visited < 0 or total < 0 or visited > total:
            raise ValueError(
                f"invalid tile counts: visited={visited}, total={total}"
            )
        entry = self.tiles.setdefault((stage, head), [0, 0])
        entry[0] += visited
        entry[1] += total

    def record_selector(self, kv_head: int, count: int = 1) -> None:
        self.selector_invocations[kv_head] = (
            self.selector_invocations.get(kv_head, 0) + count
        )

    # -- aggregation ------------------------------------------------------

    def _entries(self, stage: str | None):
        for (st, _head), (visited, total) in self.tiles.items():
            if stage is None or st == stage:
                yield visited, total

    def visited(self, stage: str | None = None) -> int:
        return sum(v for v, _ in self._entries(stage))

    def total(self, stage: str | None = None) -> int:
        return sum(t for _, t in self._entries(stage))

    def skip_fraction(self, stage: str | None = None) -> float:
        total = self.total(stage)
        if total == 0:
            return 0.0
        return 1.0 - self.visited(stage) / total

    def speedup(self, stage: str | None = None) -> float:
        """total_tiles / visited_tiles; NaN for an empty or unvisited ledger."""
        visited = self.visited(stage)
        if visited == 0:
            return math.nan
        return self.total(stage) / visited

    def head_speedup(self, stage: str, head: int) -> float:
        visited, total = self.tiles[(stage, head)]
        if visited == 0:
            return math.nan
        return total / visited

    @property
    def total_selector_invocations(self) -> int:
        return sum(self.selector_invocations.values())

    def stages(self) -> list[str]:
        return sorted({st for st, _ in self.tiles})

    def merge(self, other: "CostLedger") -> "CostLedger":
        """Return a new ledger holding the sum of both ledgers."""
        merged = CostLedger()
        for source in (self, other):
            for (stage, head), (visited, total) in source.tiles.items():
                merged.record_tiles(stage, head, visited, total)
            for kv_head, count in source.selector_invocations.items():
                merged.record_selector(kv_head, count)
        return merged
