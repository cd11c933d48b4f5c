"""Seeded synthetic workload generation, including planted-needle streams.

Needle workloads hide one or more keys whose exact dot product with the
probe query (the last query row) dominates everything else in the history,
and report the planted positions and physical pages as ground truth, so
selection recall is a checkable property rather than a model-quality score.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .attn import Workload

RANDOM = "random"
NEEDLE = "needle"
CLUSTERED = "clustered_needles"

KINDS = (RANDOM, NEEDLE, CLUSTERED)


@dataclass(frozen=True)
class WorkloadSpec:
    kind: str = RANDOM
    num_history: int = 1024
    num_queries: int = 1
    num_heads: int = 1
    num_kv_heads: int = 1
    head_dim: int = 16
    needle_margin: float = 1.0
    cluster_span: int = 1
    physical_page: int = 64
    logical_page: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown workload kind {self.kind!r}")
        if min(self.num_history, self.num_queries, self.num_heads,
               self.num_kv_heads, self.head_dim) < 1:
            raise ValueError("all dimensions must be positive")
        if self.num_heads % self.num_kv_heads != 0:
            raise ValueError("num_heads must be a multiple of num_kv_heads")
        if self.num_history < self.num_queries:
            raise ValueError("history must cover the query tokens")
        if self.physical_page % self.logical_page != 0:
            raise ValueError("logical page must divide physical page")
        if self.cluster_span < 1:
            raise ValueError("cluster_span must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, path: str | Path) -> "WorkloadSpec":
        with open(path) as fp:
            return cls(**json.load(fp))


@dataclass(frozen=True)
class GroundTruth:
    """Planted needle locations; empty for plain random workloads."""

    kind: str
    needle_positions: tuple[int, ...] = ()
    needle_pages: tuple[int, ...] = ()


def gen_workload(spec: WorkloadSpec) -> tuple[Workload, GroundTruth]:
    """Generate a seeded workload; same spec always yields identical tensors.

    For ``needle`` workloads the planted key's exact probe score exceeds
    every other physical page's bounding-box score by ``needle_margin``, so
    any sound box-based selector must pick its page.  For
    ``clustered_needles`` the planted keys beat every background
    logical-page box score by the margin but may lose to coarse whole-page
    boxes: the regime where estimator granularity matters.
    """
    rng = np.random.default_rng(spec.seed)
    s, n = spec.num_history, spec.num_queries
    q = rng.standard_normal((n, spec.num_heads, spec.head_dim))
    k = rng.standard_normal((s, spec.num_kv_heads, spec.head_dim))
    v = rng.standard_normal((s, spec.num_kv_heads, spec.head_dim))

    if spec.kind == RANDOM:
        return Workload(q, k, v), GroundTruth(kind=spec.kind)

    positions = _needle_positions(spec, rng)
    probe = q[-1]  # [num_heads, head_dim]
    group = spec.num_heads // spec.num_kv_heads
    for kv in range(spec.num_kv_heads):
        group_q = probe[kv * group:(kv + 1) * group]
        _plant(spec, k[:, kv, :], group_q, positions)

    pages = tuple(sorted({p // spec.physical_page for p in positions}))
    truth = GroundTruth(kind=spec.kind, needle_positions=tuple(positions),
                        needle_pages=pages)
    return Workload(q, k, v), truth


def _needle_positions(spec: WorkloadSpec, rng: np.random.Generator) -> list[int]:
    """Choose planted token positions, away from pinned sink/local pages."""
    n_p, n_l = spec.physical_page, spec.logical_page
    num_pages = math.ceil(spec.num_history / n_p)
    free = [p for p in range(num_pages)
            if p != 0 and p < num_pages - 2
            and (p + 1) * n_p <= spec.num_history]
    if not free:
        free = [p for p in range(num_pages) if (p + 1) * n_p <= spec.num_history]
    if not free:
        raise ValueError(
            f"history of {spec.num_history} tokens has no full page to plant in"
        )
    if spec.kind == NEEDLE:
        page = int(rng.choice(free))
        slot = int(rng.integers(n_p))
        return [page * n_p + slot]
    # Clustered: one needle per logical page across cluster_span consecutive
    # physical pages, so planted logical pages share as few physical pages
    # as the span allows.
    span = spec.cluster_span
    starts = [p for p in free if all(pp in free for pp in range(p, p + span))]
    if not starts:
        raise ValueError(
            f"no room for a {span}-page cluster in {num_pages} pages"
        )
    start = int(rng.choice(starts))
    positions = []
    for page in range(start, start + span):
        for logical in range(n_p // n_l):
            offset = int(rng.integers(n_l))
            positions.append(page * n_p + logical * n_l + offset)
    return positions


def _plant(spec: WorkloadSpec, keys: np.ndarray, group_q: np.ndarray,
           positions: list[int]) -> None:
    """Overwrite keys at ``positions`` so they dominate under the probe."""
    if spec.needle_margin <= 0:
        raise ValueError(
            f"needle margin must be positive, got {spec.needle_margin}"
        )
    norms = np.linalg.norm(group_q, axis=1)
    g_best = int(np.argmax(norms))
    if norms[g_best] <= 1e-9:
        raise ValueError(
            "needle cannot dominate: probe query is (numerically) zero, "
            f"head dim {spec.head_dim} gives it no direction to exploit"
        )
    direction = group_q[g_best]

    if spec.kind == NEEDLE:
        exclude = {p // spec.physical_page for p in positions}
        target = _max_box_score(
            keys, group_q, spec.physical_page, exclude) + spec.needle_margin
    else:
        # Beat every needle-free logical-page box on the true alignment.
        exclude = {p // spec.logical_page for p in positions}
        target = _max_box_score(
            keys, group_q, spec.logical_page, exclude) + spec.needle_margin
    coeff = target / float(direction @ direction)
    if not math.isfinite(coeff):
        raise ValueError("needle cannot dominate: non-finite scaling required")
    for pos in positions:
        keys[pos] = coeff * direction


def _max_box_score(keys: np.ndarray, group_q: np.ndarray, page: int,
                   exclude: set[int]) -> float:
    """Max group-reduced bounding-box score over pages of the given size."""
    best = -math.inf
    num_pages = math.ceil(keys.shape[0] / page)
    for p in range(num_pages):
        if p in exclude:
            continue
        chunk = keys[p * page:(p + 1) * page]
        lo = chunk.min(axis=0)
        hi = chunk.max(axis=0)
        score = np.maximum(group_q * hi, group_q * lo).sum(axis=1).max()
        best = max(best, float(score))
    return best
