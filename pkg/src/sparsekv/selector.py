"""Query-aware dynamic page selection for dense heads.

Each logical page is scored by the channel-wise maximum of the query times
the page's key bounds, which upper-bounds the dot product of the query with
any key stored in that page.  Physical pages take the max over their
logical pages, and the top-K physical pages under a token budget (with the
sink page and the two most recent pages pinned) form the decode schedule.
A selection can be reused for a fixed number of consecutive decode steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cache import PageStats, PhysicalPage


def logical_page_score(q: np.ndarray, stats: PageStats) -> float:
    """sum_i max(q[i] * k_max[i], q[i] * k_min[i]): an upper bound on q . k."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != stats.k_max.shape:
        raise ValueError(
            f"query dim {q.shape} does not match stats dim {stats.k_max.shape}"
        )
    return float(np.maximum(q * stats.k_max, q * stats.k_min).sum())


def physical_page_score(q: np.ndarray, page: PhysicalPage) -> float:
    """Max-reduction of the logical page scores contained in one physical page."""
    if not page.stats:
        raise ValueError(f"page {page.page_id} carries no key statistics")
    return max(logical_page_score(q, s) for s in page.stats)


def score_pages(q_group: np.ndarray, pages: Sequence[PhysicalPage]) -> np.ndarray:
    """Physical-page scores for a group of query heads, max-reduced over the group.

    Args:
        q_group: ``[group, dim]`` (or ``[dim]``) query rows sharing one KV head.

    Returns:
        ``[len(pages)]`` float64 scores.
    """
    q_group = np.asarray(q_group, dtype=np.float64)
    if q_group.ndim == 1:
        q_group = q_group[None, :]
    mins, maxs, owner = _stacked_stats(pages)
    # Channel-wise max(q*k_max, q*k_min) summed over channels, as two
    # matmuls: max(a, b) = (a + b)/2 + |a - b|/2 and k_max >= k_min.
    center = (maxs + mins) * 0.5
    radius = (maxs - mins) * 0.5
    logical = q_group @ center.T + np.abs(q_group) @ radius.T
    logical = logical.max(axis=0)
    scores = np.full(len(pages), -np.inf)
    np.maximum.at(scores, owner, logical)
    return scores


def _stacked_stats(pages: Sequence[PhysicalPage]):
    mins, maxs, owner = [], [], []
    for i, page in enumerate(pages):
        if not page.stats:
            raise ValueError(f"page {page.page_id} carries no key statistics")
        for s in page.stats:
            mins.append(s.k_min)
            maxs.append(s.k_max)
            owner.append(i)
    return np.asarray(mins), np.asarray(maxs), np.asarray(owner)


def pinned_pages(num_pages: int) -> list[int]:
    """Sink page plus the two most recent pages (deduplicated, ascending)."""
    pins = {0, max(num_pages - 2, 0), num_pages - 1}
    return sorted(p for p in pins if 0 <= p < num_pages)


def select_pages(q_group: np.ndarray, pages: Sequence[PhysicalPage],
                 budget_tokens: int, page_size: int) -> list[int]:
    """Top-K physical pages under a token budget, pins included.

    K = ceil(budget / page_size).  The sink page and last two pages are
    always selected and count against the budget; remaining slots go to the
    highest-scoring pages with ties broken toward the lower page index.
    The result is sorted ascending so it can feed an attention schedule.
    """
    if budget_tokens < page_size:
        raise ValueError(
            f"budget {budget_tokens} is below one page ({page_size} tokens)"
        )
    num_pages = len(pages)
    if num_pages == 0:
        raise ValueError("no pages to select from")
    k = -(-budget_tokens // page_size)
    if k >= num_pages:
        return list(range(num_pages))
    pins = pinned_pages(num_pages)
    free_slots = max(k - len(pins), 0)
    if free_slots == 0:
        return pins
    scores = score_pages(q_group, pages)
    candidates = [i for i in range(num_pages) if i not in set(pins)]
    candidates.sort(key=lambda i: (-scores[i], i))
    chosen = set(pins) | set(candidates[:free_slots])
    return sorted(chosen)


@dataclass
class SelectionState:
    """Cached top-K page choice for one dense KV head plus its reuse window."""

    selected_pages: list[int]
    chunk_start_step: int
    reuse_interval: int
    budget_tokens: int

    def valid_for(self, step: int, budget_tokens: int, reuse_interval: int) -> bool:
        return (
            self.budget_tokens == budget_tokens
            and self.reuse_interval == reuse_interval
            and self.chunk_start_step <= step < self.chunk_start_step + reuse_interval
        )


def reusable_select(
    state: SelectionState | None,
    step: int,
    q_group: np.ndarray,
    pages: Sequence[PhysicalPage],
    budget_tokens: int,
    reuse_interval: int,
    page_size: int,
) -> tuple[list[int], SelectionState, bool]:
    """Run or reuse page selection for one decode step.

    Within a chunk of ``reuse_interval`` consecutive steps the cached page
    list is returned unchanged (the same object), so T steps incur exactly
    ceil(T / reuse_interval) selector invocations.

    Returns:
        ``(pages, state, invoked)``.
    """
    if reuse_interval < 1:
        raise ValueError(f"reuse interval must be >= 1, got {reuse_interval}")
    if state is not None and state.valid_for(step, budget_tokens, reuse_interval):
        return state.selected_pages, state, False
    selected = select_pages(q_group, pages, budget_tokens, page_size)
    new_state = SelectionState(
        selected_pages=selected,
        chunk_start_step=step,
        reuse_interval=reuse_interval,
        budget_tokens=budget_tokens,
    )
    return selected, new_state, True


def exact_top_k_pages(q_group: np.ndarray, keys: np.ndarray,
                      budget_tokens: int, page_size: int) -> list[int]:
    """Brute-force oracle: rank pages by their best exact token score.

    Scores every stored key against the query group (max over the group),
    reduces per page by max, and returns the same pin-plus-top-K set the
    selector would produce if its estimates were exact.
    """
    if budget_tokens < page_size:
        raise ValueError(
            f"budget {budget_tokens} is below one page ({page_size} tokens)"
        )
    q_group = np.asarray(q_group, dtype=np.float64)
    if q_group.ndim == 1:
        q_group = q_group[None, :]
    keys = np.asarray(keys, dtype=np.float64)
    num_pages = math.ceil(keys.shape[0] / page_size)
    k = -(-budget_tokens // page_size)
    if k >= num_pages:
        return list(range(num_pages))
    token_scores = (q_group @ keys.T).max(axis=0)
    page_scores = [
        token_scores[p * page_size:(p + 1) * page_size].max()
        for p in range(num_pages)
    ]
    pins = pinned_pages(num_pages)
    free_slots = max(k - len(pins), 0)
    candidates = [i for i in range(num_pages) if i not in set(pins)]
    candidates.sort(key=lambda i: (-page_scores[i], i))
    return sorted(set(pins) | set(candidates[:free_slots]))
