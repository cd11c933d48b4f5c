"""Page selector: importance scores, top-K under budget, reusable selection."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sparsekv.cache import HeadPages, PageStats
from sparsekv.selector import (SelectionState, exact_top_k_pages,
                               logical_page_score, physical_page_score,
                               pinned_pages, reusable_select, score_pages,
                               select_pages)


def build_head(keys, page=64, logical=16):
    head = HeadPages(0, page, logical, bits=None, with_stats=True)
    head.append(keys, np.zeros_like(keys))
    return head


# -- scores ----------------------------------------------------------------


def test_zero_query_scores_zero():
    stats = PageStats(np.array([-1.0, -2.0]), np.array([2.0, 3.0]), 16)
    assert logical_page_score(np.zeros(2), stats) == 0.0


def test_worked_score_example_and_corner_dominance():
    q = np.array([1.0, -1.0])
    stats = PageStats(k_min=np.array([-1.0, -2.0]),
                      k_max=np.array([2.0, 3.0]), covered_tokens=4)
    score = logical_page_score(q, stats)
    assert score == 4.0  # max(2, -1) + max(-3, 2)
    corners = [
        q @ np.array(corner)
        for corner in itertools.product([-1.0, 2.0], [-2.0, 3.0])
    ]
    assert all(score >= c for c in corners)


def test_degenerate_box_equals_dot_product():
    rng = np.random.default_rng(0)
    k = rng.standard_normal(8)
    q = rng.standard_normal(8)
    stats = PageStats(k_min=k.copy(), k_max=k.copy(), covered_tokens=1)
    assert logical_page_score(q, stats) == pytest.approx(float(q @ k), rel=1e-15)


def test_physical_score_is_max_of_logical_scores():
    rng = np.random.default_rng(1)
    keys = rng.standard_normal((64, 8))
    head = build_head(keys)
    page = head.live_pages()[0]
    q = rng.standard_normal(8)
    expected = max(logical_page_score(q, s) for s in page.stats)
    assert physical_page_score(q, page) == expected
    single = PageStats(keys.min(axis=0), keys.max(axis=0), 64)
    lone = page.__class__(**{**page.__dict__, "stats": [single]})
    assert physical_page_score(q, lone) == logical_page_score(q, single)


@settings(max_examples=100, deadline=None)
@given(
    hnp.arrays(np.float64, (12, 4), elements=st.floats(-100, 100)),
    hnp.arrays(np.float64, (4,), elements=st.floats(-10, 10)),
)
def test_score_upper_bounds_any_contained_key(keys, q):
    stats = PageStats.from_keys(keys)
    bound = logical_page_score(q, stats)
    for key in keys:
        assert bound >= float(q @ key) - 1e-9 * max(abs(bound), 1.0)


def test_hierarchical_dominance():
    rng = np.random.default_rng(2)
    keys = rng.standard_normal((64, 8))
    head = build_head(keys)
    page = head.live_pages()[0]
    q = rng.standard_normal(8)
    top = physical_page_score(q, page)
    assert all(top >= logical_page_score(q, s) for s in page.stats)


def test_score_pages_matches_scalar_path():
    rng = np.random.default_rng(3)
    keys = rng.standard_normal((256, 8))
    head = build_head(keys)
    pages = head.live_pages()
    q_group = rng.standard_normal((2, 8))
    vectorized = score_pages(q_group, pages)
    for i, page in enumerate(pages):
        expected = max(physical_page_score(q, page) for q in q_group)
        assert vectorized[i] == pytest.approx(expected, rel=1e-12)


# -- select_pages -----------------------------------------------------------


def test_full_budget_selects_every_page():
    rng = np.random.default_rng(4)
    head = build_head(rng.standard_normal((256, 8)))
    selected = select_pages(rng.standard_normal(8), head.live_pages(),
                            budget_tokens=10_000, page_size=64)
    assert selected == [0, 1, 2, 3]


def test_budget_4096_with_page_64_selects_64_pages():
    rng = np.random.default_rng(5)
    head = build_head(rng.standard_normal((128 * 64, 8)))
    selected = select_pages(rng.standard_normal(8), head.live_pages(),
                            budget_tokens=4096, page_size=64)
    assert len(selected) == 64
    assert selected == sorted(selected)


def test_pins_are_always_selected():
    rng = np.random.default_rng(6)
    head = build_head(rng.standard_normal((8 * 64, 8)))
    selected = select_pages(rng.standard_normal(8), head.live_pages(),
                            budget_tokens=256, page_size=64)
    assert {0, 6, 7} <= set(selected)
    assert len(selected) == 4
    assert pinned_pages(8) == [0, 6, 7]
    assert pinned_pages(2) == [0, 1]


def test_budget_below_one_page_is_an_error():
    rng = np.random.default_rng(7)
    head = build_head(rng.standard_normal((128, 8)))
    with pytest.raises(ValueError, match="budget"):
        select_pages(rng.standard_normal(8), head.live_pages(), 63, 64)


def test_ties_break_toward_lower_page_index():
    keys = np.zeros((4 * 64, 2))  # all pages identical: scores all tie
    head = build_head(keys)
    selected = select_pages(np.ones(2), head.live_pages(), 64, 64)
    # one slot after pins {0,2,3}: impossible; K=1 < pins, pins win
    assert selected == [0, 2, 3]
    selected = select_pages(np.ones(2), head.live_pages(), 4 * 57, 64)
    assert selected == [0, 1, 2, 3]


def test_planted_needle_page_always_wins():
    rng = np.random.default_rng(8)
    for trial in range(50):
        keys = rng.standard_normal((512, 8))
        q = rng.standard_normal(8)
        needle_pos = int(rng.integers(64, 448))
        keys[needle_pos] = q * 100.0 / (q @ q)
        head = build_head(keys)
        selected = select_pages(q, head.live_pages(), 256, 64)
        oracle = exact_top_k_pages(q, keys, 256, 64)
        assert needle_pos // 64 in selected
        assert needle_pos // 64 in oracle


# -- reusable selection --------------------------------------------------------


def test_reuse_interval_one_invokes_every_step():
    rng = np.random.default_rng(9)
    head = build_head(rng.standard_normal((512, 8)))
    state = None
    invocations = 0
    for step in range(8):
        _, state, invoked = reusable_select(
            state, step, rng.standard_normal(8), head.live_pages(),
            256, reuse_interval=1, page_size=64)
        invocations += invoked
    assert invocations == 8


@pytest.mark.parametrize("interval,steps,expected", [
    (4, 16, 4), (2, 16, 8), (8, 16, 2), (16, 16, 1), (3, 10, 4),
])
def test_invocations_are_ceil_t_over_c(interval, steps, expected):
    rng = np.random.default_rng(10)
    head = build_head(rng.standard_normal((512, 8)))
    q = rng.standard_normal(8)
    state = None
    invocations = 0
    for step in range(steps):
        _, state, invoked = reusable_select(
            state, step, q, head.live_pages(), 256, interval, 64)
        invocations += invoked
    assert invocations == expected


def test_within_chunk_returns_the_identical_object():
    rng = np.random.default_rng(11)
    head = build_head(rng.standard_normal((512, 8)))
    q = rng.standard_normal(8)
    pages0, state, invoked0 = reusable_select(
        None, 0, q, head.live_pages(), 256, 4, 64)
    assert invoked0
    for step in (1, 2, 3):
        pages, state, invoked = reusable_select(
            state, step, q, head.live_pages(), 256, 4, 64)
        assert not invoked
        assert pages is pages0
    pages4, state, invoked4 = reusable_select(
        state, 4, q, head.live_pages(), 256, 4, 64)
    assert invoked4


def test_stale_state_for_changed_budget_reruns_selection():
    rng = np.random.default_rng(12)
    head = build_head(rng.standard_normal((512, 8)))
    q = rng.standard_normal(8)
    _, state, _ = reusable_select(None, 0, q, head.live_pages(), 256, 4, 64)
    _, _, invoked = reusable_select(state, 1, q, head.live_pages(), 320, 4, 64)
    assert invoked
    assert isinstance(state, SelectionState)
