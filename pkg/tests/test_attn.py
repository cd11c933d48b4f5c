"""Attention core: oracle equivalences, online softmax, schedule handling."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsekv.attn import (SoftmaxState, Workload, blockwise_attention,
                           diagonal_tile, full_causal_schedule, gqa_map,
                           kv_tile_count, merge_block, query_tile_count,
                           reference_attention)


def scalar_attention(q, k, v, causal=True):
    """Independent O(N*S) oracle: plain Python loops, no vectorized math."""
    n, n_heads, dim = q.shape
    s, n_kv, _ = k.shape
    group = n_heads // n_kv
    out = np.zeros((n, n_heads, dim))
    for i in range(n):
        for h in range(n_heads):
            kv = h // group
            limit = (s - n + i) if causal else (s - 1)
            scores = []
            for j in range(limit + 1):
                acc = 0.0
                for c in range(dim):
                    acc += float(q[i, h, c]) * float(k[j, kv, c])
                scores.append(acc / math.sqrt(dim))
            peak = max(scores)
            weights = [math.exp(x - peak) for x in scores]
            denom = sum(weights)
            for j in range(limit + 1):
                w = weights[j] / denom
                for c in range(dim):
                    out[i, h, c] += w * float(v[j, kv, c])
    return out


def random_workload(rng, n, s, n_heads, n_kv, dim):
    return Workload(
        rng.standard_normal((n, n_heads, dim)),
        rng.standard_normal((s, n_kv, dim)),
        rng.standard_normal((s, n_kv, dim)),
    )


def full_schedules(w, tile_q, tile_k):
    return {
        (h, qt): full_causal_schedule(qt, tile_q, tile_k,
                                      w.num_queries, w.num_history)
        for h in range(w.num_heads)
        for qt in range(query_tile_count(w.num_queries, tile_q))
    }


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-300)


# -- gqa_map ----------------------------------------------------------------


def test_gqa_map_examples():
    assert gqa_map(13, 4) == 3
    assert gqa_map(5, 1) == 5


def test_gqa_map_matches_enumerated_table():
    n_heads, group = 24, 4
    table = []
    for kv in range(n_heads // group):
        table.extend([kv] * group)
    for h in range(n_heads):
        assert gqa_map(h, group) == table[h]


def test_gqa_map_rejects_bad_inputs():
    with pytest.raises(IndexError):
        gqa_map(-1, 4)
    with pytest.raises(ValueError):
        gqa_map(0, 0)


# -- Workload ----------------------------------------------------------------


def test_workload_validates_shapes_and_finiteness():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="multiple"):
        random_workload(rng, 4, 8, 3, 2, 4)
    q = rng.standard_normal((2, 2, 4))
    k = rng.standard_normal((4, 2, 4))
    v = k.copy()
    k_bad = k.copy()
    k_bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        Workload(q, k_bad, v)


# -- reference attention -------------------------------------------------------


def test_single_key_softmax_returns_value():
    q = np.ones((1, 1, 4))
    k = np.full((1, 1, 4), 2.0)
    v = np.arange(4.0).reshape(1, 1, 4)
    out = reference_attention(Workload(q, k, v))
    np.testing.assert_allclose(out[0, 0], v[0, 0])


def test_identical_keys_average_values():
    q = np.ones((1, 1, 2))
    k = np.ones((2, 1, 2))
    v = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
    out = reference_attention(Workload(q, k, v), causal=False)
    np.testing.assert_allclose(out[0, 0], [0.5, 0.5])


def test_reference_matches_scalar_loop_oracle():
    rng = np.random.default_rng(7)
    w = random_workload(rng, 64, 512, 2, 1, 8)
    got = reference_attention(w)
    want = scalar_attention(w.q, w.k, w.v)
    assert rel_err(got, want) <= 1e-12


def test_reference_rejects_short_history_in_causal_mode():
    rng = np.random.default_rng(1)
    w = random_workload(rng, 8, 4, 1, 1, 4)
    with pytest.raises(ValueError, match="history"):
        reference_attention(w)


# -- merge_block ----------------------------------------------------------------


def test_masked_block_is_a_no_op():
    rng = np.random.default_rng(3)
    state = SoftmaxState.initial(2, 4)
    state = merge_block(state, rng.standard_normal((2, 3)),
                        rng.standard_normal((3, 4)))
    before = (state.running_max.copy(), state.running_denominator.copy(),
              state.running_output.copy())
    masked = np.full((2, 5), -np.inf)
    after = merge_block(state, masked, rng.standard_normal((5, 4)))
    np.testing.assert_array_equal(after.running_max, before[0])
    np.testing.assert_array_equal(after.running_denominator, before[1])
    np.testing.assert_array_equal(after.running_output, before[2])


def test_masked_block_on_fresh_state_stays_empty():
    state = merge_block(SoftmaxState.initial(1, 2), np.full((1, 4), -np.inf),
                        np.ones((4, 2)))
    assert state.running_max[0] == -np.inf
    assert state.running_denominator[0] == 0.0
    with pytest.raises(ValueError, match="denominator"):
        state.finalize()


def test_one_token_blocks_equal_single_shot_softmax():
    rng = np.random.default_rng(11)
    s, dim = 200, 6
    scores = rng.standard_normal(s)
    values = rng.standard_normal((s, dim))
    state = SoftmaxState.initial(1, dim)
    for j in range(s):
        state = merge_block(state, scores[None, j:j + 1], values[j:j + 1])
    got = state.finalize()[0]
    weights = np.exp(scores - scores.max())
    want = weights @ values / weights.sum()
    assert rel_err(got, want) <= 1e-12


def test_block_sequence_equals_concatenated_block():
    rng = np.random.default_rng(13)
    dim = 5
    blocks = [rng.standard_normal((2, t)) for t in (7, 3, 9)]
    values = [rng.standard_normal((t, dim)) for t in (7, 3, 9)]
    state = SoftmaxState.initial(2, dim)
    for sc, val in zip(blocks, values):
        state = merge_block(state, sc, val)
    merged = state.finalize()
    single = merge_block(SoftmaxState.initial(2, dim),
                         np.concatenate(blocks, axis=1),
                         np.concatenate(values, axis=0)).finalize()
    assert rel_err(merged, single) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8),
       st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_running_max_never_decreases(first, second):
    dim = 3
    state = SoftmaxState.initial(1, dim)
    state = merge_block(state, np.array([first]), np.ones((len(first), dim)))
    m1 = state.running_max[0]
    state = merge_block(state, np.array([second]), np.ones((len(second), dim)))
    assert state.running_max[0] >= m1
    assert state.running_denominator[0] > 0


def test_merge_block_rejects_nan_and_posinf():
    state = SoftmaxState.initial(1, 2)
    with pytest.raises(ValueError):
        merge_block(state, np.array([[np.nan]]), np.ones((1, 2)))
    with pytest.raises(ValueError):
        merge_block(state, np.array([[np.inf]]), np.ones((1, 2)))


# -- blockwise attention -----------------------------------------------------


@pytest.mark.parametrize("n,s,n_heads,n_kv,dim,tile_q,tile_k", [
    (64, 64, 2, 1, 16, 16, 16),
    (100, 160, 2, 2, 8, 64, 64),    # ragged tiles, misaligned history
    (33, 517, 4, 2, 8, 16, 32),     # straddling causal boundaries
    (1, 130, 1, 1, 8, 1, 64),       # decode shape
])
def test_full_schedule_matches_reference(n, s, n_heads, n_kv, dim, tile_q, tile_k):
    rng = np.random.default_rng(19)
    w = random_workload(rng, n, s, n_heads, n_kv, dim)
    schedules = full_schedules(w, tile_q, tile_k)
    oracle = reference_attention(w)
    out64, _ = blockwise_attention(w, schedules, tile_q, tile_k)
    assert rel_err(out64, oracle) <= 1e-10
    out32, _ = blockwise_attention(w.astype(np.float32), schedules,
                                   tile_q, tile_k)
    assert rel_err(out32.astype(np.float64), oracle) <= 1e-5


def restricted_attention_oracle(w, schedules, tile_q, tile_k):
    """Direct softmax over the union of scheduled tiles, per query row."""
    n, s = w.num_queries, w.num_history
    out = np.zeros((n, w.num_heads, w.head_dim))
    for h in range(w.num_heads):
        kv = h // w.group_size
        for i in range(n):
            tiles = list(schedules[(h, i // tile_q)])
            position = s - n + i
            cols = [
                c for t in tiles
                for c in range(t * tile_k, min(s, (t + 1) * tile_k))
                if c <= position
            ]
            scores = w.k[cols, kv, :] @ w.q[i, h, :] / math.sqrt(w.head_dim)
            weights = np.exp(scores - scores.max())
            weights /= weights.sum()
            out[i, h, :] = weights @ w.v[cols, kv, :]
    return out


def test_random_partial_schedules_match_restricted_oracle():
    rng = np.random.default_rng(17)
    n, s, tile_q, tile_k = 50, 175, 16, 32
    w = random_workload(rng, n, s, 2, 1, 8)
    schedules = {}
    for h in range(2):
        for qt in range(query_tile_count(n, tile_q)):
            diag = diagonal_tile(qt, tile_q, tile_k, n, s)
            chosen = [t for t in range(diag) if rng.random() < 0.5] + [diag]
            schedules[(h, qt)] = chosen
    out, ledger = blockwise_attention(w, schedules, tile_q, tile_k)
    oracle = restricted_attention_oracle(w, schedules, tile_q, tile_k)
    assert rel_err(out, oracle) <= 1e-10
    assert ledger.visited() == sum(len(t) for t in schedules.values())


def test_last_tile_only_equals_restricted_oracle():
    rng = np.random.default_rng(23)
    tile_k, s = 64, 640
    w = random_workload(rng, 1, s, 1, 1, 8)
    out, ledger = blockwise_attention(w, {(0, 0): [s // tile_k - 1]}, 1, tile_k)
    tail = Workload(w.q, w.k[-tile_k:], w.v[-tile_k:])
    np.testing.assert_allclose(out, reference_attention(tail), rtol=1e-10)
    assert ledger.visited() == 1


def test_schedule_validation_errors():
    rng = np.random.default_rng(29)
    w = random_workload(rng, 8, 8, 1, 1, 4)
    with pytest.raises(ValueError, match="outside"):
        blockwise_attention(w, {(0, 0): [0, 99]}, 8, 4)
    with pytest.raises(ValueError, match="ascending"):
        blockwise_attention(w, {(0, 0): [1, 0]}, 8, 4)
    with pytest.raises(ValueError, match="most recent"):
        blockwise_attention(w, {(0, 0): [0]}, 8, 4)


def test_removing_a_tile_drops_visited_count_by_one():
    rng = np.random.default_rng(31)
    w = random_workload(rng, 64, 64, 1, 1, 8)
    tile = 16
    schedules = full_schedules(w, tile, tile)
    _, full = blockwise_attention(w, schedules, tile, tile)
    trimmed = dict(schedules)
    trimmed[(0, 3)] = [0, 2, 3]  # drop tile 1 from the last query tile
    _, less = blockwise_attention(w, trimmed, tile, tile)
    assert full.visited() - less.visited() == 1
    assert full.total() == less.total()


def test_gqa_blockwise_bitwise_matches_replicated_kv():
    rng = np.random.default_rng(37)
    n, s, dim, tile = 32, 64, 8, 16
    w = random_workload(rng, n, s, 4, 2, dim)
    replicated = Workload(w.q, np.repeat(w.k, 2, axis=1),
                          np.repeat(w.v, 2, axis=1))
    schedules = full_schedules(w, tile, tile)
    out_grouped, _ = blockwise_attention(w, schedules, tile, tile)
    out_mha, _ = blockwise_attention(replicated, schedules, tile, tile)
    np.testing.assert_array_equal(out_grouped, out_mha)


def test_softmax_denominator_matches_attended_weights():
    rng = np.random.default_rng(41)
    tile = 16
    w = random_workload(rng, 1, 96, 1, 1, 8)
    schedule = [0, 2, 5]
    state = SoftmaxState.initial(1, 8)
    scale = 1 / math.sqrt(8)
    for t in schedule:
        scores = (w.q[0:1, 0, :] @ w.k[t * tile:(t + 1) * tile, 0, :].T) * scale
        state = merge_block(state, scores, w.v[t * tile:(t + 1) * tile, 0, :])
    attended = np.concatenate(
        [(w.q[0:1, 0, :] @ w.k[t * tile:(t + 1) * tile, 0, :].T) * scale
         for t in schedule], axis=1)
    recomputed = np.exp(attended - state.running_max[0]).sum()
    assert abs(recomputed - state.running_denominator[0]) <= 1e-12 * recomputed
    # implied weights sum to one by construction of the denominator
    weights = np.exp(attended - state.running_max[0]) / state.running_denominator[0]
    assert abs(weights.sum() - 1.0) <= 1e-12


def test_ten_of_twentyone_mask_reports_exact_speedup():
    rng = np.random.default_rng(43)
    tile = 16
    w = random_workload(rng, 6 * tile, 6 * tile, 1, 1, 8)
    schedules = {(0, 0): [0], (0, 1): [0, 1], (0, 2): [1, 2],
                 (0, 3): [3], (0, 4): [3, 4], (0, 5): [4, 5]}
    _, ledger = blockwise_attention(w, schedules, tile, tile)
    assert ledger.visited() == 10
    assert ledger.total() == 21
    assert ledger.speedup() == 2.1


def test_tile_geometry_helpers():
    assert kv_tile_count(130, 64) == 3
    assert diagonal_tile(0, 64, 64, 64, 64) == 0
    assert diagonal_tile(1, 64, 64, 100, 132) == 2
    assert list(full_causal_schedule(1, 16, 16, 64, 64)) == [0, 1]
