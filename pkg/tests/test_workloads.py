"""Workload generator: determinism, needle planting, ground truth."""

import numpy as np
import pytest

from sparsekv.workloads import (CLUSTERED, NEEDLE, RANDOM, WorkloadSpec,
                                gen_workload)


def test_same_spec_is_bitwise_identical():
    spec = WorkloadSpec(kind=NEEDLE, num_history=512, seed=42)
    w1, t1 = gen_workload(spec)
    w2, t2 = gen_workload(spec)
    np.testing.assert_array_equal(w1.q, w2.q)
    np.testing.assert_array_equal(w1.k, w2.k)
    np.testing.assert_array_equal(w1.v, w2.v)
    assert t1 == t2


def test_random_kind_has_no_ground_truth():
    _, truth = gen_workload(WorkloadSpec(kind=RANDOM, seed=1))
    assert truth.needle_positions == ()
    assert truth.needle_pages == ()


def test_needle_is_the_exact_score_argmax():
    for seed in range(20):
        spec = WorkloadSpec(kind=NEEDLE, num_history=512, head_dim=16,
                            needle_margin=0.5, seed=seed)
        w, truth = gen_workload(spec)
        scores = w.k[:, 0, :] @ w.q[-1, 0, :]
        assert int(np.argmax(scores)) == truth.needle_positions[0]
        others = np.delete(scores, truth.needle_positions[0])
        assert scores[truth.needle_positions[0]] >= others.max() + 0.5


def test_needle_page_ground_truth_matches_position():
    spec = WorkloadSpec(kind=NEEDLE, num_history=1024, physical_page=64, seed=3)
    _, truth = gen_workload(spec)
    assert truth.needle_pages == (truth.needle_positions[0] // 64,)
    assert 0 < truth.needle_pages[0] < (1024 // 64) - 2  # avoids pinned pages


def test_clustered_span_one_shares_one_physical_page():
    spec = WorkloadSpec(kind=CLUSTERED, num_history=1024, cluster_span=1,
                        physical_page=64, logical_page=16, seed=4)
    _, truth = gen_workload(spec)
    assert len(truth.needle_positions) == 4  # one per logical page
    assert len(truth.needle_pages) == 1
    logical_pages = {p // 16 for p in truth.needle_positions}
    assert len(logical_pages) == 4


def test_clustered_needles_beat_background_logical_boxes():
    spec = WorkloadSpec(kind=CLUSTERED, num_history=2048, cluster_span=2,
                        head_dim=16, needle_margin=0.75, seed=5)
    w, truth = gen_workload(spec)
    q = w.q[-1, 0, :]
    keys = w.k[:, 0, :]
    needle_logical = {p // 16 for p in truth.needle_positions}
    needle_score = min(float(q @ keys[p]) for p in truth.needle_positions)
    for l in range(2048 // 16):
        if l in needle_logical:
            continue
        chunk = keys[l * 16:(l + 1) * 16]
        box = float(np.maximum(q * chunk.max(0), q * chunk.min(0)).sum())
        assert needle_score >= box + 0.75 - 1e-9


def test_gqa_needles_dominate_under_group_max():
    spec = WorkloadSpec(kind=NEEDLE, num_history=512, num_heads=4,
                        num_kv_heads=2, head_dim=16, needle_margin=1.0, seed=6)
    w, truth = gen_workload(spec)
    pos = truth.needle_positions[0]
    for kv in range(2):
        group_q = w.q[-1, kv * 2:(kv + 1) * 2, :]
        scores = (group_q @ w.k[:, kv, :].T).max(axis=0)
        assert int(np.argmax(scores)) == pos


def test_margin_and_spec_validation():
    with pytest.raises(ValueError, match="positive"):
        gen_workload(WorkloadSpec(kind=NEEDLE, needle_margin=0.0))
    with pytest.raises(ValueError, match="unknown workload kind"):
        WorkloadSpec(kind="surprise")
    with pytest.raises(ValueError, match="divide"):
        WorkloadSpec(physical_page=64, logical_page=24)
    with pytest.raises(ValueError, match="no full page"):
        gen_workload(WorkloadSpec(kind=NEEDLE, num_history=32,
                                  physical_page=64))


def test_spec_json_roundtrip(tmp_path):
    import json

    spec = WorkloadSpec(kind=CLUSTERED, num_history=256, seed=9)
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec.to_dict()))
    assert WorkloadSpec.from_json(path) == spec
