"""Ablation sweeps: recall, tile speedup, and selector-invocation accounting.

Every metric row carries a brute-force or closed-form oracle computed
independently of the code path under test.  Sweep points are independent
and may run in parallel (``SPARSEKV_THREADS``); rows are ordered by
(axis value, metric) before writing regardless of execution order.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np

from .attn import kv_tile_count
from .cache import HeadPages
from .engine import DECODE, Engine, EngineConfig
from .heads import RETRIEVAL, STREAMING, HeadProfile, classify_heads
from .report import ResultRow, config_echo
from .selector import exact_top_k_pages, select_pages
from .workloads import CLUSTERED, WorkloadSpec, gen_workload

AXES = ("page_size", "budget", "reuse_interval", "sparsity")


def thread_count() -> int:
    raw = os.environ.get("SPARSEKV_THREADS", "1")
    try:
        count = int(raw)
    except ValueError as exc:
        raise ValueError(f"SPARSEKV_THREADS must be an integer, got {raw!r}") from exc
    return max(count, 1)


# ---------------------------------------------------------------------------
# recall machinery (shared with the verification suite)
# ---------------------------------------------------------------------------


def clustered_recall(
    budgets: Sequence[int],
    trials: int,
    seed: int,
    num_history: int = 2048,
    dim: int = 16,
    cluster_span: int = 2,
    margin: float = 0.75,
    schemes: Sequence[tuple[str, int, int]] = (
        ("hierarchical", 64, 16),
        ("flat_coarse", 64, 64),
        ("flat_fine", 16, 16),
    ),
) -> dict[int, dict[str, float]]:
    """Token-level selection recall of each paging scheme, per budget.

    Needles are clustered so their exact scores beat every background
    logical-page box; schemes are (name, physical page, logical page).
    The ``oracle`` entry ranks pages by exact token scores at page size 64.

    Returns:
        ``{budget: {scheme_name: recall, "oracle": recall}}``.
    """
    totals = {b: {name: 0.0 for name, _, _ in schemes} | {"oracle": 0.0}
              for b in budgets}
    planted_total = 0
    for i in range(trials):
        spec = WorkloadSpec(
            kind=CLUSTERED, num_history=num_history, num_queries=1,
            num_heads=1, num_kv_heads=1, head_dim=dim,
            needle_margin=margin, cluster_span=cluster_span,
            physical_page=64, logical_page=16, seed=seed * trials + i)
        w, truth = gen_workload(spec)
        q = w.q[-1, 0, :]
        keys = w.k[:, 0, :]
        heads = {}
        for name, page, logical in schemes:
            head = HeadPages(0, page, logical, bits=None, with_stats=True)
            head.append(keys, w.v[:, 0, :])
            heads[name] = (head, page)
        planted_total += len(truth.needle_positions)
        for budget in budgets:
            for name, page, _logical in schemes:
                head, _ = heads[name]
                selected = set(select_pages(q, head.live_pages(), budget, page))
                covered = sum(
                    pos // page in selected for pos in truth.needle_positions)
                totals[budget][name] += covered
            oracle = set(exact_top_k_pages(q, keys, budget, 64))
            totals[budget]["oracle"] += sum(
                pos // 64 in oracle for pos in truth.needle_positions)
    return {
        b: {name: count / planted_total for name, count in by_scheme.items()}
        for b, by_scheme in totals.items()
    }


# ---------------------------------------------------------------------------
# decode accounting with an independent recount
# ---------------------------------------------------------------------------


def _mask_membership_count(seq_tiles: int, sink: int, local: int) -> int:
    """Brute-force scan of the sink+local mask over all tiles."""
    diag = seq_tiles - 1
    return sum(
        1 for t in range(seq_tiles)
        if t < sink or diag - local < t <= diag
    )


def _decode_speedup(cfg: EngineConfig, profiles: list[HeadProfile],
                    num_history: int, steps: int, dim: int,
                    seed: int) -> tuple[float, float, int]:
    """(ledger speedup, independently recounted speedup, selector invocations)."""
    rng = np.random.default_rng([17, seed])
    num_kv = 1
    engine = Engine(cfg, profiles)
    engine.load_context(
        rng.standard_normal((num_history, num_kv, dim)),
        rng.standard_normal((num_history, num_kv, dim)))
    for _ in range(steps):
        engine.decode_step(
            rng.standard_normal((len(profiles), dim)),
            rng.standard_normal((num_kv, dim)),
            rng.standard_normal((num_kv, dim)))
    measured = engine.ledger.speedup(DECODE)

    # Recount from first principles: page counts per step, mask membership
    # for streaming heads, budget arithmetic for dense heads.
    k = -(-cfg.budget_tokens // cfg.physical_page)
    visited = total = 0
    for t in range(steps):
        pages = kv_tile_count(num_history + t, cfg.physical_page)
        for p in profiles:
            total += pages
            if p.role == RETRIEVAL:
                visited += min(k, pages)
            else:
                visited += _mask_membership_count(
                    pages, p.sink_blocks, p.local_blocks)
    oracle = total / visited
    return measured, oracle, engine.ledger.total_selector_invocations


# ---------------------------------------------------------------------------
# sweep points
# ---------------------------------------------------------------------------


def _point_budget(value: int, cfg: EngineConfig, trials: int,
                  echo: str) -> list[ResultRow]:
    budget = int(value)
    if budget < cfg.physical_page:
        raise ValueError(
            f"budget {budget} is below one physical page ({cfg.physical_page})")
    table = clustered_recall([budget], trials=trials, seed=cfg.seed)[budget]
    point = EngineConfig(**{**cfg.to_dict(), "budget_tokens": budget})
    measured, oracle_speedup, _ = _decode_speedup(
        point, [HeadProfile(0, 1.0, RETRIEVAL)], num_history=4096,
        steps=8, dim=16, seed=cfg.seed)
    name = f"budget={budget}"
    return [
        ResultRow(name, echo, "needle_recall", table["hierarchical"],
                  table["oracle"],
                  table["hierarchical"] >= table["oracle"] - 0.02),
        ResultRow(name, echo, "tile_speedup", measured, oracle_speedup,
                  abs(measured - oracle_speedup) <= 1e-9 * oracle_speedup),
    ]


def _point_page_size(value: int, cfg: EngineConfig, trials: int,
                     echo: str) -> list[ResultRow]:
    page = int(value)
    logical = 16 if page % 16 == 0 else page
    schemes = (
        ("hierarchical", page, min(logical, page)),
        ("flat_coarse", page, page),
    )
    # Size the history so the budget keeps real selection pressure.
    history = max(2048, 8 * cfg.budget_tokens)
    table = clustered_recall(
        [cfg.budget_tokens], trials=trials, seed=cfg.seed,
        num_history=history, schemes=schemes)[cfg.budget_tokens]
    name = f"page_size={page}"
    hier, flat = table["hierarchical"], table["flat_coarse"]
    return [
        ResultRow(name, echo, "recall_hierarchical", hier, table["oracle"],
                  hier >= table["oracle"] - 0.02),
        ResultRow(name, echo, "recall_flat", flat, table["oracle"],
                  flat <= hier + 1e-12),
        ResultRow(name, echo, "hier_minus_flat", hier - flat, 0.0,
                  hier - flat >= -1e-12),
    ]


def _point_reuse(value: int, cfg: EngineConfig, steps: int,
                 echo: str) -> list[ResultRow]:
    interval = int(value)
    point = EngineConfig(**{**cfg.to_dict(), "reuse_interval": interval})
    _, _, invocations = _decode_speedup(
        point, [HeadProfile(0, 1.0, RETRIEVAL)], num_history=2048,
        steps=steps, dim=16, seed=cfg.seed)
    oracle = math.ceil(steps / interval)
    name = f"reuse_interval={interval}"
    return [
        ResultRow(name, echo, "selector_invocations", invocations, oracle,
                  invocations == oracle),
    ]


def _point_sparsity(value: float, cfg: EngineConfig, num_heads: int,
                    echo: str) -> list[ResultRow]:
    sparsity = float(value)
    rng = np.random.default_rng([23, cfg.seed])
    gates = rng.uniform(0, 1, num_heads).tolist()
    profiles = classify_heads(gates, sparsity, cfg.sink_blocks,
                              cfg.local_blocks)
    measured, oracle, _ = _decode_speedup(
        cfg, profiles, num_history=4096, steps=8, dim=16, seed=cfg.seed)
    streaming = sum(p.role == STREAMING for p in profiles)
    expected = num_heads - math.ceil((1 - sparsity) * num_heads - 1e-12)
    name = f"sparsity={sparsity}"
    return [
        ResultRow(name, echo, "tile_speedup", measured, oracle,
                  abs(measured - oracle) <= 1e-9 * oracle),
        ResultRow(name, echo, "streaming_heads", streaming, expected,
                  streaming == expected),
    ]


def run_sweep(axis: str, values: Sequence[float], cfg: EngineConfig,
              trials: int = 100, decode_steps: int = 64,
              num_heads: int = 8) -> list[ResultRow]:
    """One block of oracle-checked rows per axis value, deterministically ordered."""
    if axis not in AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {AXES}")
    if not values:
        raise ValueError("sweep needs at least one value")
    echo = config_echo(cfg.to_dict())

    def point(value) -> list[ResultRow]:
        if axis == "budget":
            return _point_budget(value, cfg, trials, echo)
        if axis == "page_size":
            return _point_page_size(value, cfg, trials, echo)
        if axis == "reuse_interval":
            return _point_reuse(value, cfg, decode_steps, echo)
        return _point_sparsity(value, cfg, num_heads, echo)

    workers = thread_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(point, values))
    else:
        blocks = [point(v) for v in values]
    rows = [row for block in blocks for row in block]
    rows.sort(key=lambda r: (float(r.experiment.split("=", 1)[1]), r.metric))
    return rows
