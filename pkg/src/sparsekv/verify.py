"""The verification suite: every acceptance check, with its oracle, as rows.

Each check pits a mechanism against an independent reference (scalar or
dense oracle, brute-force enumeration, exact-score ranking, or a closed
form) and emits :class:`ResultRow` records.  ``run_verify`` executes all
checks twice to also certify byte-identical CSV output, and reports
pass/fail per criterion.

Conventions: for equality-style metrics the ``oracle`` column holds the
expected value; for error-style metrics (names ending in ``_err`` or
``violations``) it holds the tolerance bound and the row passes when
``value <= oracle``.
"""

from __future__ import annotations

import math

import numpy as np

from . import attn, sweeps
from .attn import Workload
from .cache import HeadPages, quantize_page, dequantize_codes
from .engine import DECODE, Engine, EngineConfig
from .heads import RETRIEVAL, STREAMING, HeadProfile, classify_heads, gate_threshold
from .report import ResultRow, config_echo, rows_to_csv
from .selector import exact_top_k_pages, select_pages
from .workloads import NEEDLE, WorkloadSpec, gen_workload


def _rng(seed: int, criterion: int) -> np.random.Generator:
    return np.random.default_rng([criterion, seed])


def _rel_err(result: np.ndarray, oracle: np.ndarray) -> float:
    scale = max(float(np.abs(oracle).max()), 1e-300)
    return float(np.abs(result - oracle).max()) / scale


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------


def check_worked_speedup(cfg: EngineConfig) -> list[ResultRow]:
    """C01: a 10-of-21-tile schedule reports speedup 2.1 exactly."""
    echo = config_echo(cfg.to_dict())
    tile = 16
    n = s = 6 * tile
    rng = _rng(cfg.seed, 1)
    w = Workload(
        rng.standard_normal((n, 1, 8)),
        rng.standard_normal((s, 1, 8)),
        rng.standard_normal((s, 1, 8)),
    )
    visited_per_tile = {0: [0], 1: [0, 1], 2: [1, 2], 3: [3], 4: [3, 4], 5: [4, 5]}
    schedules = {(0, qt): tiles for qt, tiles in visited_per_tile.items()}
    _, ledger = attn.blockwise_attention(w, schedules, tile, tile)
    speedup = ledger.speedup()
    return [
        ResultRow("C01_worked_speedup", echo, "visited_tiles",
                  ledger.visited(), 10, ledger.visited() == 10),
        ResultRow("C01_worked_speedup", echo, "total_tiles",
                  ledger.total(), 21, ledger.total() == 21),
        ResultRow("C01_worked_speedup", echo, "speedup",
                  speedup, 2.1, speedup == 21 / 10),
    ]


def check_speedup_law(cfg: EngineConfig) -> list[ResultRow]:
    """C02: random tile skips at fraction r give speedup 1/(1-r) up to 1 tile."""
    echo = config_echo(cfg.to_dict())
    rows = []
    s, tile = 65536, 64
    total = attn.kv_tile_count(s, tile)
    rng = _rng(cfg.seed, 2)
    w = Workload(
        rng.standard_normal((1, 1, 16)),
        rng.standard_normal((s, 1, 16)),
        rng.standard_normal((s, 1, 16)),
    )
    diag = total - 1
    for r in (0.25, 0.5, 0.75, 0.9):
        n_skip = round(r * total)
        skippable = rng.permutation(diag)[:n_skip]  # never skip the diagonal
        keep = sorted(set(range(total)) - set(int(t) for t in skippable))
        _, ledger = attn.blockwise_attention(w, {(0, 0): keep}, 1, tile)
        visited = ledger.visited()
        speedup = ledger.speedup()
        oracle = 1.0 / (1.0 - r)
        # one tile of rounding freedom in the realized skip count
        tol = total / max(visited - 1, 1) - total / visited
        ok = (
            abs(visited - (1.0 - r) * total) <= 1.0
            and speedup == total / visited
            and abs(speedup - oracle) <= tol
        )
        rows.append(ResultRow("C02_speedup_law", echo,
                              f"speedup[r={r}]", speedup, oracle, ok))
    return rows


def check_dense_equivalence(cfg: EngineConfig) -> list[ResultRow]:
    """C03: full-schedule blockwise attention matches the dense oracle."""
    echo = config_echo(cfg.to_dict())
    rng = _rng(cfg.seed, 3)
    cases = [
        (128, 8192, 2, 1, 32),   # largest stated extent
        (97, 4097, 4, 2, 16),    # ragged tiles, misaligned history
        (128, 8192, 4, 2, 64),
        (64, 6000, 2, 2, 32),
        (128, 7777, 1, 1, 8),
    ]
    while len(cases) < 100:
        n = int(rng.integers(1, 129))
        extra = int(rng.integers(0, 1 + 2 ** int(rng.integers(0, 12))))
        s = min(n + extra, 8192)
        h = int(rng.choice([1, 2, 4]))
        h_kv = int(rng.choice([d for d in (1, 2, 4) if h % d == 0]))
        d = int(rng.choice([8, 16, 32, 64]))
        cases.append((n, s, h, h_kv, d))

    worst32 = worst64 = 0.0
    tile_q, tile_k = 64, 64
    for n, s, h, h_kv, d in cases:
        w = Workload(
            rng.standard_normal((n, h, d)),
            rng.standard_normal((s, h_kv, d)),
            rng.standard_normal((s, h_kv, d)),
        )
        schedules = {
            (head, qt): attn.full_causal_schedule(qt, tile_q, tile_k, n, s)
            for head in range(h)
            for qt in range(attn.query_tile_count(n, tile_q))
        }
        oracle = attn.reference_attention(w)
        out64, _ = attn.blockwise_attention(w, schedules, tile_q, tile_k)
        out32, _ = attn.blockwise_attention(
            w.astype(np.float32), schedules, tile_q, tile_k)
        worst64 = max(worst64, _rel_err(out64, oracle))
        worst32 = max(worst32, _rel_err(out32.astype(np.float64), oracle))
    return [
        ResultRow("C03_dense_equivalence", echo, "workloads",
                  len(cases), 100, len(cases) >= 100),
        ResultRow("C03_dense_equivalence", echo, "max_rel_err_f32",
                  worst32, 1e-5, worst32 <= 1e-5),
        ResultRow("C03_dense_equivalence", echo, "max_rel_err_f64",
                  worst64, 1e-10, worst64 <= 1e-10),
    ]


def check_score_soundness(cfg: EngineConfig) -> list[ResultRow]:
    """C04: the box score never undercuts the exact q.k of a contained key."""
    echo = config_echo(cfg.to_dict())
    rng = _rng(cfg.seed, 4)
    n_pages, page_tokens, dim, n_queries = 2000, 16, 16, 50
    keys = rng.standard_normal((n_pages, page_tokens, dim))
    # Mix in heavy-tailed pages so the bounds are exercised off-center.
    keys[: n_pages // 4] *= rng.uniform(1, 8, (n_pages // 4, 1, 1))
    queries = rng.standard_normal((n_queries, dim))
    lo = keys.min(axis=1)
    hi = keys.max(axis=1)

    violations = 0
    triples = 0
    for q in queries:
        box = np.maximum(q * hi, q * lo).sum(axis=1)  # [pages]
        exact = (keys * q).sum(axis=2)  # [pages, tokens], same sum order
        violations += int((exact > box[:, None]).sum())
        triples += exact.size
    return [
        ResultRow("C04_score_soundness", echo, "sampled_triples",
                  triples, 1_000_000, triples >= 1_000_000),
        ResultRow("C04_score_soundness", echo, "violations",
                  violations, 0, violations == 0),
    ]


def check_constant_decode_cost(cfg: EngineConfig) -> list[ResultRow]:
    """C05: per-step visited tiles are flat in S for both head kinds."""
    echo = config_echo(cfg.to_dict())
    rng = _rng(cfg.seed, 5)
    rows = []
    dim = 32
    base = EngineConfig(physical_page=64, logical_page=16, quant_bits=4,
                        budget_tokens=4096, reuse_interval=4, seed=cfg.seed)
    profiles = [
        HeadProfile(0, 0.9, RETRIEVAL),
        HeadProfile(1, 0.1, STREAMING, sink_blocks=1, local_blocks=2),
    ]
    for s in (16384, 32768, 65536):
        engine = Engine(base, profiles)
        engine.load_context(
            rng.standard_normal((s, 2, dim)), rng.standard_normal((s, 2, dim)))
        dense_counts, stream_counts = set(), set()
        for _ in range(4):
            before = {
                h: engine.ledger.tiles.get((DECODE, h), [0, 0])[0]
                for h in (0, 1)
            }
            engine.decode_step(
                rng.standard_normal((2, dim)).astype(np.float32),
                rng.standard_normal((2, dim)).astype(np.float32),
                rng.standard_normal((2, dim)).astype(np.float32),
            )
            dense_counts.add(engine.ledger.tiles[(DECODE, 0)][0] - before[0])
            stream_counts.add(engine.ledger.tiles[(DECODE, 1)][0] - before[1])
        rows.append(ResultRow(
            "C05_constant_decode", echo, f"dense_visited[S={s}]",
            max(dense_counts), 64,
            dense_counts == {64}))
        rows.append(ResultRow(
            "C05_constant_decode", echo, f"streaming_visited[S={s}]",
            max(stream_counts), 3,
            max(stream_counts) <= 3))
    return rows


def check_needle_recall(cfg: EngineConfig) -> list[ResultRow]:
    """C06: box-dominant needles are always selected, matching the oracle."""
    echo = config_echo(cfg.to_dict())
    trials = 10_000
    hits = oracle_hits = agreements = 0
    for i in range(trials):
        spec = WorkloadSpec(
            kind=NEEDLE, num_history=512, num_queries=1, num_heads=1,
            num_kv_heads=1, head_dim=16, needle_margin=0.5,
            physical_page=64, logical_page=16, seed=cfg.seed * trials + i)
        w, truth = gen_workload(spec)
        head = HeadPages(0, 64, 16, bits=None, with_stats=True)
        head.append(w.k[:, 0, :], w.v[:, 0, :])
        q = w.q[-1, 0, :]
        selected = set(select_pages(q, head.live_pages(), 256, 64))
        oracle = set(exact_top_k_pages(q, w.k[:, 0, :], 256, 64))
        needle = truth.needle_pages[0]
        hit = needle in selected
        oracle_hit = needle in oracle
        hits += hit
        oracle_hits += oracle_hit
        agreements += hit == oracle_hit
    recall = hits / trials
    oracle_recall = oracle_hits / trials
    return [
        ResultRow("C06_needle_recall", echo, "trials", trials, 10_000,
                  trials >= 10_000),
        ResultRow("C06_needle_recall", echo, "recall", recall, oracle_recall,
                  recall == 1.0 and oracle_recall == 1.0),
        ResultRow("C06_needle_recall", echo, "oracle_agreement",
                  agreements / trials, 1.0, agreements == trials),
    ]


def check_hierarchical_benefit(cfg: EngineConfig) -> list[ResultRow]:
    """C07: hierarchical paging beats flat page-64 and tracks flat page-16."""
    echo = config_echo(cfg.to_dict())
    budgets = (320, 384, 512, 768)
    table = sweeps.clustered_recall(budgets, trials=200, seed=cfg.seed)
    rows = []
    for budget in budgets:
        hier = table[budget]["hierarchical"]
        flat64 = table[budget]["flat_coarse"]
        flat16 = table[budget]["flat_fine"]
        oracle = table[budget]["oracle"]
        rows.append(ResultRow(
            "C07_hierarchical_benefit", echo,
            f"hier_recall[budget={budget}]", hier, oracle,
            abs(hier - oracle) <= 0.02))
        rows.append(ResultRow(
            "C07_hierarchical_benefit", echo,
            f"hier_minus_flat64[budget={budget}]", hier - flat64, 0.0,
            hier - flat64 >= -1e-12))
        rows.append(ResultRow(
            "C07_hierarchical_benefit", echo,
            f"hier_vs_flat16_gap[budget={budget}]", abs(hier - flat16), 0.02,
            abs(hier - flat16) <= 0.02))
    return rows


def check_reuse_accounting(cfg: EngineConfig) -> list[ResultRow]:
    """C08: T decode steps trigger exactly ceil(T / C) selector invocations."""
    echo = config_echo(cfg.to_dict())
    rng = _rng(cfg.seed, 8)
    rows = []
    dim, s, t_steps = 16, 1024, 16
    k_hist = rng.standard_normal((s, 1, dim))
    v_hist = rng.standard_normal((s, 1, dim))
    for c in (1, 2, 4, 8, 16):
        base = EngineConfig(physical_page=64, logical_page=16, quant_bits=4,
                            budget_tokens=256, reuse_interval=c, seed=cfg.seed)
        engine = Engine(base, [HeadProfile(0, 1.0, RETRIEVAL)])
        engine.load_context(k_hist, v_hist)
        for _ in range(t_steps):
            engine.decode_step(
                rng.standard_normal((1, dim)),
                rng.standard_normal((1, dim)),
                rng.standard_normal((1, dim)),
            )
        invocations = engine.ledger.selector_invocations[0]
        oracle = math.ceil(t_steps / c)
        rows.append(ResultRow(
            "C08_reuse_accounting", echo, f"invocations[C={c}]",
            invocations, oracle, invocations == oracle))
    return rows


def check_quantization_bound(cfg: EngineConfig) -> list[ResultRow]:
    """C09: reconstruction error stays within scale/2 (+1 ulp) per channel."""
    echo = config_echo(cfg.to_dict())
    rng = _rng(cfg.seed, 9)
    rows = []
    n_pages, tokens, dim = 100_000, 16, 4
    for bits in (4, 8):
        violations = 0
        for _ in range(n_pages // 5000):
            batch = rng.standard_normal((5000, tokens, dim))
            batch *= rng.uniform(0.1, 10, (5000, 1, 1))
            for page in batch:
                codes, scale, zero = quantize_page(page, bits)
                err = np.abs(dequantize_codes(codes, scale, zero) - page)
                bound = scale / 2 * (1 + 1e-12) + np.spacing(
                    np.abs(page).max(axis=0))
                violations += int((err > bound[None, :]).sum())
        rows.append(ResultRow(
            "C09_quantization_bound", echo, f"bound_violations[b={bits}]",
            violations, 0, violations == 0))
        rows.append(ResultRow(
            "C09_quantization_bound", echo, f"pages_checked[b={bits}]",
            n_pages, 100_000, n_pages >= 100_000))
    constant = np.full((32, 8), 3.25)
    codes, scale, zero = quantize_page(constant, 4)
    exact = float(np.abs(dequantize_codes(codes, scale, zero) - constant).max())
    rows.append(ResultRow(
        "C09_quantization_bound", echo, "constant_page_err", exact, 0.0,
        exact == 0.0))
    return rows


def check_head_classification(cfg: EngineConfig) -> list[ResultRow]:
    """C10: half-sparsity splits heads at the median gate, rank-invariantly."""
    echo = config_echo(cfg.to_dict())
    rng = _rng(cfg.seed, 10)
    rows = []
    for n_heads in (9, 16):
        gates = rng.uniform(0, 1, n_heads).tolist()
        profiles = classify_heads(gates, 0.5)
        n_retrieval = sum(p.role == RETRIEVAL for p in profiles)
        expected = math.ceil(n_heads / 2)
        tau = gate_threshold(gates, 0.5)
        tau_expected = sorted(gates)[n_heads - expected]
        base_partition = tuple(p.role for p in profiles)
        invariant = all(
            tuple(p.role for p in classify_heads(
                [transform(g) for g in gates], 0.5)) == base_partition
            for transform in (
                lambda g: g * g,
                math.sqrt,
                lambda g: g / (1.0 + g) * 2.0 if g <= 1 else 1.0,
            )
        )
        rows.append(ResultRow(
            "C10_head_classification", echo, f"retrieval_heads[H={n_heads}]",
            n_retrieval, expected, n_retrieval == expected))
        rows.append(ResultRow(
            "C10_head_classification", echo, f"tau[H={n_heads}]",
            tau, tau_expected, tau == tau_expected))
        rows.append(ResultRow(
            "C10_head_classification", echo,
            f"monotone_invariance[H={n_heads}]",
            float(invariant), 1.0, invariant))
    return rows


ALL_CHECKS = (
    check_worked_speedup,
    check_speedup_law,
    check_dense_equivalence,
    check_score_soundness,
    check_constant_decode_cost,
    check_needle_recall,
    check_hierarchical_benefit,
    check_reuse_accounting,
    check_quantization_bound,
    check_head_classification,
)


def run_checks(cfg: EngineConfig) -> list[ResultRow]:
    rows: list[ResultRow] = []
    for check in ALL_CHECKS:
        rows.extend(check(cfg))
    return rows


def run_verify(cfg: EngineConfig) -> tuple[list[ResultRow], bool]:
    """Run all checks twice, appending the CSV byte-determinism criterion.

    Returns the rows of the first run plus the determinism row, and whether
    every row passed.
    """
    first = run_checks(cfg)
    second = run_checks(cfg)
    identical = rows_to_csv(first) == rows_to_csv(second)
    rows = first + [ResultRow(
        "C11_determinism", config_echo(cfg.to_dict()), "csv_bytes_identical",
        float(identical), 1.0, identical)]
    return rows, all(r.passed for r in rows)
