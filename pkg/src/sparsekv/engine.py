"""Prefill/decode orchestration over all heads, with cost accounting.

Prefill runs one blockwise attention pass over the prompt (full causal
schedules for retrieval heads, sink+local schedules for streaming heads)
and writes quantized K/V into the two-way cache.  Each decode step builds
a per-head index table (selected pages for dense heads, sink+local pages
for streaming heads), attends over dequantized pages plus the new token's
in-register K/V, and appends the new token afterward.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import attn
from .attn import Workload, gqa_map
from .cache import TwoWayCache
from .heads import RETRIEVAL, HeadProfile, streaming_schedule
from .ledger import CostLedger
from .selector import SelectionState, reusable_select

PREFILL = "prefill"
DECODE = "decode"


@dataclass
class EngineConfig:
    physical_page: int = 64
    logical_page: int = 16
    quant_bits: int | None = 4
    budget_tokens: int = 4096
    reuse_interval: int = 4
    sink_blocks: int = 1
    local_blocks: int = 2
    target_sparsity: float = 0.5
    tile_q_prefill: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.quant_bits == 0:
            self.quant_bits = None
        if self.physical_page < 1 or self.logical_page < 1:
            raise ValueError("page sizes must be >= 1")
        if self.physical_page % self.logical_page != 0:
            raise ValueError(
                f"logical page {self.logical_page} must divide physical page "
                f"{self.physical_page}"
            )
        if self.quant_bits is not None and not 2 <= self.quant_bits <= 8:
            raise ValueError("quant_bits must be 0/null or in [2, 8]")
        if self.budget_tokens < self.physical_page:
            raise ValueError(
                f"budget_tokens {self.budget_tokens} is below one physical "
                f"page ({self.physical_page} tokens)"
            )
        if self.reuse_interval < 1:
            raise ValueError("reuse_interval must be >= 1")
        if self.sink_blocks < 1 or self.local_blocks < 1:
            raise ValueError("sink_blocks and local_blocks must be >= 1")
        if not 0.0 <= self.target_sparsity < 1.0:
            raise ValueError("target_sparsity must be in [0, 1)")
        if self.tile_q_prefill < 1:
            raise ValueError("tile_q_prefill must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EngineConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> "EngineConfig":
        with open(path) as fp:
            return cls.from_dict(json.load(fp))


@dataclass(frozen=True)
class IndexTable:
    """Physical iteration step -> logical page position for one head's step."""

    head: int
    positions: tuple[int, ...]

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.positions, self.positions[1:])):
            raise ValueError("index table positions must be strictly increasing")

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class DecodeResult:
    output: np.ndarray
    index_tables: list[IndexTable]
    invoked: dict[int, bool] = field(default_factory=dict)


class Engine:
    """One sequence's attention engine: a config, head profiles, and a cache."""

    def __init__(self, config: EngineConfig, profiles: list[HeadProfile]):
        self.config = config
        self.profiles = profiles
        self.cache: TwoWayCache | None = None
        self.ledger = CostLedger()
        self.selection_states: dict[int, SelectionState] = {}
        self.decode_steps = 0
        self._group_size: int | None = None

    # -- helpers ------------------------------------------------------------

    def _group_heads(self, kv_head: int) -> list[int]:
        n = self._group_size
        return list(range(kv_head * n, (kv_head + 1) * n))

    def _dense_kv_heads(self, num_kv_heads: int) -> set[int]:
        dense = set()
        for kv in range(num_kv_heads):
            if any(self.profiles[h].role == RETRIEVAL
                   for h in self._group_heads(kv)):
                dense.add(kv)
        return dense

    # -- prefill ------------------------------------------------------------

    def prefill(self, w: Workload) -> np.ndarray:
        """Blockwise attention over the prompt; fills the two-way cache."""
        if len(self.profiles) != w.num_heads:
            raise ValueError(
                f"{len(self.profiles)} profiles for {w.num_heads} heads"
            )
        cfg = self.config
        self._group_size = w.group_size
        dense = self._dense_kv_heads(w.num_kv_heads)
        streaming = set(range(w.num_kv_heads)) - dense
        self.cache = TwoWayCache(
            cfg.physical_page, cfg.logical_page, cfg.quant_bits,
            dense_heads=dense, streaming_heads=streaming,
            sink_blocks=cfg.sink_blocks, local_blocks=cfg.local_blocks,
        )

        tile_q, tile_k = cfg.tile_q_prefill, cfg.physical_page
        n, s = w.num_queries, w.num_history
        n_tiles = attn.kv_tile_count(s, tile_k)
        schedules = {}
        for h in range(w.num_heads):
            profile = self.profiles[h]
            for qt in range(attn.query_tile_count(n, tile_q)):
                if profile.role == RETRIEVAL:
                    schedules[(h, qt)] = attn.full_causal_schedule(
                        qt, tile_q, tile_k, n, s)
                else:
                    diag = attn.diagonal_tile(qt, tile_q, tile_k, n, s)
                    schedules[(h, qt)] = streaming_schedule(
                        n_tiles, profile, diag).tiles()

        out, delta = attn.blockwise_attention(
            w, schedules, tile_q, tile_k, stage=PREFILL)
        self.ledger = self.ledger.merge(delta)

        for kv in range(w.num_kv_heads):
            self.cache.append_tokens(kv, w.k[:, kv, :], w.v[:, kv, :])
        return out

    def load_context(self, k_history: np.ndarray,
                     v_history: np.ndarray) -> None:
        """Ingest history K/V into the cache without computing prefill outputs.

        Bootstraps long-context decode studies where the quadratic prefill
        pass itself is not under test.  Shapes are
        ``[tokens, num_kv_heads, head_dim]``.
        """
        k_history = np.asarray(k_history)
        v_history = np.asarray(v_history)
        if k_history.ndim != 3 or k_history.shape != v_history.shape:
            raise ValueError("history must be [tokens, num_kv_heads, head_dim]")
        num_kv_heads = k_history.shape[1]
        if len(self.profiles) % num_kv_heads != 0:
            raise ValueError(
                f"{len(self.profiles)} heads not divisible by "
                f"{num_kv_heads} KV heads"
            )
        cfg = self.config
        self._group_size = len(self.profiles) // num_kv_heads
        dense = self._dense_kv_heads(num_kv_heads)
        streaming = set(range(num_kv_heads)) - dense
        self.cache = TwoWayCache(
            cfg.physical_page, cfg.logical_page, cfg.quant_bits,
            dense_heads=dense, streaming_heads=streaming,
            sink_blocks=cfg.sink_blocks, local_blocks=cfg.local_blocks,
        )
        for kv in range(num_kv_heads):
            self.cache.append_tokens(kv, k_history[:, kv, :],
                                     v_history[:, kv, :])

    # -- decode ---------------------------------------------------------------

    def decode_step(self, q_new: np.ndarray, k_new: np.ndarray,
                    v_new: np.ndarray) -> DecodeResult:
        """Attend one new token over the cache, then append its K/V.

        Args:
            q_new: ``[num_heads, head_dim]`` query row.
            k_new: ``[num_kv_heads, head_dim]`` the new token's keys.
            v_new: ``[num_kv_heads, head_dim]`` the new token's values.
        """
        if self.cache is None or self.cache.num_tokens == 0:
            raise ValueError("decode_step requires a non-empty cache")
        cfg = self.config
        q_new = np.asarray(q_new)
        k_new = np.asarray(k_new)
        v_new = np.asarray(v_new)
        num_heads = q_new.shape[0]
        num_kv_heads = k_new.shape[0]
        if num_heads != len(self.profiles) or num_heads % num_kv_heads != 0:
            raise ValueError("decode head shapes do not match the profiles")
        self._group_size = num_heads // num_kv_heads
        dim = q_new.shape[1]
        dtype = q_new.dtype
        scale = dtype.type(1.0 / np.sqrt(dim))

        page_count = -(-self.cache.num_tokens // cfg.physical_page)
        step = self.decode_steps
        invoked: dict[int, bool] = {}
        selections: dict[int, list[int]] = {}

        # Dynamic selection once per dense KV head, shared by its group.
        for kv in sorted(self.cache.dense_pool):
            retrieval_rows = [
                h for h in self._group_heads(kv)
                if self.profiles[h].role == RETRIEVAL
            ]
            if not retrieval_rows:
                continue
            pages, state, ran = reusable_select(
                self.selection_states.get(kv), step,
                q_new[retrieval_rows, :].astype(np.float64),
                self.cache.dense_pool[kv].live_pages(),
                cfg.budget_tokens, cfg.reuse_interval, cfg.physical_page,
            )
            self.selection_states[kv] = state
            selections[kv] = pages
            invoked[kv] = ran
            if ran:
                self.ledger.record_selector(kv)

        output = np.empty((num_heads, dim), dtype=dtype)
        tables: list[IndexTable] = []
        for h in range(num_heads):
            kv = gqa_map(h, self._group_size)
            profile = self.profiles[h]
            if profile.role == RETRIEVAL:
                pages = selections[kv]
            else:
                pages = streaming_schedule(
                    page_count, profile, page_count - 1).tiles()
            pool = self.cache.pool_of(kv)
            state = attn.SoftmaxState.initial(1, dim, dtype)
            q_row = q_new[h][None, :]
            for index in pages:
                keys, values = pool.page_at(index).dequantize()
                scores = (q_row @ keys.astype(dtype).T) * scale
                state = attn.merge_block(state, scores, values.astype(dtype))
            # The new token's K/V ride the diagonal in-register; they are not
            # a stored page and do not count as a visited tile.
            self_score = (q_row @ k_new[kv].astype(dtype)[:, None]) * scale
            state = attn.merge_block(state, self_score, v_new[kv][None, :].astype(dtype))
            output[h] = state.finalize()[0]
            tables.append(IndexTable(head=h, positions=tuple(pages)))
            self.ledger.record_tiles(DECODE, h, visited=len(pages),
                                     total=page_count)

        for kv in range(num_kv_heads):
            self.cache.append_tokens(kv, k_new[kv][None, :], v_new[kv][None, :])
        self.decode_steps += 1
        return DecodeResult(output=output, index_tables=tables, invoked=invoked)


def cost_report(ledger: CostLedger) -> dict:
    """Per-stage tile totals, skip fraction, speedup, and selector counts."""
    stages = {}
    for stage in ledger.stages():
        visited = ledger.visited(stage)
        total = ledger.total(stage)
        stages[stage] = {
            "visited_tiles": visited,
            "total_tiles": total,
            "skip_fraction": ledger.skip_fraction(stage),
            "speedup": ledger.speedup(stage),
        }
    return {
        "stages": stages,
        "selector_invocations": {
            "total": ledger.total_selector_invocations,
            "per_kv_head": {
                str(kv): count
                for kv, count in sorted(ledger.selector_invocations.items())
            },
        },
    }
