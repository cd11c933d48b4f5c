"""Block-sparse attention over a two-way paged, quantized KV cache.

A desk-scale serving-attention pipeline: static streaming heads, dynamic
query-aware page selection over hierarchical page statistics, low-bit
paged KV storage, and exact tile-count cost accounting — all verified
against brute-force oracles.
"""

from .attn import (SoftmaxState, Workload, blockwise_attention, gqa_map,
                   merge_block, reference_attention)
from .cache import (PageStats, PageTable, PhysicalPage, TwoWayCache,
                    dequantize_page, quantize_page)
from .engine import DecodeResult, Engine, EngineConfig, IndexTable, cost_report
from .heads import (BlockIterator, HeadProfile, classify_heads, iterate,
                    load_gates, streaming_schedule)
from .ledger import CostLedger
from .selector import (SelectionState, logical_page_score,
                       physical_page_score, reusable_select, select_pages)
from .workloads import GroundTruth, WorkloadSpec, gen_workload

__version__ = "0.1.0"

__all__ = [
    "BlockIterator",
    "CostLedger",
    "DecodeResult",
    "Engine",
    "EngineConfig",
    "GroundTruth",
    "HeadProfile",
    "IndexTable",
    "PageStats",
    "PageTable",
    "PhysicalPage",
    "SelectionState",
    "SoftmaxState",
    "TwoWayCache",
    "Workload",
    "WorkloadSpec",
    "blockwise_attention",
    "classify_heads",
    "cost_report",
    "dequantize_page",
    "gen_workload",
    "gqa_map",
    "iterate",
    "load_gates",
    "logical_page_score",
    "merge_block",
    "physical_page_score",
    "quantize_page",
    "reference_attention",
    "reusable_select",
    "select_pages",
    "streaming_schedule",
]
