"""Two-way paged KV cache with per-page quantization and key statistics.

Tokens are packed into fixed-capacity physical pages of low-bit codes, with
scales and zero points stored after the token features.  Pages in the dense
pool additionally carry channel-wise min/max key statistics per logical
sub-page, computed from the raw (unquantized) keys at append time; these
feed the page selector.  The streaming pool keeps only sink and local pages
and evicts the rest as the sequence grows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Iterable

import numpy as np


def quantize_page(raw: np.ndarray, bits: int | None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Asymmetric uniform per-channel quantization of one page of features.

    scale = (max - min) / (2^bits - 1), zero = min, code = clamped round of
    (x - zero) / scale.  A constant channel gets scale 1 so reconstruction
    is exact.  ``bits=None`` disables quantization: the codes are the raw
    values and scale/zero are identity.

    Args:
        raw: ``[tokens, dim]`` page contents.

    Returns:
        ``(codes, scale, zero)`` with scale/zero of shape ``[dim]``.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2:
        raise ValueError("expected a [tokens, dim] page")
    if not np.isfinite(raw).all():
        raise ValueError("non-finite values in page")
    if bits is None:
        return raw.copy(), np.ones(raw.shape[1]), np.zeros(raw.shape[1])
    if not 2 <= bits <= 8:
        raise ValueError(f"bits must be in [2, 8], got {bits}")
    lo = raw.min(axis=0)
    hi = raw.max(axis=0)
    levels = (1 << bits) - 1
    scale = (hi - lo) / levels
    # Constant channels, and spans so small the scale underflows, use
    # scale 1 so reconstruction stays exact (to within the span itself).
    scale = np.where(scale > 0, scale, 1.0)
    codes = np.clip(np.round((raw - lo) / scale), 0, levels).astype(np.uint8)
    return codes, scale, lo


def dequantize_codes(codes: np.ndarray, scale: np.ndarray,
                     zero: np.ndarray) -> np.ndarray:
    return codes.astype(np.float64) * scale + zero


@dataclass
class PageStats:
    """Channel-wise key bounds for one logical page."""

    k_min: np.ndarray
    k_max: np.ndarray
    covered_tokens: int

    @classmethod
    def from_keys(cls, keys: np.ndarray) -> "PageStats":
        keys = np.asarray(keys, dtype=np.float64)
        if keys.shape[0] < 1:
            raise ValueError("logical page must contain at least one key")
        return cls(k_min=keys.min(axis=0), k_max=keys.max(axis=0),
                   covered_tokens=keys.shape[0])


@dataclass
class PhysicalPage:
    """One fixed-capacity page of quantized K/V plus trailing metadata.

    Field order mirrors the storage layout: token features first, then
    scales/zeros, then (for dense-pool pages) the per-logical-page stats.
    Codes at slots >= ``token_count`` are padding and ignored.
    """

    page_id: int
    kv_head: int
    capacity: int
    token_count: int
    k_codes: np.ndarray
    v_codes: np.ndarray
    k_scale: np.ndarray
    k_zero: np.ndarray
    v_scale: np.ndarray
    v_zero: np.ndarray
    stats: list[PageStats] = field(default_factory=list)

    def dequantize(self) -> tuple[np.ndarray, np.ndarray]:
        """Reconstructed ``(keys, values)`` of shape ``[token_count, dim]``."""
        tc = self.token_count
        keys = dequantize_codes(self.k_codes[:tc], self.k_scale, self.k_zero)
        values = dequantize_codes(self.v_codes[:tc], self.v_scale, self.v_zero)
        return keys, values


def dequantize_page(page: PhysicalPage) -> tuple[np.ndarray, np.ndarray]:
    return page.dequantize()


class PageTable:
    """Token-order list of live pages with position -> (page_id, slot) lookup."""

    def __init__(self, page_size: int):
        self.page_size = page_size
        self._live: dict[int, int] = {}  # global page index -> page_id
        self.num_tokens = 0

    def register(self, page_index: int, page_id: int) -> None:
        self._live[page_index] = page_id

    def evict(self, page_index: int) -> None:
        del self._live[page_index]

    @property
    def page_ids(self) -> list[int]:
        return [self._live[i] for i in sorted(self._live)]

    @property
    def live_indices(self) -> list[int]:
        return sorted(self._live)

    def lookup(self, position: int) -> tuple[int, int]:
        """(page_id, slot) holding the token at ``position``."""
        if not 0 <= position < self.num_tokens:
            raise IndexError(
                f"position {position} outside [0, {self.num_tokens})"
            )
        index = position // self.page_size
        if index not in self._live:
            raise KeyError(f"position {position} falls in an evicted page")
        return self._live[index], position % self.page_size


class HeadPages:
    """All pages of one KV head within one pool.

    The open tail page keeps a raw staging copy of its tokens so that
    appends re-quantize the page and recompute stats from unquantized data;
    staging is dropped once the page fills.
    """

    def __init__(self, kv_head: int, page_size: int, logical_page: int,
                 bits: int | None, with_stats: bool,
                 streaming_window: tuple[int, int] | None = None):
        if page_size % logical_page != 0:
            raise ValueError("logical page size must divide physical page size")
        self.kv_head = kv_head
        self.page_size = page_size
        self.logical_page = logical_page
        self.bits = bits
        self.with_stats = with_stats
        self.streaming_window = streaming_window
        self.table = PageTable(page_size)
        self._pages: dict[int, PhysicalPage] = {}  # global index -> page
        self._open_index: int | None = None
        self._open_k: np.ndarray | None = None
        self._open_v: np.ndarray | None = None

    # -- views -------------------------------------------------------------

    @property
    def num_tokens(self) -> int:
        return self.table.num_tokens

    @property
    def page_count(self) -> int:
        """Global page count including evicted pages."""
        return -(-self.num_tokens // self.page_size) if self.num_tokens else 0

    def live_pages(self) -> list[PhysicalPage]:
        return [self._pages[i] for i in sorted(self._pages)]

    def page_at(self, page_index: int) -> PhysicalPage:
        if page_index not in self._pages:
            raise KeyError(f"page index {page_index} is not resident")
        return self._pages[page_index]

    # -- append ------------------------------------------------------------

    def append(self, keys: np.ndarray, values: np.ndarray) -> None:
        keys = np.asarray(keys, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        if keys.ndim != 2 or keys.shape != values.shape:
            raise ValueError("keys/values must both be [m, dim]")
        if keys.shape[0] < 1:
            raise ValueError("append requires at least one token")
        if not (np.isfinite(keys).all() and np.isfinite(values).all()):
            raise ValueError("non-finite keys or values")

        if self._open_index is None and self.num_tokens % self.page_size != 0:
            raise ValueError(
                "cannot append into a partial page restored from a snapshot: "
                "its raw staging is gone"
            )
        offset = 0
        m = keys.shape[0]
        dim = keys.shape[1]
        while offset < m:
            if self._open_index is None:
                self._open_new_page(dim)
            room = self.page_size - self._open_k.shape[0]
            take = min(room, m - offset)
            self._open_k = np.concatenate(
                [self._open_k, keys[offset:offset + take]])
            self._open_v = np.concatenate(
                [self._open_v, values[offset:offset + take]])
            offset += take
            self.table.num_tokens += take
            self._rebuild_open_page()
            if self._open_k.shape[0] == self.page_size:
                self._open_index = None
                self._open_k = None
                self._open_v = None
        self._evict_outside_window()

    def _open_new_page(self, dim: int) -> None:
        # All prior pages are full when a new one opens.
        self._open_index = self.num_tokens // self.page_size
        self._open_k = np.empty((0, dim))
        self._open_v = np.empty((0, dim))

    def _rebuild_open_page(self) -> None:
        index = self._open_index
        k_codes, k_scale, k_zero = quantize_page(self._open_k, self.bits)
        v_codes, v_scale, v_zero = quantize_page(self._open_v, self.bits)
        stats: list[PageStats] = []
        if self.with_stats:
            for start in range(0, self._open_k.shape[0], self.logical_page):
                stats.append(PageStats.from_keys(
                    self._open_k[start:start + self.logical_page]))
        page = PhysicalPage(
            page_id=index,
            kv_head=self.kv_head,
            capacity=self.page_size,
            token_count=self._open_k.shape[0],
            k_codes=k_codes, v_codes=v_codes,
            k_scale=k_scale, k_zero=k_zero,
            v_scale=v_scale, v_zero=v_zero,
            stats=stats,
        )
        self._pages[index] = page
        self.table.register(index, page.page_id)

    def _evict_outside_window(self) -> None:
        if self.streaming_window is None:
            return
        sink, local = self.streaming_window
        count = self.page_count
        for index in list(self._pages):
            if index >= sink and index < count - local:
                del self._pages[index]
                self.table.evict(index)

    # -- reads -------------------------------------------------------------

    def gather(self, page_indices: Iterable[int]) -> tuple[np.ndarray, np.ndarray]:
        """Dequantized (keys, values) of the given pages, concatenated in order."""
        ks, vs = [], []
        for index in page_indices:
            k, v = self.page_at(index).dequantize()
            ks.append(k)
            vs.append(v)
        if not ks:
            return np.empty((0, 0)), np.empty((0, 0))
        return np.concatenate(ks), np.concatenate(vs)


class TwoWayCache:
    """Separate paged pools for dense (retrieval) and streaming KV heads.

    A KV head lives in exactly one pool: dense when any query head in its
    group is a retrieval head, streaming otherwise.  Dense pages carry key
    statistics; streaming pages do not, and the streaming pool holds at most
    ``sink_blocks + local_blocks + 1`` pages per head at any time.
    """

    def __init__(self, physical_page: int, logical_page: int,
                 quant_bits: int | None, dense_heads: Iterable[int],
                 streaming_heads: Iterable[int], sink_blocks: int = 1,
                 local_blocks: int = 2):
        dense_heads = sorted(set(dense_heads))
        streaming_heads = sorted(set(streaming_heads))
        overlap = set(dense_heads) & set(streaming_heads)
        if overlap:
            raise ValueError(f"heads in both pools: {sorted(overlap)}")
        self.physical_page = physical_page
        self.logical_page = logical_page
        self.quant_bits = quant_bits
        self.dense_pool = {
            h: HeadPages(h, physical_page, logical_page, quant_bits,
                         with_stats=True)
            for h in dense_heads
        }
        self.streaming_pool = {
            h: HeadPages(h, physical_page, logical_page, quant_bits,
                         with_stats=False,
                         streaming_window=(sink_blocks, local_blocks))
            for h in streaming_heads
        }

    def pool_of(self, kv_head: int) -> HeadPages:
        if kv_head in self.dense_pool:
            return self.dense_pool[kv_head]
        if kv_head in self.streaming_pool:
            return self.streaming_pool[kv_head]
        raise KeyError(f"KV head {kv_head} is in neither pool")

    def append_tokens(self, kv_head: int, keys: np.ndarray,
                      values: np.ndarray) -> None:
        self.pool_of(kv_head).append(keys, values)

    @property
    def num_tokens(self) -> int:
        heads = list(self.dense_pool.values()) + list(self.streaming_pool.values())
        if not heads:
            return 0
        counts = {h.num_tokens for h in heads}
        if len(counts) != 1:
            raise ValueError(f"pools out of sync: token counts {sorted(counts)}")
        return counts.pop()

    # -- snapshot ----------------------------------------------------------

    def dump_jsonl(self, fp: IO[str]) -> None:
        """Self-describing snapshot: header line, then page records in table order."""
        header = {
            "physical_page": self.physical_page,
            "logical_page": self.logical_page,
            "bits": self.quant_bits,
        }
        fp.write(json.dumps(header) + "\n")
        for pool_name, pool in (("dense", self.dense_pool),
                                ("streaming", self.streaming_pool)):
            for kv_head in sorted(pool):
                for page in pool[kv_head].live_pages():
                    fp.write(json.dumps(_page_record(pool_name, page)) + "\n")

    @classmethod
    def load_jsonl(cls, fp: IO[str]) -> "TwoWayCache":
        header = json.loads(fp.readline())
        cache = cls(header["physical_page"], header["logical_page"],
                    header["bits"], dense_heads=[], streaming_heads=[])
        for line in fp:
            record = json.loads(line)
            pool = (cache.dense_pool if record["pool"] == "dense"
                    else cache.streaming_pool)
            kv_head = record["kv_head"]
            if kv_head not in pool:
                pool[kv_head] = HeadPages(
                    kv_head, header["physical_page"], header["logical_page"],
                    header["bits"], with_stats=record["pool"] == "dense")
            head = pool[kv_head]
            page = _page_from_record(record, header)
            head._pages[page.page_id] = page
            head.table.register(page.page_id, page.page_id)
            head.table.num_tokens = max(
                head.table.num_tokens,
                page.page_id * header["physical_page"] + page.token_count)
        return cache


def _page_record(pool_name: str, page: PhysicalPage) -> dict:
    codes_dtype = page.k_codes.dtype
    as_list = (lambda a: a[:page.token_count].tolist())
    record = {
        "pool": pool_name,
        "kv_head": page.kv_head,
        "page_id": page.page_id,
        "token_count": page.token_count,
        "k_codes": as_list(page.k_codes),
        "v_codes": as_list(page.v_codes),
        "k_scale": page.k_scale.tolist(),
        "k_zero": page.k_zero.tolist(),
        "v_scale": page.v_scale.tolist(),
        "v_zero": page.v_zero.tolist(),
        "stats": [
            {"k_min": s.k_min.tolist(), "k_max": s.k_max.tolist(),
             "covered_tokens": s.covered_tokens}
            for s in page.stats
        ],
        "codes_dtype": str(codes_dtype),
    }
    return record


def _page_from_record(record: dict, header: dict) -> PhysicalPage:
    codes_dtype = np.dtype(record["codes_dtype"])
    return PhysicalPage(
        page_id=record["page_id"],
        kv_head=record["kv_head"],
        capacity=header["physical_page"],
        token_count=record["token_count"],
        k_codes=np.asarray(record["k_codes"], dtype=codes_dtype),
        v_codes=np.asarray(record["v_codes"], dtype=codes_dtype),
        k_scale=np.asarray(record["k_scale"], dtype=np.float64),
        k_zero=np.asarray(record["k_zero"], dtype=np.float64),
        v_scale=np.asarray(record["v_scale"], dtype=np.float64),
        v_zero=np.asarray(record["v_zero"], dtype=np.float64),
        stats=[
            PageStats(np.asarray(s["k_min"]), np.asarray(s["k_max"]),
                      s["covered_tokens"])
            for s in record["stats"]
        ],
    )
