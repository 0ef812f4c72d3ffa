"""Fused adapter switching and the segmented batched merge.

Per token, every adapted weight moves from ``W + delta(prev)`` to
``W + delta(cur)`` through a single low-rank update whose factors
concatenate the previous token's slices (down factor negated) with the
current token's. All sites' updates are packed into one buffer and applied
by :func:`sgmm` in a single dispatch.
"""

from __future__ import annotations

import functools
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import linalg
from .gating import GatingDecision
from .model import AdapterSite, Model
from .profiler import DispatchKind, Profiler


class SegmentError(ValueError):
    pass


@dataclass(frozen=True)
class TileConfig:
    rows: int = 64
    cols: int = 64

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"tile dims must be positive, got {self.rows}x{self.cols}")

    @classmethod
    def parse(cls, spec: str) -> "TileConfig":
        try:
            r, c = spec.lower().split("x")
            return cls(int(r), int(c))
        except ValueError as exc:
            raise ValueError(f"bad tile spec {spec!r}, expected RxC such as 64x64") from exc


@dataclass(frozen=True)
class SegmentEntry:
    site_id: int
    d_out: int
    d_in: int
    rank_rows: int
    down_offset: int
    up_offset: int


@dataclass
class FusedDelta:
    segments: list[SegmentEntry]
    down_buf: np.ndarray
    up_buf: np.ndarray

    def down_slice(self, seg: SegmentEntry) -> np.ndarray:
        n = seg.rank_rows * seg.d_in
        return self.down_buf[seg.down_offset : seg.down_offset + n].reshape(seg.rank_rows, seg.d_in)

    def up_slice(self, seg: SegmentEntry) -> np.ndarray:
        n = seg.d_out * seg.rank_rows
        return self.up_buf[seg.up_offset : seg.up_offset + n].reshape(seg.d_out, seg.rank_rows)

    @property
    def flops(self) -> int:
        return sum(2 * s.d_out * s.d_in * s.rank_rows for s in self.segments)

    def validate(self) -> None:
        seen = set()
        for buf_name, size, spans in (
            ("down", self.down_buf.size, [(s.down_offset, s.rank_rows * s.d_in) for s in self.segments]),
            ("up", self.up_buf.size, [(s.up_offset, s.d_out * s.rank_rows) for s in self.segments]),
        ):
            prev_end = 0
            for start, length in sorted(spans):
                if start < 0 or start + length > size:
                    raise SegmentError(f"{buf_name} slice [{start}, {start + length}) outside buffer of {size}")
                if length and start < prev_end:
                    raise SegmentError(f"overlapping {buf_name} slices at offset {start}")
                if length:
                    prev_end = start + length
        for s in self.segments:
            if s.site_id in seen:
                raise SegmentError(f"overlapping segments: site {s.site_id} appears twice")
            seen.add(s.site_id)


@dataclass
class SwitchState:
    last_decision: GatingDecision | None = None
    merged: bool = False


def _scaled(coef: float, down: np.ndarray) -> np.ndarray:
    return coef * down


def build_concat(site: AdapterSite, d: GatingDecision, scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Concatenated factors of the experts ``d`` selects.

    The gate weight and LoRA scale go into the down slices only, so
    ``up_c @ down_c == scale * sum_j w_j * up_j @ down_j``.
    """
    if not site.adapted:
        raise SegmentError(f"site {site.site_id} ({site.name}) is not adapted")
    n = len(site.experts)
    downs, ups = [], []
    for idx, w in zip(d.indices, d.weights):
        if not 0 <= idx < n:
            raise IndexError(f"expert index {idx} out of range for {n} experts")
        e = site.experts[idx]
        downs.append(_scaled(scale * w, e.down))
        ups.append(e.up)
    return linalg.concat_rank(downs, ups, site.d_in, site.d_out)


def merge(site: AdapterSite, down_c: np.ndarray, up_c: np.ndarray) -> None:
    linalg.accumulate(site.weight, up_c, down_c, +1)


def unmerge(site: AdapterSite, down_c: np.ndarray, up_c: np.ndarray) -> None:
    linalg.accumulate(site.weight, up_c, down_c, -1)


def build_fused(
    site: AdapterSite,
    prev: GatingDecision | None,
    cur: GatingDecision | None,
    scale: float,
    *,
    negate_both: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Factors whose product is ``delta(cur) - delta(prev)``.

    The previous token's slices carry the negation on the down factor only.
    ``negate_both=True`` also negates the up factor, which turns the
    product back into ``+delta(prev)``; it exists so tests can show that
    construction fails to restore the backbone.

    ``cur=None`` yields only the undo part (used by :func:`restore`).
    Identical consecutive decisions produce empty factors.
    """
    if not site.adapted:
        raise SegmentError(f"site {site.site_id} ({site.name}) is not adapted")
    if cur is not None and cur.same_selection(prev):
        return linalg.zeros(0, site.d_in), linalg.zeros(site.d_out, 0)
    downs, ups = [], []
    if prev is not None:
        for idx, w in zip(prev.indices, prev.weights):
            e = site.experts[idx]
            # negating the coefficient gives the exact negation of the merged slice
            downs.append(_scaled(-(scale * w), e.down))
            ups.append(-e.up if negate_both else e.up)
    if cur is not None:
        for idx, w in zip(cur.indices, cur.weights):
            e = site.experts[idx]
            downs.append(_scaled(scale * w, e.down))
            ups.append(e.up)
    return linalg.concat_rank(downs, ups, site.d_in, site.d_out)


def pack(sites: Sequence[AdapterSite], slices: Sequence[tuple[np.ndarray, np.ndarray]]) -> FusedDelta:
    """Pack per-site factor pairs into contiguous buffers plus a segment table."""
    segments = []
    down_parts, up_parts = [], []
    d_off = u_off = 0
    for site, (down_c, up_c) in zip(sites, slices):
        rank_rows = down_c.shape[0]
        if down_c.shape != (rank_rows, site.d_in) or up_c.shape != (site.d_out, rank_rows):
            raise SegmentError(
                f"site {site.site_id}: slices {down_c.shape}/{up_c.shape} do not fit weight {site.weight.shape}"
            )
        segments.append(SegmentEntry(site.site_id, site.d_out, site.d_in, rank_rows, d_off, u_off))
        down_parts.append(down_c.ravel())
        up_parts.append(up_c.ravel())
        d_off += down_c.size
        u_off += up_c.size
    down_buf = np.concatenate(down_parts) if down_parts else np.zeros(0)
    up_buf = np.concatenate(up_parts) if up_parts else np.zeros(0)
    return FusedDelta(segments, down_buf, up_buf)


def _fused_terms(prev, cur, scale, negate_both):
    if cur is not None and cur.same_selection(prev):
        return []
    terms = []
    if prev is not None:
        terms += [(idx, -(scale * w), -1.0 if negate_both else 1.0) for idx, w in zip(prev.indices, prev.weights)]
    if cur is not None:
        terms += [(idx, scale * w, 1.0) for idx, w in zip(cur.indices, cur.weights)]
    return terms


def _buffer(scratch: dict | None, key: str, n: int) -> np.ndarray:
    if scratch is None:
        return np.empty(n)
    buf = scratch.get(key)
    if buf is None or buf.size < n:
        buf = scratch[key] = np.empty(n)
    return buf[:n]


def fused_delta(
    sites: Sequence[AdapterSite],
    prev: GatingDecision | None,
    cur: GatingDecision | None,
    scale: float,
    *,
    negate_both: bool = False,
    scratch: dict | None = None,
) -> FusedDelta:
    """``pack(sites, [build_fused(s, prev, cur, scale) for s in sites])`` without the temporaries.

    Slices are written straight into the packed buffers; the values are
    bit-identical to the two-step construction. With ``scratch`` the buffers
    are views into arrays kept there and reused by the next call.
    """
    # every site sees the same decision, so the term list is shared
    terms = _fused_terms(prev, cur, scale, negate_both)
    segments, plan = [], []
    d_off = u_off = 0
    for site in sites:
        if not site.adapted:
            raise SegmentError(f"site {site.site_id} ({site.name}) is not adapted")
        experts = site.experts
        parts = [(experts[i].down, experts[i].up, coef, sgn) for i, coef, sgn in terms]
        rank_rows = sum(d.shape[0] for d, _, _, _ in parts)
        segments.append(SegmentEntry(site.site_id, site.d_out, site.d_in, rank_rows, d_off, u_off))
        plan.append((d_off, u_off, rank_rows, parts))
        d_off += rank_rows * site.d_in
        u_off += site.d_out * rank_rows
    fused = FusedDelta(segments, _buffer(scratch, "down", d_off), _buffer(scratch, "up", u_off))
    linalg.fill_fused(fused.down_buf, fused.up_buf, plan)
    return fused


# -- segmented batched multiply -----------------------------------------------

_pools: dict[int, ThreadPoolExecutor] = {}
_pools_lock = threading.Lock()


def _pool(workers: int) -> ThreadPoolExecutor:
    with _pools_lock:
        pool = _pools.get(workers)
        if pool is None:
            pool = _pools[workers] = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="sgmm")
        return pool


def _tiles(fused: FusedDelta, tile: TileConfig) -> np.ndarray:
    shape = tuple((seg.d_out, seg.d_in, seg.rank_rows > 0) for seg in fused.segments)
    return _tile_table(shape, tile.rows, tile.cols)


@functools.lru_cache(maxsize=64)
def _tile_table(shape: tuple, rows: int, cols: int) -> np.ndarray:
    out = []
    for si, (d_out, d_in, live) in enumerate(shape):
        if not live:
            continue
        for r0 in range(0, d_out, rows):
            for c0 in range(0, d_in, cols):
                out.append((si, r0, c0, min(rows, d_out - r0), min(cols, d_in - c0)))
    table = np.array(out, dtype=np.intp).reshape(-1, 5)
    table.flags.writeable = False
    return table


def sgmm(
    sites: Sequence[AdapterSite],
    fused: FusedDelta,
    tile: TileConfig = TileConfig(),
    *,
    workers: int = 1,
    prefetch: bool = True,
    profiler: Profiler | None = None,
) -> None:
    """Apply ``weight += up_slice @ down_slice`` for every segment, in place.

    Counts as one dispatch however many segments there are. The outputs are
    cut into ``tile.rows x tile.cols`` tiles shared out among ``workers``;
    each tile runs its whole ascending reduction on one worker, so results
    do not depend on the worker count.
    """
    fused.validate()
    by_id = {s.site_id: s for s in sites}
    targets, ups, downs = [], [], []
    for seg in fused.segments:
        site = by_id.get(seg.site_id)
        if site is None:
            raise SegmentError(f"segment refers to unknown site {seg.site_id}")
        if site.weight.shape != (seg.d_out, seg.d_in):
            raise SegmentError(f"segment shape {seg.d_out}x{seg.d_in} does not match site {seg.site_id}")
        targets.append(site.weight)
        ups.append(fused.up_slice(seg))
        downs.append(fused.down_slice(seg))

    if profiler is not None:
        profiler.record(DispatchKind.SGMM, fused.flops)

    tiles = _tiles(fused, tile)
    if workers <= 1 or len(tiles) <= 1:
        linalg.run_tiles(targets, ups, downs, tiles, prefetch)
        return
    # each tile is owned by exactly one worker, so no two writers share an
    # element; contiguous chunks keep a worker on consecutive tiles
    chunks = np.array_split(tiles, min(workers, len(tiles)))
    pool = _pool(workers)
    futures = [pool.submit(linalg.run_tiles, targets, ups, downs, chunk, prefetch) for chunk in chunks if len(chunk)]
    for f in futures:
        f.result()


@dataclass
class Switcher:
    """Per-model switching options shared by :func:`switch_all` and :func:`restore`."""

    tile: TileConfig = field(default_factory=TileConfig)
    workers: int = 1
    prefetch: bool = True
    scratch: dict = field(default_factory=dict, repr=False, compare=False)


def switch_all(
    model: Model,
    state: SwitchState,
    cur: GatingDecision,
    profiler: Profiler | None = None,
    opts: Switcher | None = None,
    *,
    negate_both: bool = False,
) -> None:
    """Move every adapted weight from the previous token's experts to ``cur``'s in one sgmm call.

    ``negate_both`` selects the double-negation construction (regression tests only).
    """
    opts = opts or Switcher()
    sites = model.adapted_sites()
    scale = model.config.scale
    prev = state.last_decision if state.merged else None
    fused = fused_delta(sites, prev, cur, scale, negate_both=negate_both, scratch=opts.scratch)
    sgmm(sites, fused, opts.tile, workers=opts.workers, prefetch=opts.prefetch, profiler=profiler)
    state.last_decision = cur
    state.merged = True


def restore(
    model: Model,
    state: SwitchState,
    profiler: Profiler | None = None,
    opts: Switcher | None = None,
    *,
    negate_both: bool = False,
) -> None:
    """Unmerge whatever is currently merged, returning weights to the backbone."""
    if not state.merged:
        return
    opts = opts or Switcher()
    sites = model.adapted_sites()
    fused = fused_delta(
        sites, state.last_decision, None, model.config.scale, negate_both=negate_both, scratch=opts.scratch
    )
    sgmm(sites, fused, opts.tile, workers=opts.workers, prefetch=opts.prefetch, profiler=profiler)
    state.last_decision = None
    state.merged = False
