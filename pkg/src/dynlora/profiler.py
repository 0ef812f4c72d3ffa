"""Dispatch log, closed-form dispatch counts and a launch-overhead latency model."""

from __future__ import annotations

import csv
import enum
import io
import json
import time
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Iterable

if TYPE_CHECKING:
    from .model import ModelConfig


class DispatchKind(enum.Enum):
    BACKBONE = "BackboneGemm"
    ADAPTER = "AdapterGemm"
    ROUTER = "RouterGemm"
    MERGE = "MergeGemm"
    SGMM = "SgmmDispatch"


KIND_ORDER = list(DispatchKind)


class ExecMode(enum.Enum):
    NAIVE_PER_SITE = "NaivePerSite"
    NAIVE_PER_BLOCK = "NaivePerBlock"
    PRE_GATED_NAIVE = "PreGatedNaive"
    SIMPLE_MERGE = "SimpleMerge"
    FUSED_SWITCH = "FusedSwitch"

    @classmethod
    def parse(cls, name: str) -> "ExecMode":
        for m in cls:
            if m.value.lower() == name.lower() or m.name.lower() == name.lower():
                return m
        raise ValueError(f"unknown mode {name!r}; choose from {', '.join(m.value for m in cls)}")


@dataclass(frozen=True)
class DispatchEvent:
    kind: DispatchKind
    flops: int
    token_step: int
    site_id: int = -1
    phase: str = "decode"


@dataclass(frozen=True)
class CostParams:
    """Per-dispatch fixed cost plus FLOPs over an effective throughput.

    The default throughput is the effective rate of the 7B backbone in the
    reference latency table (6.61 GFLOPs per token at 2.4 ms/token), which
    keeps the model in the launch-overhead-dominated regime it is meant to
    describe. Both knobs are uncalibrated for any particular device.
    """

    launch_overhead_us: float = 20.0
    throughput_gflops: float = 2750.0
    injected_delay: bool = False

    def __post_init__(self):
        if not self.launch_overhead_us >= 0 or not self.throughput_gflops > 0:
            raise ValueError("launch_overhead_us must be >= 0 and throughput_gflops > 0")

    def compute_us(self, flops: float) -> float:
        # 1 GFLOPS == 1e3 FLOP per microsecond
        return flops / (self.throughput_gflops * 1e3)


def spin_us(us: float) -> None:
    """Busy-wait for ``us`` microseconds (sleep is far too coarse)."""
    end = time.perf_counter() + us * 1e-6
    while time.perf_counter() < end:
        pass


class Profiler:
    """Collects :class:`DispatchEvent` records for one session.

    With ``params.injected_delay`` set, every recorded dispatch also spins for
    ``launch_overhead_us`` so wall-clock timings include an emulated launch cost.
    """

    def __init__(self, params: CostParams | None = None):
        self.params = params or CostParams()
        self.events: list[DispatchEvent] = []
        self.token_step = 0
        self.phase = "decode"
        self.enabled = True

    def record(self, kind: DispatchKind, flops: int, site_id: int = -1) -> None:
        if not self.enabled:
            return
        self.events.append(DispatchEvent(kind, int(flops), self.token_step, site_id, self.phase))
        if self.params.injected_delay and self.params.launch_overhead_us > 0:
            spin_us(self.params.launch_overhead_us)

    def clear(self) -> None:
        self.events.clear()

    def decode_events(self) -> list[DispatchEvent]:
        return [e for e in self.events if e.phase == "decode"]


def gemm_flops(m: int, n: int, p: int) -> int:
    return 2 * m * n * p


# -- closed-form counts -------------------------------------------------------

def count_per_token(config: "ModelConfig", mode: ExecMode, top_k: int | None = None) -> dict[DispatchKind, int]:
    """Dispatches one decode step issues under ``mode``.

    ``top_k`` overrides ``config.top_k`` (allows the degenerate k=0 case).
    """
    k = config.top_k if top_k is None else top_k
    S = config.adapted_sites
    B = config.total_sites
    counts = {kind: 0 for kind in DispatchKind}
    counts[DispatchKind.BACKBONE] = B
    if mode is ExecMode.NAIVE_PER_SITE:
        counts[DispatchKind.ADAPTER] = 2 * k * S
        counts[DispatchKind.ROUTER] = S if k else 0
    elif mode is ExecMode.NAIVE_PER_BLOCK:
        counts[DispatchKind.ADAPTER] = 2 * k * S
        counts[DispatchKind.ROUTER] = config.n_blocks if k else 0
    elif mode is ExecMode.PRE_GATED_NAIVE:
        counts[DispatchKind.ADAPTER] = 2 * k * S
        counts[DispatchKind.ROUTER] = 1 if k else 0
    elif mode is ExecMode.SIMPLE_MERGE:
        counts[DispatchKind.MERGE] = 2 * S
        counts[DispatchKind.ROUTER] = 1
    elif mode is ExecMode.FUSED_SWITCH:
        counts[DispatchKind.SGMM] = 1
        counts[DispatchKind.ROUTER] = 1
    return {kind: c for kind, c in counts.items() if c}


def backbone_counts(config: "ModelConfig") -> dict[DispatchKind, int]:
    return {DispatchKind.BACKBONE: config.total_sites}


def _site_shapes(config: "ModelConfig") -> list[tuple[int, int, bool]]:
    from .model import SITE_NAMES, is_adapted, site_dims

    return [(*site_dims(config, n), is_adapted(config, n)) for _ in range(config.n_blocks) for n in SITE_NAMES]


def flops_per_token(config: "ModelConfig", mode: ExecMode | None) -> dict[DispatchKind, int]:
    """Closed-form per-token FLOPs by kind; ``mode=None`` is the bare backbone.

    Merge-style counts assume the experts of consecutive tokens differ (no
    elided switches).
    """
    from .model import router_inputs, Routing

    k, r, N = config.top_k, config.rank, config.n_experts
    shapes = _site_shapes(config)
    out: Counter = Counter()
    out[DispatchKind.BACKBONE] = sum(gemm_flops(do, 1, di) for do, di, _ in shapes)
    adapted = [(do, di) for do, di, a in shapes if a]
    if mode in (ExecMode.NAIVE_PER_SITE, ExecMode.NAIVE_PER_BLOCK, ExecMode.PRE_GATED_NAIVE):
        out[DispatchKind.ADAPTER] = sum(k * (gemm_flops(r, 1, di) + gemm_flops(do, 1, r)) for do, di in adapted)
    if mode is ExecMode.SIMPLE_MERGE:
        out[DispatchKind.MERGE] = sum(2 * gemm_flops(do, di, k * r) for do, di in adapted)
    if mode is ExecMode.FUSED_SWITCH:
        out[DispatchKind.SGMM] = sum(gemm_flops(do, di, 2 * k * r) for do, di in adapted)
    routing = {
        ExecMode.NAIVE_PER_SITE: Routing.PER_SITE,
        ExecMode.NAIVE_PER_BLOCK: Routing.PER_BLOCK,
    }.get(mode, Routing.PRE_GATED)
    if mode is not None:
        out[DispatchKind.ROUTER] = sum(gemm_flops(N, 1, d) for d in router_inputs(config, routing))
    return dict(out)


def estimate_latency(
    counts: dict[DispatchKind, int],
    flops_by_kind: dict[DispatchKind, int],
    params: CostParams,
) -> float:
    """Modeled microseconds: fixed launch cost per dispatch plus compute time."""
    n = sum(counts.values())
    return n * params.launch_overhead_us + params.compute_us(sum(flops_by_kind.values()))


def modeled_token_us(config: "ModelConfig", mode: ExecMode | None, params: CostParams) -> float:
    counts = backbone_counts(config) if mode is None else count_per_token(config, mode)
    return estimate_latency(counts, flops_per_token(config, mode), params)


# -- log checks and reports ---------------------------------------------------

@dataclass
class CountMismatch:
    kind: str
    expected: int
    observed: int
    token_step: int


@dataclass
class CountReport:
    ok: bool
    tokens: int
    mismatches: list[CountMismatch] = field(default_factory=list)

    def __str__(self) -> str:
        if self.ok:
            return f"ok ({self.tokens} tokens)"
        lines = [f"{len(self.mismatches)} kind(s) differ:"]
        for m in self.mismatches:
            lines.append(
                f"  {m.kind}: expected {m.expected}, observed {m.observed} (first at token {m.token_step})"
            )
        return "\n".join(lines)


def per_token_counts(events: Iterable[DispatchEvent]) -> dict[int, Counter]:
    by_step: dict[int, Counter] = defaultdict(Counter)
    for e in events:
        if e.phase == "decode":
            by_step[e.token_step][e.kind] += 1
    return dict(by_step)


def verify_counts(events: Iterable[DispatchEvent], config: "ModelConfig", mode: ExecMode) -> CountReport:
    """Check every decoded token against :func:`count_per_token`.

    Reports each offending kind once with the first token where it differs.
    """
    expected = count_per_token(config, mode)
    steps = per_token_counts(events)
    first: dict[DispatchKind, CountMismatch] = {}
    for step in sorted(steps):
        seen = steps[step]
        for kind in DispatchKind:
            exp, obs = expected.get(kind, 0), seen.get(kind, 0)
            if exp != obs and kind not in first:
                first[kind] = CountMismatch(kind.value, exp, obs, step)
    mismatches = [first[k] for k in KIND_ORDER if k in first]
    return CountReport(not mismatches, len(steps), mismatches)


@dataclass
class BreakdownRow:
    kind: str
    count: int
    flops: int
    modeled_us: float
    share_pct: float


def breakdown(events: Iterable[DispatchEvent], params: CostParams) -> list[BreakdownRow]:
    """Per-kind totals over decode events with modeled cost and share of the total."""
    counts: Counter = Counter()
    flops: Counter = Counter()
    for e in events:
        if e.phase != "decode":
            continue
        counts[e.kind] += 1
        flops[e.kind] += e.flops
    cost = {k: counts[k] * params.launch_overhead_us + params.compute_us(flops[k]) for k in counts}
    total = sum(cost.values())
    return [
        BreakdownRow(k.value, counts[k], flops[k], cost[k], 100.0 * cost[k] / total if total else 0.0)
        for k in KIND_ORDER
        if k in counts
    ]


def token_rows(events: Iterable[DispatchEvent], params: CostParams) -> list[dict]:
    """Rows for the CSV/JSON log: one per (token_step, kind)."""
    agg: dict[tuple[int, DispatchKind], list[int]] = {}
    for e in events:
        if e.phase != "decode":
            continue
        slot = agg.setdefault((e.token_step, e.kind), [0, 0])
        slot[0] += 1
        slot[1] += e.flops
    rows = []
    for (step, kind) in sorted(agg, key=lambda sk: (sk[0], KIND_ORDER.index(sk[1]))):
        count, fl = agg[(step, kind)]
        rows.append({
            "token_step": step,
            "kind": kind.value,
            "count": count,
            "flops": fl,
            "modeled_us": round(count * params.launch_overhead_us + params.compute_us(fl), 6),
        })
    return rows


CSV_COLUMNS = ["token_step", "kind", "count", "flops", "modeled_us"]


def log_to_csv(events: Iterable[DispatchEvent], params: CostParams) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(token_rows(events, params))
    return buf.getvalue()


def log_to_json(events: Iterable[DispatchEvent], params: CostParams) -> str:
    return json.dumps({"params": asdict(params), "rows": token_rows(events, params)}, indent=2)


def format_breakdown(rows: list[BreakdownRow], fmt: str = "table", params: CostParams | None = None) -> str:
    if fmt == "json":
        payload = {"params": asdict(params) if params else None, "rows": [asdict(r) for r in rows]}
        return json.dumps(payload, indent=2)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "count", "flops", "modeled_us", "share_pct"])
        for r in rows:
            w.writerow([r.kind, r.count, r.flops, f"{r.modeled_us:.3f}", f"{r.share_pct:.2f}"])
        return buf.getvalue()
    lines = [f"{'kind':<14}{'count':>8}{'flops':>14}{'modeled_us':>14}{'share%':>9}"]
    for r in rows:
        lines.append(f"{r.kind:<14}{r.count:>8}{r.flops:>14}{r.modeled_us:>14.2f}{r.share_pct:>9.2f}")
    return "\n".join(lines) + "\n"
