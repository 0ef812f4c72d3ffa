import csv
import io
import json
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynlora.engine import DecodeSession
from dynlora.model import ModelConfig, Placement
from dynlora.profiler import (
    CSV_COLUMNS,
    CostParams,
    DispatchKind as K,
    ExecMode,
    Profiler,
    breakdown,
    count_per_token,
    estimate_latency,
    flops_per_token,
    format_breakdown,
    log_to_csv,
    log_to_json,
    modeled_token_us,
    per_token_counts,
    verify_counts,
)

from .helpers import PLACEMENTS, small_config, trained_like


def test_closed_form_table_default_all_linear():
    cfg = ModelConfig()
    S, B = 20, 20
    assert count_per_token(cfg, ExecMode.NAIVE_PER_SITE) == {K.BACKBONE: B, K.ADAPTER: 4 * S, K.ROUTER: S}
    assert count_per_token(cfg, ExecMode.NAIVE_PER_BLOCK) == {K.BACKBONE: B, K.ADAPTER: 4 * S, K.ROUTER: 4}
    assert count_per_token(cfg, ExecMode.PRE_GATED_NAIVE) == {K.BACKBONE: B, K.ADAPTER: 4 * S, K.ROUTER: 1}
    assert count_per_token(cfg, ExecMode.SIMPLE_MERGE) == {K.BACKBONE: B, K.MERGE: 2 * S, K.ROUTER: 1}
    assert count_per_token(cfg, ExecMode.FUSED_SWITCH) == {K.BACKBONE: B, K.SGMM: 1, K.ROUTER: 1}


def test_mlp_only_counts():
    cfg = ModelConfig(placement=Placement.MLP_ONLY, top_k=1)
    assert count_per_token(cfg, ExecMode.NAIVE_PER_SITE) == {K.BACKBONE: 20, K.ADAPTER: 24, K.ROUTER: 12}


@pytest.mark.parametrize("mode", [ExecMode.NAIVE_PER_SITE, ExecMode.NAIVE_PER_BLOCK, ExecMode.PRE_GATED_NAIVE])
def test_k_zero_is_backbone_only(mode):
    assert count_per_token(ModelConfig(), mode, top_k=0) == {K.BACKBONE: 20}


@settings(max_examples=50, deadline=None)
@given(
    n_blocks=st.integers(1, 8),
    n_experts=st.integers(2, 16),
    k=st.integers(1, 2),
    placement=st.sampled_from(PLACEMENTS),
)
def test_count_invariants(n_blocks, n_experts, k, placement):
    cfg = ModelConfig(n_blocks=n_blocks, n_experts=n_experts, top_k=k, placement=placement)
    fused = count_per_token(cfg, ExecMode.FUSED_SWITCH)
    assert fused == {K.BACKBONE: 5 * n_blocks, K.SGMM: 1, K.ROUTER: 1}
    totals = {m: sum(count_per_token(cfg, m).values()) for m in ExecMode}
    assert totals[ExecMode.NAIVE_PER_SITE] >= totals[ExecMode.NAIVE_PER_BLOCK] >= totals[ExecMode.PRE_GATED_NAIVE]
    # at k=1 the 2kS adapter products and the 2S merges tie
    assert totals[ExecMode.PRE_GATED_NAIVE] >= totals[ExecMode.SIMPLE_MERGE] > totals[ExecMode.FUSED_SWITCH]
    if k > 1:
        assert totals[ExecMode.PRE_GATED_NAIVE] > totals[ExecMode.SIMPLE_MERGE]


@pytest.mark.parametrize("placement", PLACEMENTS)
@pytest.mark.parametrize("k", [1, 2])
@pytest.mark.parametrize("mode", list(ExecMode))
def test_recorded_counts_and_flops_match_closed_form(placement, k, mode):
    cfg = small_config(placement=placement, top_k=k)
    m = trained_like(cfg, std=0.3)
    prof = Profiler()
    s = DecodeSession(m, mode, prof)
    s.generate([1, 2], 6)
    assert verify_counts(prof.events, cfg, mode).ok
    if mode is ExecMode.FUSED_SWITCH:
        return  # sgmm FLOPs depend on elision and on the first token
    expected = flops_per_token(cfg, mode)
    for step in range(6):
        seen = {}
        for e in prof.decode_events():
            if e.token_step == step:
                seen[e.kind] = seen.get(e.kind, 0) + e.flops
        assert seen == expected


def test_fused_flops_after_first_token():
    cfg = small_config()
    m = trained_like(cfg, std=0.3)
    prof = Profiler()
    s = DecodeSession(m, ExecMode.FUSED_SWITCH, prof)
    s.generate([1], 8)
    full = flops_per_token(cfg, ExecMode.FUSED_SWITCH)[K.SGMM]
    sg = [e.flops for e in prof.decode_events() if e.kind is K.SGMM]
    assert sg[0] == full // 2  # nothing merged before the first token
    for t in range(1, 8):
        same = s.decisions[t].same_selection(s.decisions[t - 1])
        assert sg[t] == (0 if same else full)


def test_verify_counts_reports_kind_and_first_token():
    cfg = small_config()
    m = trained_like(cfg)
    prof = Profiler()
    s = DecodeSession(m, ExecMode.SIMPLE_MERGE, prof, fault_skip_unmerge_at=3)
    s.generate([1], 5)
    report = verify_counts(prof.events, cfg, ExecMode.SIMPLE_MERGE)
    assert not report.ok
    (mm,) = report.mismatches
    assert (mm.kind, mm.expected, mm.observed, mm.token_step) == ("MergeGemm", 2 * cfg.adapted_sites, cfg.adapted_sites, 3)
    assert "MergeGemm" in str(report) and "token 3" in str(report)


def test_latency_formula():
    p = CostParams(launch_overhead_us=10.0, throughput_gflops=2.0)
    us = estimate_latency({K.BACKBONE: 3, K.SGMM: 1}, {K.BACKBONE: 4000, K.SGMM: 2000}, p)
    assert us == pytest.approx(4 * 10.0 + 6000 / 2000.0)


def test_cost_params_validation():
    with pytest.raises(ValueError):
        CostParams(throughput_gflops=0)
    with pytest.raises(ValueError):
        CostParams(launch_overhead_us=-1)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 100.0), st.floats(1.0, 1e5), st.sampled_from(list(ExecMode)))
def test_modeled_latency_at_least_backbone(overhead, tput, mode):
    p = CostParams(overhead, tput)
    cfg = ModelConfig()
    assert modeled_token_us(cfg, mode, p) >= modeled_token_us(cfg, None, p)


def test_zero_overhead_leaves_pure_compute():
    p = CostParams(0.0, 1.0)
    cfg = ModelConfig()
    assert modeled_token_us(cfg, None, p) == pytest.approx(sum(flops_per_token(cfg, None).values()) / 1e3)


def test_injected_delay_spins():
    prof = Profiler(CostParams(launch_overhead_us=2000.0, injected_delay=True))
    t = time.perf_counter()
    prof.record(K.BACKBONE, 10)
    assert time.perf_counter() - t >= 0.002


def test_disabled_profiler_records_nothing():
    prof = Profiler()
    prof.enabled = False
    prof.record(K.ROUTER, 5)
    assert prof.events == []


@pytest.fixture
def fused_log():
    cfg = small_config()
    prof = Profiler()
    DecodeSession(trained_like(cfg), ExecMode.FUSED_SWITCH, prof).generate([1, 2], 4)
    return cfg, prof


def test_csv_log(fused_log):
    cfg, prof = fused_log
    rows = list(csv.DictReader(io.StringIO(log_to_csv(prof.events, prof.params))))
    assert list(rows[0]) == CSV_COLUMNS
    assert {int(r["token_step"]) for r in rows} == {0, 1, 2, 3}
    bb = [r for r in rows if r["kind"] == "BackboneGemm"]
    assert all(int(r["count"]) == cfg.total_sites for r in bb)


def test_json_log_is_stable(fused_log):
    _, prof = fused_log
    a = log_to_json(prof.events, prof.params)
    assert a == log_to_json(prof.events, prof.params)
    payload = json.loads(a)
    assert payload["params"]["launch_overhead_us"] == 20.0
    assert len(payload["rows"]) == 4 * 3


def test_breakdown_shares(fused_log):
    _, prof = fused_log
    rows = breakdown(prof.events, prof.params)
    assert [r.kind for r in rows] == ["BackboneGemm", "RouterGemm", "SgmmDispatch"]
    assert sum(r.share_pct for r in rows) == pytest.approx(100.0)
    assert "SgmmDispatch" in format_breakdown(rows, "table")
    assert format_breakdown(rows, "csv").splitlines()[0] == "kind,count,flops,modeled_us,share_pct"
    assert json.loads(format_breakdown(rows, "json", prof.params))["rows"][0]["kind"] == "BackboneGemm"


def test_per_token_counts_ignore_prefill(fused_log):
    _, prof = fused_log
    steps = per_token_counts(prof.events)
    assert sorted(steps) == [0, 1, 2, 3]


@pytest.mark.parametrize("name", ["FusedSwitch", "fused_switch", "fusedswitch"])
def test_mode_parse(name):
    assert ExecMode.parse(name) is ExecMode.FUSED_SWITCH


def test_mode_parse_rejects():
    with pytest.raises(ValueError, match="unknown mode"):
        ExecMode.parse("Turbo")
