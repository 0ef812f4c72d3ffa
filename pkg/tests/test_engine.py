import numpy as np
import pytest

from dynlora import engine, linalg
from dynlora.engine import DecodeSession, ExecMode, NonFiniteError
from dynlora.model import ModelConfig, Placement, Routing, block_forward, generate
from dynlora.profiler import DispatchKind, Profiler, verify_counts

from .helpers import PLACEMENTS, rel_err, small_config, trained_like

PRE = [ExecMode.PRE_GATED_NAIVE, ExecMode.SIMPLE_MERGE, ExecMode.FUSED_SWITCH]


def backbone_logits(model, token):
    h = model.embedding[token].reshape(-1, 1).copy()
    for b in model.blocks:
        h = block_forward(b, h, lambda s, u: linalg.matmul(s.weight, u))
    return linalg.matmul(model.head, h)


def run(model, mode, prompt, n_new, **kw):
    s = DecodeSession(model.copy(), mode, **kw)
    logits = []
    real = s.decode_token

    def spy(tok):
        out = real(tok)
        logits.append(out)
        return out

    s.decode_token = spy
    toks = s.generate(prompt, n_new)
    return s, toks, logits


@pytest.mark.parametrize("placement", PLACEMENTS)
def test_pre_gated_modes_agree(placement):
    m = trained_like(small_config(placement=placement), std=0.3)
    ref = None
    for mode in PRE:
        _, toks, logits = run(m, mode, [3, 9, 1], 40)
        if ref is None:
            ref = (toks, logits)
            continue
        assert toks == ref[0]
        for a, b in zip(logits, ref[1]):
            assert rel_err(a, b) < 1e-9


def test_decisions_vary_so_switching_is_exercised():
    m = trained_like(small_config(), std=0.3)
    s, _, _ = run(m, ExecMode.FUSED_SWITCH, [3], 40)
    assert len({d.indices for d in s.decisions}) > 1


@pytest.mark.parametrize("mode", list(ExecMode))
def test_fresh_model_matches_backbone(mode):
    m = generate(small_config(seed=8))
    s = DecodeSession(m, mode)
    assert np.array_equal(s.decode_token(5), backbone_logits(m, 5))


@pytest.mark.parametrize("mode", [ExecMode.NAIVE_PER_SITE, ExecMode.NAIVE_PER_BLOCK])
def test_naive_local_modes_run_deterministically(mode):
    m = trained_like(small_config())
    _, a, _ = run(m, mode, [1, 2], 10)
    _, b, _ = run(m, mode, [1, 2], 10)
    assert a == b


def test_naive_per_site_uses_a_router_per_adapted_site():
    m = trained_like(small_config(routing=Routing.PER_SITE))
    prof = Profiler()
    DecodeSession(m, ExecMode.NAIVE_PER_SITE, prof).decode_token(2)
    routers = [e for e in prof.events if e.kind is DispatchKind.ROUTER]
    assert len(routers) == m.config.adapted_sites


def test_fused_switch_leaves_model_merged_until_restore(default_model):
    pristine = [s.weight.copy() for s in default_model.adapted_sites()]
    s = DecodeSession(default_model, ExecMode.FUSED_SWITCH)
    s.generate([1, 2, 3], 20)
    assert s.state.merged
    assert any(not np.array_equal(a.weight, w) for a, w in zip(default_model.adapted_sites(), pristine))
    s.restore()
    assert not s.state.merged
    for a, w in zip(default_model.adapted_sites(), pristine):
        assert rel_err(a.weight, w) < 1e-9


def test_simple_merge_unmerges_every_token(default_model):
    pristine = [s.weight.copy() for s in default_model.adapted_sites()]
    DecodeSession(default_model, ExecMode.SIMPLE_MERGE).generate([4], 10)
    for a, w in zip(default_model.adapted_sites(), pristine):
        assert rel_err(a.weight, w) < 1e-12


def test_simple_merge_unmerges_on_error(default_model, monkeypatch):
    pristine = [s.weight.copy() for s in default_model.adapted_sites()]
    s = DecodeSession(default_model, ExecMode.SIMPLE_MERGE)
    calls = {"n": 0}
    real = engine.backbone_product

    def boom(site, u, prof):
        calls["n"] += 1
        if calls["n"] == 7:
            raise RuntimeError("injected")
        return real(site, u, prof)

    monkeypatch.setattr(engine, "backbone_product", boom)
    with pytest.raises(RuntimeError):
        s.decode_token(1)
    for a, w in zip(default_model.adapted_sites(), pristine):
        assert rel_err(a.weight, w) < 1e-12


def test_prefill_restores_and_logs_prefill_phase(default_model):
    prof = Profiler()
    s = DecodeSession(default_model, ExecMode.FUSED_SWITCH, prof)
    s.decode_token(1)
    out = s.prefill([4, 5, 6])
    assert len(out) == 3 and not s.state.merged
    phases = {e.phase for e in prof.events}
    assert phases == {"decode", "prefill"}
    pre = [e for e in prof.events if e.phase == "prefill"]
    assert sum(e.kind is DispatchKind.ROUTER for e in pre) == 3


def test_prefill_logits_match_decode_of_pre_gated_naive(default_model):
    a = DecodeSession(default_model.copy(), ExecMode.FUSED_SWITCH).prefill([7, 8])
    b = DecodeSession(default_model.copy(), ExecMode.PRE_GATED_NAIVE)
    assert np.array_equal(a[0], b.decode_token(7))


def test_generate_logs_one_decode_step_per_new_token(default_model):
    prof = Profiler()
    toks = DecodeSession(default_model, ExecMode.FUSED_SWITCH, prof).generate([1, 2, 3, 4], 12)
    assert len(toks) == 12
    assert sorted({e.token_step for e in prof.decode_events()}) == list(range(12))
    assert verify_counts(prof.events, default_model.config, ExecMode.FUSED_SWITCH).ok


def test_greedy_tie_breaks_to_lower_id():
    m = generate(small_config())
    m.head[...] = 0.0
    assert DecodeSession(m, ExecMode.PRE_GATED_NAIVE).generate([3], 2) == [0, 0]


def test_input_validation(default_model):
    s = DecodeSession(default_model, ExecMode.PRE_GATED_NAIVE)
    with pytest.raises(ValueError):
        s.decode_token(default_model.config.vocab)
    with pytest.raises(ValueError):
        s.generate([], 3)
    with pytest.raises(ValueError):
        s.generate([1], 0)
    with pytest.raises(ValueError):
        s.prefill([])


@pytest.mark.parametrize("mode", PRE)
def test_non_finite_activation_is_reported(mode):
    m = trained_like(small_config())
    m.blocks[1].sites[2].weight[0, 0] = np.inf
    with pytest.raises(NonFiniteError, match="block 1 site gate"):
        DecodeSession(m, mode).decode_token(1)


def test_pre_gated_modes_on_per_site_model_use_baseline_router():
    m = trained_like(small_config(routing=Routing.PER_BLOCK))
    _, a, _ = run(m, ExecMode.PRE_GATED_NAIVE, [1], 8)
    _, b, _ = run(m, ExecMode.FUSED_SWITCH, [1], 8)
    assert a == b


def test_mlp_only_first_decision_taken_at_gate():
    m = trained_like(small_config(placement=Placement.MLP_ONLY))
    seen = []
    real = engine._decide_pre_gated

    def spy(model, x1, t, prof):
        seen.append(x1.copy())
        return real(model, x1, t, prof)

    engine._decide_pre_gated = spy
    try:
        DecodeSession(m, ExecMode.PRE_GATED_NAIVE).decode_token(2)
    finally:
        engine._decide_pre_gated = real
    x = m.embedding[2].reshape(-1, 1)
    b0 = m.blocks[0]
    h = x + linalg.matmul(b0.sites[1].weight, np.tanh(linalg.matmul(b0.sites[0].weight, x)))
    assert len(seen) == 1 and np.array_equal(seen[0], h)


def test_workers_and_tile_do_not_change_tokens(default_model):
    from dynlora.switching import Switcher, TileConfig

    _, a, _ = run(default_model, ExecMode.FUSED_SWITCH, [2], 15)
    _, b, _ = run(default_model, ExecMode.FUSED_SWITCH, [2], 15, switcher=Switcher(TileConfig(7, 9), 4, False))
    assert a == b


def test_default_size_runs_every_mode():
    m = trained_like(ModelConfig(seed=2))
    for mode in ExecMode:
        assert len(DecodeSession(m.copy(), mode).generate([1, 2], 3)) == 3
