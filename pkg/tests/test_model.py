import struct

import numpy as np
import pytest

from dynlora import model as M
from dynlora.model import ConfigError, ModelConfig, ModelFormatError, Placement, Routing

from .helpers import small_config
from .oracles import block_forward_scalar


def test_generate_is_deterministic(tmp_path):
    a, b = tmp_path / "a.lswm", tmp_path / "b.lswm"
    M.save(M.generate(ModelConfig(seed=1)), a)
    M.save(M.generate(ModelConfig(seed=1)), b)
    assert a.read_bytes() == b.read_bytes()


def test_different_seed_changes_weights():
    a = M.generate(ModelConfig(seed=1))
    b = M.generate(ModelConfig(seed=2))
    assert not np.array_equal(a.embedding, b.embedding)


@pytest.mark.parametrize("placement,expected", [(Placement.ALL_LINEAR, 20), (Placement.MLP_ONLY, 12)])
def test_adapted_site_counts(placement, expected):
    m = M.generate(ModelConfig(placement=placement))
    assert len(m.adapted_sites()) == expected == m.config.adapted_sites
    assert len(list(m.sites())) == 20


def test_first_adapted_site_follows_placement():
    assert M.generate(ModelConfig()).first_adapted_site().name == "mix_in"
    assert M.generate(ModelConfig(placement=Placement.MLP_ONLY)).first_adapted_site().name == "gate"


def test_fresh_experts_have_zero_up_and_scaled_down():
    m = M.generate(ModelConfig(seed=3))
    for s in m.adapted_sites():
        assert len(s.experts) == 8
        for e in s.experts:
            assert not e.up.any()
            assert e.down.shape == (8, s.d_in)
    downs = np.concatenate([e.down.ravel() for s in m.adapted_sites() if s.d_in == 64 for e in s.experts])
    assert abs(downs.std() - 1 / 8) < 0.01


@pytest.mark.parametrize(
    "routing,count", [(Routing.PER_SITE, 20), (Routing.PER_BLOCK, 4), (Routing.PRE_GATED, 1)]
)
def test_router_count_per_policy(routing, count):
    assert len(M.generate(ModelConfig(routing=routing)).routers) == count


def test_baseline_routers_do_not_touch_stored_ones():
    m = M.generate(ModelConfig())
    stored = m.routers[0].w_g.copy()
    per_site = m.routers_for(Routing.PER_SITE)
    assert len(per_site) == 20
    assert m.routers_for(Routing.PER_SITE) is per_site
    assert np.array_equal(m.routers[0].w_g, stored)


def test_invalid_config_reports_every_field():
    with pytest.raises(ConfigError) as exc:
        ModelConfig(n_blocks=0, top_k=9, rank=100, alpha=-1).validate()
    msg = str(exc.value)
    for field in ("n_blocks", "top_k", "rank", "alpha"):
        assert field in msg


def test_roundtrip_bit_exact(tmp_path, small_model):
    p = tmp_path / "m.lswm"
    M.save(small_model, p)
    loaded = M.load(p)
    assert loaded.config == small_model.config
    assert M.to_bytes(loaded) == M.to_bytes(small_model)
    for s1, s2 in zip(small_model.sites(), loaded.sites()):
        assert s1.name == s2.name and s1.adapted == s2.adapted
        assert np.array_equal(s1.weight, s2.weight)


def test_roundtrip_mlp_only_per_site(tmp_path):
    m = M.generate(small_config(placement=Placement.MLP_ONLY, routing=Routing.PER_SITE))
    p = tmp_path / "m.lswm"
    M.save(m, p)
    assert M.to_bytes(M.load(p)) == M.to_bytes(m)


def test_header_layout(small_model):
    raw = M.to_bytes(small_model)
    assert raw[:4] == b"LSWM"
    assert struct.unpack("<I", raw[4:8])[0] == 1


def test_bad_magic(small_model):
    raw = bytearray(M.to_bytes(small_model))
    raw[0:4] = b"XXXX"
    with pytest.raises(ModelFormatError, match="bad magic"):
        M.from_bytes(bytes(raw))


def test_version_mismatch(small_model):
    raw = bytearray(M.to_bytes(small_model))
    raw[4:8] = struct.pack("<I", 2)
    with pytest.raises(ModelFormatError, match="version mismatch"):
        M.from_bytes(bytes(raw))


def test_truncated_mid_tensor_reports_offset(small_model):
    raw = M.to_bytes(small_model)
    cut = len(raw) // 2
    with pytest.raises(ModelFormatError, match=r"truncated .* at offset \d+"):
        M.from_bytes(raw[:cut])


def test_shape_header_disagreement(small_model):
    raw = bytearray(M.to_bytes(small_model))
    first_tensor = 8 + M._CONFIG_STRUCT.size
    raw[first_tensor : first_tensor + 4] = struct.pack("<I", 999)
    with pytest.raises(ModelFormatError, match="shape header"):
        M.from_bytes(bytes(raw))


def _plain_eval(site, u):
    return site.weight @ u


def test_block_forward_zero_weights_is_identity():
    m = M.generate(small_config())
    block = m.blocks[0]
    for s in block.sites:
        s.weight[...] = 0.0
    x = np.random.default_rng(0).standard_normal((16, 1))
    assert np.array_equal(M.block_forward(block, x, _plain_eval), x)


def test_block_forward_zero_input_is_zero():
    m = M.generate(small_config())
    x = np.zeros((16, 1))
    assert not M.block_forward(m.blocks[0], x, _plain_eval).any()


def test_block_forward_matches_scalar_oracle():
    from dynlora.engine import backbone_product

    m = M.generate(small_config(seed=9))
    block = m.blocks[1]
    x = np.random.default_rng(3).standard_normal((16, 1))
    got = M.block_forward(block, x, lambda s, u: backbone_product(s, u, None))
    expect = block_forward_scalar({s.name: s.weight.tolist() for s in block.sites}, x[:, 0].tolist())
    assert np.allclose(got[:, 0], expect, rtol=1e-13, atol=1e-15)
