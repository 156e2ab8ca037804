import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from changefocus.config import EncoderConfig, ModelConfig
from changefocus.encoder import (
    PyramidEncoder,
    SiameseEncoder,
    SpatialReductionAttention,
    TransformerBlock,
    encode_pyramid,
    siamese_encode,
)
from changefocus.errors import ConfigError, PreconditionError, ShapeError
from changefocus.gradcheck import module_gradcheck

from conftest import brute_softmax_attention

TINY = ModelConfig.tiny().encoder


def sra_oracle(module, x):
    """Per-head nested-loop evaluation using the module's own projections (sr_ratio=1)."""
    x = x[0].detach().double().numpy()
    wq, bq = module.q.weight.detach().double().numpy(), module.q.bias.detach().double().numpy()
    wkv, bkv = module.kv.weight.detach().double().numpy(), module.kv.bias.detach().double().numpy()
    wp, bp = module.proj.weight.detach().double().numpy(), module.proj.bias.detach().double().numpy()
    C, dh = module.dim, module.head_dim
    q = x @ wq.T + bq
    kv = x @ wkv.T + bkv
    k, v = kv[:, :C], kv[:, C:]
    heads = []
    for h in range(module.heads):
        sl = slice(h * dh, (h + 1) * dh)
        heads.append(brute_softmax_attention(q[:, sl], k[:, sl], v[:, sl]))
    return np.concatenate(heads, axis=1) @ wp.T + bp


@pytest.mark.parametrize("heads", [1, 2])
def test_sra_matches_bruteforce_oracle(heads):
    m = SpatialReductionAttention(8, heads=heads, sr_ratio=1).double()
    torch.nn.init.normal_(m.q.weight, std=0.5)
    torch.nn.init.normal_(m.kv.weight, std=0.5)
    x = torch.randn(1, 8, 8, dtype=torch.float64)
    out = m(x, 2, 4)[0].detach().numpy()
    assert np.abs(out - sra_oracle(m, x)).max() < 1e-6


def test_sra_reduces_key_count():
    m = SpatialReductionAttention(16, heads=2, sr_ratio=2)
    x = torch.randn(3, 64, 16)
    assert m.reduce(x, 8, 8).shape == (3, 16, 16)
    assert m.attention_weights(x, 8, 8).shape == (3, 2, 64, 16)
    assert m(x, 8, 8).shape == (3, 64, 16)


def test_sra_joint_kv_permutation_invariance():
    m = SpatialReductionAttention(8, heads=2, sr_ratio=2).double()
    x = torch.randn(1, 64, 8, dtype=torch.float64)
    q, k, v = m._qkv(x, 8, 8)
    perm = torch.randperm(k.shape[-2])

    def attend(k_, v_):
        return ((q @ k_.transpose(-2, -1)) * m.scale).softmax(-1) @ v_

    assert torch.allclose(attend(k, v), attend(k[..., perm, :], v[..., perm, :]), atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(sr=st.sampled_from([1, 2, 4]), heads=st.sampled_from([1, 2, 4]), side=st.sampled_from([4, 8]))
def test_sra_rows_sum_to_one(sr, heads, side):
    m = SpatialReductionAttention(8, heads=heads, sr_ratio=sr)
    w = m.attention_weights(torch.randn(2, side * side, 8), side, side)
    assert (w >= 0).all()
    assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-6)


def test_sra_errors():
    m = SpatialReductionAttention(8, heads=2, sr_ratio=4)
    with pytest.raises(ShapeError):
        m(torch.randn(1, 10, 8), 4, 4)
    with pytest.raises(ShapeError):
        m(torch.randn(1, 16, 6), 4, 4)
    with pytest.raises(ConfigError):
        m(torch.randn(1, 36, 8), 6, 6)
    with pytest.raises(ConfigError):
        SpatialReductionAttention(10, heads=3)


@pytest.mark.parametrize("shape,sizes", [((2, 3, 256, 256), (64, 32, 16, 8)), ((1, 3, 128, 128), (32, 16, 8, 4))])
def test_pyramid_shapes_default_config(shape, sizes):
    cfg = EncoderConfig()
    enc = PyramidEncoder(cfg).eval()
    with torch.no_grad():
        pyr = encode_pyramid(torch.rand(shape), enc)
    assert [p.shape[-1] for p in pyr] == list(sizes)
    assert [p.shape[-2] for p in pyr] == list(sizes)
    assert [p.shape[1] for p in pyr] == list(cfg.channels)
    assert all(p.shape[0] == shape[0] for p in pyr)


@settings(max_examples=8, deadline=None)
@given(hk=st.integers(1, 4), wk=st.integers(1, 4))
def test_pyramid_shape_contract(hk, wk):
    enc = PyramidEncoder(TINY).eval()
    H, W = 32 * hk, 32 * wk
    with torch.no_grad():
        pyr = enc(torch.rand(1, 3, H, W))
    for p, s in zip(pyr, enc.strides):
        assert p.shape[-2:] == (H // s, W // s)


def test_pyramid_deterministic():
    enc = PyramidEncoder(TINY).eval()
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        a, b = enc(x), enc(x)
    assert all(torch.equal(p, q) for p, q in zip(a, b))


@pytest.mark.parametrize("shape", [(1, 3, 100, 128), (1, 3, 128, 48), (1, 1, 64, 64), (3, 64, 64)])
def test_pyramid_rejects_bad_input(shape):
    with pytest.raises(PreconditionError):
        PyramidEncoder(TINY)(torch.rand(shape))


def test_pyramid_rejects_nonfinite():
    x = torch.rand(1, 3, 32, 32)
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(PreconditionError):
        PyramidEncoder(TINY)(x)


def test_encoder_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(channels=(8, 16, 30, 64), heads=(1, 2, 4, 8)).validate()
    with pytest.raises(ConfigError):
        EncoderConfig(sr_ratios=(1, 2, 4, 8)).validate()
    with pytest.raises(ConfigError):
        EncoderConfig(depths=(1, 1, 1)).validate()


def test_siamese_weight_sharing():
    enc = SiameseEncoder(TINY).eval()
    x = torch.rand(2, 3, 64, 64)
    y = torch.rand(2, 3, 64, 64)
    with torch.no_grad():
        p1, p2 = siamese_encode(x, x.clone(), enc)
        assert all(torch.equal(a, b) for a, b in zip(p1, p2))
        a1, a2 = enc(x, y)
        b1, b2 = enc(y, x)
    assert all(torch.equal(u, v) for u, v in zip(a1, b2))
    assert all(torch.equal(u, v) for u, v in zip(a2, b1))


def test_siamese_param_count_equals_single_encoder():
    siamese = SiameseEncoder(TINY)
    single = PyramidEncoder(TINY)
    assert sum(p.numel() for p in siamese.parameters()) == sum(p.numel() for p in single.parameters())


def test_siamese_shape_mismatch():
    with pytest.raises(PreconditionError):
        SiameseEncoder(TINY)(torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 96))


@pytest.mark.parametrize("sr", [1, 2])
def test_transformer_block_gradcheck(sr):
    blk = TransformerBlock(8, heads=2, sr_ratio=sr, mlp_ratio=2.0)
    x = torch.randn(1, 16, 8)

    class Wrap(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.blk = blk

        def forward(self, t):
            return self.blk(t, 4, 4)

    assert module_gradcheck(Wrap(), [x]) <= 1e-4
