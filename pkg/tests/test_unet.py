import numpy as np
import pytest
import torch

from mcddpm.unet import ConditionalUNet, CrossAttention, UNetConfig, sinusoidal_embedding


def small_config(**kw):
    base = dict(in_channels=5, base_width=8, depth=3, attention_heads=4, time_embed_dim=16)
    base.update(kw)
    return UNetConfig(**base)


@pytest.fixture
def net():
    torch.manual_seed(0)
    return ConditionalUNet(small_config()).eval()


def inputs(B=2, hw=32, cz=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(B, 1, hw, hw, generator=g), torch.randn(B, cz, hw, hw, generator=g)


def test_bottleneck_resolution():
    torch.manual_seed(0)
    net = ConditionalUNet(UNetConfig(base_width=8, time_embed_dim=16))
    x = torch.randn(1, 5, 96, 96)
    h, skips, _ = net.encode(x, torch.tensor([10]))
    assert h.shape == (1, 64, 12, 12)
    assert [tuple(s.shape[2:]) for s in skips] == [(96, 96), (48, 48), (24, 24)]


def test_output_shape(net):
    x, z = inputs()
    ctx = net.make_context(x, z)
    out = net(x, z, torch.tensor([3, 700]), ctx)
    assert out.shape == (2, 1, 32, 32)


def test_time_step_changes_output(net):
    x, z = inputs()
    ctx = net.make_context(x, z)
    a = net(x, z, 0, ctx)
    b = net(x, z, 500, ctx)
    assert not torch.allclose(a, b)


def test_time_embedding_is_injective_on_steps():
    emb = sinusoidal_embedding(torch.arange(0, 1001), 64)
    assert torch.isfinite(emb).all()
    assert torch.unique(emb, dim=0).shape[0] == 1001
    assert torch.equal(emb[0, :32], torch.zeros(32))


def test_context_shape_and_determinism(net):
    x, z = inputs()
    c1 = net.make_context(x, z)
    c2 = net.make_context(x, z)
    assert c1.shape == (2, 64, 4, 4)
    assert torch.equal(c1, c2)


def test_attention_rows_are_distributions(net):
    x, z = inputs()
    h, _, _ = net.encode(torch.cat([x, z], 1), 100)
    _, w = net.cross_attention(h, net.make_context(x, z), return_weights=True)
    torch.testing.assert_close(w.sum(-1), torch.ones(w.shape[:-1]))
    assert (w >= 0).all()


def test_single_position_context_gives_unit_weights():
    torch.manual_seed(0)
    att = CrossAttention(16, 4)
    out, w = att(torch.randn(2, 16, 3, 3), torch.randn(2, 16, 1, 1), return_weights=True)
    assert torch.equal(w, torch.ones_like(w))
    assert out.shape == (2, 16, 3, 3)


def test_attention_invariant_to_context_permutation():
    torch.manual_seed(0)
    att = CrossAttention(16, 2).double()
    x = torch.randn(1, 16, 4, 4, dtype=torch.float64)
    ctx = torch.randn(1, 16, 4, 4, dtype=torch.float64)
    perm = torch.randperm(16)
    shuffled = ctx.flatten(2)[:, :, perm].reshape(1, 16, 4, 4)
    torch.testing.assert_close(att(x, ctx), att(x, shuffled), rtol=1e-12, atol=1e-12)


def test_heads_must_divide_channels():
    with pytest.raises(ValueError):
        CrossAttention(10, 4)


def test_forward_is_composition(net):
    x, z = inputs()
    ctx = net.make_context(x, z)
    t = torch.tensor([5, 9])
    h, skips, temb = net.encode(torch.cat([x, z], 1), t)
    manual = net.decode(net.cross_attention(h, ctx), skips, temb)
    assert torch.equal(manual, net(x, z, t, ctx))


def test_context_is_live(net):
    x, z = inputs()
    ctx = net.make_context(x, z)
    a = net(x, z, 200, ctx)
    b = net(x, z, 200, torch.zeros_like(ctx))
    assert (a - b).abs().max() > 1e-4


def test_unconditioned_ignores_context():
    torch.manual_seed(0)
    net = ConditionalUNet(small_config(conditioning=False)).eval()
    x, z = inputs()
    a = net(x, z, 200)
    b = net(x, z, 200, torch.randn(2, 64, 4, 4))
    assert torch.equal(a, b)


def test_conditioned_requires_context(net):
    x, z = inputs()
    with pytest.raises(ValueError):
        net(x, z, 1)


def test_single_channel_variant():
    torch.manual_seed(0)
    net = ConditionalUNet(small_config(in_channels=1))
    x, _ = inputs()
    assert net(x, None, 7, net.make_context(x)).shape == (2, 1, 32, 32)


def test_unshared_context_encoder_is_separate():
    torch.manual_seed(0)
    net = ConditionalUNet(small_config(share_context_encoder=False))
    assert net.context_encoder is not None
    assert net.context_encoder.inp.weight.data_ptr() != net.encoder.inp.weight.data_ptr()


@pytest.mark.parametrize("shape", [(1, 4, 32, 32), (1, 5, 30, 32), (5, 32, 32)])
def test_input_validation(net, shape):
    with pytest.raises(ValueError):
        net.encode(torch.zeros(shape), 1)


def test_decoder_rejects_wrong_skips(net):
    x, z = inputs()
    h, skips, temb = net.encode(torch.cat([x, z], 1), 1)
    with pytest.raises(ValueError):
        net.decode(h, skips[:-1], temb)
    with pytest.raises(ValueError):
        net.decode(h, [s[:, :, :-2, :-2] for s in skips], temb)


def test_large_inputs_stay_finite(net):
    g = torch.Generator().manual_seed(3)
    x = 3 * torch.randn(2, 1, 32, 32, generator=g)
    z = 3 * torch.randn(2, 4, 32, 32, generator=g)
    out = net(x, z, 1000, net.make_context(x, z))
    assert torch.isfinite(out).all()


def test_decoder_gradient_matches_finite_differences():
    torch.manual_seed(0)
    net = ConditionalUNet(small_config(base_width=4, depth=2, time_embed_dim=8)).double()
    x = torch.randn(1, 5, 8, 8, dtype=torch.float64)
    h, skips, temb = net.encode(x, 40)
    h = h.detach().requires_grad_(True)
    assert torch.autograd.gradcheck(lambda a: net.decode(a, [s.detach() for s in skips], temb.detach()), (h,))


def test_evaluation_counter(net):
    x, z = inputs(B=3)
    net.evaluations = 0
    net(x, z, 1, net.make_context(x, z))
    assert net.evaluations == 3
    net.make_context(x, z)
    assert net.evaluations == 3


def test_time_step_count_must_match_batch(net):
    with pytest.raises(ValueError):
        net.time_embedding(np.array([1, 2, 3]), 2)
