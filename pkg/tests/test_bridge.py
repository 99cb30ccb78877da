import numpy as np
import pytest
import torch

from mcddpm.bridge import BridgeConfig, BridgeNet, bridge_encode, bridge_reconstruct, num_groups


def residual_map_params(cin, cout, hidden, blocks):
    conv3 = lambda a, b: a * b * 9 + b
    block = 2 * (2 * hidden) + 2 * conv3(hidden, hidden)
    return conv3(cin, hidden) + blocks * block + 2 * hidden + hidden * cout + cout


@pytest.fixture
def bridge():
    torch.manual_seed(0)
    return BridgeNet(BridgeConfig(latent_channels=4, hidden=8))


def test_latent_shape_on_full_slice(bridge):
    x = np.random.default_rng(0).standard_normal((96, 96))
    z = bridge_encode(x, bridge)
    assert tuple(z.shape) == (4, 96, 96)
    assert tuple(bridge_reconstruct(z, bridge).shape) == (96, 96)


@pytest.mark.parametrize("cz", [1, 4, 16])
def test_latent_channel_count(cz):
    net = BridgeNet(BridgeConfig(latent_channels=cz, hidden=8))
    z, xhat = net(torch.zeros(2, 1, 16, 24))
    assert z.shape == (2, cz, 16, 24)
    assert xhat.shape == (2, 1, 16, 24)


def test_batch_without_channel_axis(bridge):
    z = bridge.encode(torch.zeros(3, 8, 8))
    assert z.shape == (3, 4, 8, 8)


def test_deterministic_in_eval(bridge):
    bridge.eval()
    x = torch.randn(2, 1, 16, 16)
    assert torch.equal(bridge(x)[0], bridge(x)[0])


def test_rejects_bad_input(bridge):
    with pytest.raises(ValueError):
        bridge.encode(torch.zeros(1, 2, 8, 8))
    with pytest.raises(ValueError):
        bridge.encode(torch.full((1, 1, 8, 8), float("nan")))
    with pytest.raises(ValueError):
        bridge.reconstruct(torch.zeros(1, 3, 8, 8))


def test_small_perturbation_gives_small_change(bridge):
    bridge = bridge.double()
    x = torch.randn(1, 1, 16, 16, dtype=torch.float64)
    d = torch.randn_like(x)
    base = bridge.encode(x)
    diffs = [(bridge.encode(x + eps * d) - base).abs().max().item() for eps in (1e-3, 1e-4, 1e-5)]
    assert diffs[0] > diffs[1] > diffs[2]
    assert diffs[2] < 1e-3


def test_gradcheck_float64():
    torch.manual_seed(1)
    net = BridgeNet(BridgeConfig(latent_channels=2, hidden=4, num_blocks=1)).double()
    x = torch.randn(1, 1, 6, 6, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda a: net(a)[1], (x,), eps=1e-6, atol=1e-6)


def test_parameter_count(bridge):
    n = sum(p.numel() for p in bridge.parameters())
    expected = residual_map_params(1, 4, 8, 2) + residual_map_params(4, 1, 8, 2)
    assert n == expected


def test_groups_divide_channels():
    for c in range(1, 70):
        g = num_groups(c)
        assert c % g == 0
        assert c == 1 or c // g >= 2


def test_reconstruction_loss_decreases(bridge):
    rng = np.random.default_rng(0)
    clean = torch.tensor(rng.random((4, 1, 16, 16)), dtype=torch.float32)
    noisy = clean + 0.3 * torch.randn_like(clean)
    opt = torch.optim.Adam(bridge.parameters(), lr=1e-3)
    losses = []
    for _ in range(200):
        opt.zero_grad()
        loss = ((bridge(noisy)[1] - clean) ** 2).mean()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert losses[-1] < 0.5 * losses[0]


def test_every_parameter_receives_gradient(bridge):
    x = torch.randn(2, 1, 8, 8)
    bridge(x)[1].square().mean().backward()
    for name, p in bridge.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name
