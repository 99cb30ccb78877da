import numpy as np
import pytest

from mcddpm.inference import DEFAULT_T_TEST, reconstruct_slice, reconstruct_volume, residual_map, slice_rng
from mcddpm.model import ModelConfig, build_model
from mcddpm.schedule import make_linear_schedule

TINY = dict(latent_channels=2, bridge_hidden=4, base_width=4, depth=2, attention_heads=2, time_embed_dim=8)


@pytest.fixture(scope="module")
def schedule():
    return make_linear_schedule(1000)


@pytest.fixture(scope="module", params=["full", "no_bridge", "no_conditioning"])
def model(request):
    return build_model(ModelConfig(ablation=request.param, **TINY), seed=0).eval()


def volume(shape=(16, 16, 5), seed=0):
    return np.random.default_rng(seed).random(shape)


def test_default_test_step():
    assert DEFAULT_T_TEST == 500


def test_volume_shape(model, schedule):
    v = volume((96, 96, 80))
    out = reconstruct_volume(v, model, schedule)
    assert out.shape == v.shape
    assert np.isfinite(out).all()


def test_same_seed_same_reconstruction(model, schedule):
    v = volume()
    a = reconstruct_volume(v, model, schedule, seed=3)
    b = reconstruct_volume(v, model, schedule, seed=3)
    c = reconstruct_volume(v, model, schedule, seed=4)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)


def test_sub_volume_matches_full_volume(model, schedule):
    v = volume((16, 16, 7))
    full = reconstruct_volume(v, model, schedule, seed=1)
    part = reconstruct_volume(v[:, :, 2:5], model, schedule, seed=1, slice_indices=[2, 3, 4])
    assert part.tobytes() == np.ascontiguousarray(full[:, :, 2:5]).tobytes()


def test_one_denoiser_pass_per_slice(model, schedule):
    model.unet.evaluations = 0
    reconstruct_volume(volume((16, 16, 6)), model, schedule)
    assert model.unet.evaluations == 6


def test_repeats_average_independent_draws(model, schedule):
    x = volume()[:, :, 0]
    single = [reconstruct_slice(x, model, schedule, 500, slice_rng(0, 0))]
    rng = slice_rng(0, 0)
    draws = [reconstruct_slice(x, model, schedule, 500, rng) for _ in range(3)]
    avg = reconstruct_slice(x, model, schedule, 500, slice_rng(0, 0), repeats=3)
    np.testing.assert_allclose(avg, np.mean(draws, axis=0), rtol=0, atol=1e-12)
    assert np.array_equal(single[0], draws[0])


def test_slice_validation(model, schedule):
    with pytest.raises(ValueError):
        reconstruct_slice(np.zeros((4, 4, 4)), model, schedule)
    with pytest.raises(ValueError):
        reconstruct_slice(np.zeros((16, 16)), model, schedule, t_test=0)
    with pytest.raises(ValueError):
        reconstruct_volume(np.zeros((16, 16)), model, schedule)
    with pytest.raises(ValueError):
        reconstruct_volume(np.zeros((16, 16, 3)), model, schedule, slice_indices=[0, 1])


def test_residual_map_examples():
    v = np.array([[[0.5, 0.2]]])
    vh = np.array([[[0.1, 0.4]]])
    np.testing.assert_allclose(residual_map(v, vh, 1), [[[0.4, 0.2]]], atol=1e-15)
    np.testing.assert_allclose(residual_map(v, vh, 2), [[[0.16, 0.04]]], atol=1e-15)
    assert not residual_map(v, v, 2).any()
    with pytest.raises(ValueError):
        residual_map(v, vh, 3)
    with pytest.raises(ValueError):
        residual_map(v, vh[..., :1], 2)
