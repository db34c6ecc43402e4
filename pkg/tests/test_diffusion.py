import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from satcodec import tensor as T
from satcodec.diffusion import (
    CABlock,
    DiffusionConfig,
    DiffusionModel,
    LatentProjection,
    MetadataEncoder,
    ScheduleError,
    ddim_sample,
    ddim_step,
    forward_diffuse,
    generate_compensation,
    inject_latent,
    make_schedule,
    sampling_timesteps,
    sinusoidal_embedding,
)
from satcodec.metadata import MetadataRecord
from satcodec.tensor import ShapeError, Tensor

SCHED = make_schedule()
TOY = DiffusionConfig(latent_channels=8, comp_channels=4, base_channels=16, cond_dim=16, field_dim=4, time_dim=16, groups=4)


def test_default_schedule_values():
    assert SCHED.alpha_bar[-1] == pytest.approx(4.0e-5, rel=0.02)
    assert SCHED.alpha_bar[-1] < 0.01
    assert np.all(np.diff(SCHED.beta) > 0)
    assert np.all(np.diff(SCHED.alpha_bar) < 0)
    one = make_schedule(1, 0.3, 0.3)
    assert one.alpha_bar[0] == pytest.approx(0.7)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.02, 1e-4), (10, 0.0, 0.02), (10, 1e-4, 1.0)])
def test_bad_schedules_are_rejected(args):
    with pytest.raises(ScheduleError):
        make_schedule(*args)


def test_forward_diffuse_cases(rng):
    z0 = rng.standard_normal((2, 4, 3, 3))
    np.testing.assert_allclose(forward_diffuse(z0, 500, np.zeros_like(z0), SCHED), np.sqrt(SCHED.abar(500)) * z0)
    per_sample = forward_diffuse(z0, np.array([1, 1000]), np.zeros_like(z0), SCHED)
    np.testing.assert_allclose(per_sample[1], np.sqrt(SCHED.abar(1000)) * z0[1])
    for bad in (0, 1001):
        with pytest.raises(ScheduleError):
            forward_diffuse(z0, bad, z0, SCHED)
    with pytest.raises(ScheduleError):
        forward_diffuse(z0, 1.5, z0, SCHED)


def test_terminal_step_decorrelates(rng):
    z0 = rng.standard_normal(10_000)
    zt = forward_diffuse(z0, SCHED.T, rng.standard_normal(10_000), SCHED)
    assert abs(np.corrcoef(z0, zt)[0, 1]) < 0.05


@given(t=st.integers(1, 1000), seed=st.integers(0, 2**16))
def test_ddim_inversion_with_oracle_noise(t, seed):
    rng = np.random.default_rng(seed)
    z0, eps = rng.standard_normal((4, 8, 8)), rng.standard_normal((4, 8, 8))
    zt = forward_diffuse(z0, t, eps, SCHED)
    np.testing.assert_allclose(ddim_step(zt, t, 0, eps, SCHED), z0, atol=1e-6 * max(1.0, 1 / np.sqrt(SCHED.abar(t))))


def test_ddim_zero_noise_rescales(rng):
    z = rng.standard_normal((3, 3))
    out = ddim_step(z, 700, 300, np.zeros_like(z), SCHED)
    np.testing.assert_allclose(out, np.sqrt(SCHED.abar(300) / SCHED.abar(700)) * z)
    with pytest.raises(ScheduleError):
        ddim_step(z, 300, 300, z, SCHED)


def test_sampling_timesteps():
    assert sampling_timesteps(1000, 25)[:3] == [1000, 960, 920]
    assert sampling_timesteps(1000, 25)[-1] == 40
    assert sampling_timesteps(1000, 1000) == list(range(1000, 0, -1))
    assert len(set(sampling_timesteps(1000, 7))) == 7
    with pytest.raises(ScheduleError):
        sampling_timesteps(1000, 0)


def test_full_length_sampling_with_oracle_network_recovers_z0(rng):
    z0 = rng.standard_normal((1, 4, 4, 4))

    def oracle(z, t):
        ab = SCHED.abar(t)
        return (z - np.sqrt(ab) * z0) / np.sqrt(1 - ab)

    np.testing.assert_allclose(ddim_sample(oracle, z0.shape, SCHED, SCHED.T, seed=3), z0, atol=1e-4)


def test_sinusoidal_embedding_layout():
    e = sinusoidal_embedding(np.zeros(3), 6)
    np.testing.assert_array_equal(e, np.tile([0.0, 1.0], (3, 3)))
    with pytest.raises(ValueError):
        sinusoidal_embedding([np.inf], 4)
    with pytest.raises(ValueError):
        sinusoidal_embedding([1.0], 5)


def test_metadata_encoder_determinism_and_sensitivity(rng):
    enc = MetadataEncoder(16, 4, rng)
    assert np.array_equal(enc.features(np.zeros(8)), np.tile([0.0, 1.0], 16))
    a = MetadataRecord().normalized()
    b = a.copy()
    b[3] += 5.0
    ca, ca2, cb = enc(a).data, enc(a.copy()).data, enc(b).data
    assert ca.shape == (1, 1, 16)
    np.testing.assert_array_equal(ca, ca2)
    assert not np.allclose(ca, cb)
    with pytest.raises(ShapeError):
        enc.features(np.zeros(7))


def test_inject_latent_properties(rng):
    proj = LatentProjection(8, 6, rng)
    y = Tensor(rng.standard_normal((1, 8, 2, 2)))
    f1, f2 = Tensor(rng.standard_normal((1, 6, 8, 8))), Tensor(rng.standard_normal((1, 6, 8, 8)))
    d1 = inject_latent(f1, y, proj).data - f1.data
    d2 = inject_latent(f2, y, proj).data - f2.data
    np.testing.assert_allclose(d1, d2, atol=1e-6)
    np.testing.assert_allclose(inject_latent(Tensor(np.zeros((1, 6, 8, 8))), y, proj).data, proj(y, (8, 8)).data)
    proj.conv.weight.data[:] = 0
    proj.conv.bias.data[:] = 0
    np.testing.assert_array_equal(inject_latent(f1, y, proj).data, f1.data)
    with pytest.raises(ShapeError):
        inject_latent(Tensor(np.zeros((1, 6, 6, 6))), Tensor(np.zeros((1, 8, 4, 4))), proj)


def test_single_token_attention_is_value_projection(rng):
    block = CABlock(8, 16, 4, rng)
    x = Tensor(rng.standard_normal((2, 8, 4, 4)))
    c = Tensor(rng.standard_normal((2, 1, 16)))
    expected = block.out(block.v(c)).data  # (2, 1, 8)
    out = block.attend(x, c).data
    for n in range(2):
        np.testing.assert_allclose(out[n], np.broadcast_to(expected[n, 0][:, None, None], (8, 4, 4)), rtol=1e-5, atol=1e-6)
    x2 = Tensor(rng.standard_normal((2, 8, 4, 4)))
    np.testing.assert_allclose(block.attend(x2, c).data, out, rtol=1e-5, atol=1e-6)


@pytest.fixture(scope="module")
def toy_model():
    return DiffusionModel(TOY, seed=0)


def test_unet_shapes_and_conditioning(toy_model):
    rng = np.random.default_rng(0)
    z = rng.standard_normal((2, 4, 16, 16)).astype(np.float32)
    y = rng.integers(-3, 4, (2, 8, 4, 4)).astype(np.float32)
    meta = np.stack([MetadataRecord().normalized(), MetadataRecord(sun_elevation=60.0).normalized()])
    with T.no_grad():
        out = toy_model(z, np.array([10, 900]), y, meta).data
        alt = toy_model(z, np.array([10, 900]), y, meta[::-1].copy()).data
        none = toy_model(z, np.array([10, 900]), y, None).data
    assert out.shape == z.shape
    assert not np.allclose(out, alt) and not np.allclose(out, none)
    with pytest.raises(ShapeError):
        toy_model(z, 1, y, meta[:1])


def test_zero_token_when_metadata_is_off(toy_model):
    c = toy_model.condition(None, 3)
    assert c.shape == (3, 1, TOY.cond_dim) and not c.data.any()


def test_generate_compensation_determinism(toy_model):
    y = np.random.default_rng(1).integers(-2, 3, (8, 4, 4))
    rec = MetadataRecord(cloud_cover=0.2)
    a = generate_compensation(y, rec, 5, seed=0, model=toy_model)
    b = generate_compensation(y, rec, 5, seed=0, model=toy_model)
    c = generate_compensation(y, rec, 5, seed=1, model=toy_model)
    assert a.shape == (4, 16, 16)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    for steps in (10, 25, 50):
        assert np.all(np.isfinite(generate_compensation(y, rec, steps, 0, toy_model)))
