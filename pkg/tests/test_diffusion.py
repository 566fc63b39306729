import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffhcd.diffusion import (
    GuidanceConfig,
    cfg_epsilon,
    cosine_schedule,
    ddim_sample,
    ddim_step,
    ddim_timesteps,
    forward_diffuse,
    guided_epsilon,
    null_condition,
)

# direct scalar evaluation of the cosine schedule (math module, not numpy)
GAMMA_0 = 0.9998445910004082
GAMMA_1023 = 2.3158927401178596e-06


def test_schedule_endpoints():
    g = cosine_schedule(1024).gamma
    assert g.shape == (1024,)
    assert abs(g[0] - GAMMA_0) / GAMMA_0 < 1e-6
    assert abs(g[1023] - GAMMA_1023) / GAMMA_1023 < 1e-6
    assert abs(g[0] - 0.9998446) < 1e-7
    assert abs(g[1023] - 2.30e-6) < 0.02e-6  # the published figure carries 3 digits


def test_schedule_matches_scalar_formula():
    g = cosine_schedule(37).gamma
    expected = [math.cos(((t / 37 + 0.008) / 1.008) * math.pi / 2) ** 2 for t in range(37)]
    np.testing.assert_allclose(g, expected, rtol=1e-12)


def test_schedule_monotone_all_T():
    for T in range(2, 4097):
        g = cosine_schedule(T).gamma
        assert np.all(np.diff(g) < 0) and g[0] < 1 and g[-1] > 0, T


def test_schedule_rejects_small_T():
    with pytest.raises(ValueError):
        cosine_schedule(1)


def test_snr():
    s = cosine_schedule(16)
    np.testing.assert_allclose(s.snr, s.gamma / (1 - s.gamma))


def test_forward_diffuse_examples():
    assert forward_diffuse(np.array(1.0), np.array(0.5), 0.25) == pytest.approx(0.5 + math.sqrt(0.75) * 0.5)
    assert float(forward_diffuse(np.array(1.0), np.array(0.5), 0.25)) == pytest.approx(0.93301, abs=1e-5)
    y0, eps = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
    np.testing.assert_array_equal(forward_diffuse(y0, eps, 1.0), y0)
    np.testing.assert_array_equal(forward_diffuse(y0, eps, 0.0), eps)


def test_forward_diffuse_errors():
    with pytest.raises(ValueError):
        forward_diffuse(np.zeros(3), np.zeros(4), 0.5)
    with pytest.raises(ValueError):
        forward_diffuse(np.zeros(3), np.zeros(3), 1.5)


def test_forward_diffuse_per_item_gamma():
    y0 = np.ones((2, 1, 2, 2))
    out = forward_diffuse(y0, np.zeros_like(y0), np.array([0.25, 1.0]))
    np.testing.assert_allclose(out[:, 0, 0, 0], [0.5, 1.0])


@pytest.mark.parametrize("gamma", [0.9, 0.3, 0.01])
def test_forward_diffuse_variance(gamma):
    eps = np.random.default_rng(5).standard_normal(200_000)
    v = forward_diffuse(np.zeros_like(eps), eps, gamma).var()
    assert abs(v / (1 - gamma) - 1) < 0.05


def test_cfg_examples():
    assert float(cfg_epsilon(np.array(0.2), np.array(0.1), 1.0)) == pytest.approx(0.3)
    a, b = np.random.default_rng(1).standard_normal((2, 5))
    np.testing.assert_array_equal(cfg_epsilon(a, b, 0.0), a)
    np.testing.assert_allclose(cfg_epsilon(a, a, 3.7), a)
    np.testing.assert_allclose(cfg_epsilon(a, b, 0.6), 1.6 * a - 0.6 * b)
    with pytest.raises(ValueError):
        cfg_epsilon(a, b[:3], 1.0)


def test_guidance_null_value_outside_range():
    with pytest.raises(ValueError):
        GuidanceConfig(1.0, 0.5)
    assert np.all(null_condition((2, 3), -2.0) == -2.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 1023), st.integers(0, 2**31 - 1))
def test_ddim_step_inverts_exact_eps(t, seed):
    rng = np.random.default_rng(seed)
    g = cosine_schedule(1024).gamma
    y0 = rng.uniform(-1, 1, (2, 3, 3))
    eps = rng.standard_normal(y0.shape)
    y_t = forward_diffuse(y0, eps, g[t])
    _, x0 = ddim_step(y_t, eps, g[t], g[0])
    # the division by sqrt(gamma) amplifies rounding at the noisiest levels
    np.testing.assert_allclose(x0, y0, atol=1e-12 / math.sqrt(g[t]) * 10)
    y_prev, _ = ddim_step(y_t, eps, g[t], 1.0)
    np.testing.assert_allclose(y_prev, y0, atol=1e-12 / math.sqrt(g[t]) * 10)


def test_ddim_step_clamps_and_is_deterministic():
    rng = np.random.default_rng(2)
    y, e = rng.standard_normal((2, 4, 4)) * 5
    a = ddim_step(y, e, 0.3, 0.6)
    b = ddim_step(y, e, 0.3, 0.6)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    assert a[1].min() >= -1 and a[1].max() <= 1


def test_ddim_step_errors():
    z = np.zeros(2)
    with pytest.raises(ValueError):
        ddim_step(z, z, 0.0, 0.5)
    with pytest.raises(ValueError):
        ddim_step(z, z, 0.6, 0.5)


def test_timesteps():
    assert ddim_timesteps(1024, 8).tolist() == [1023, 895, 767, 639, 511, 383, 255, 127]
    assert ddim_timesteps(1024, 1).tolist() == [1023]
    ts = ddim_timesteps(1024, 64)
    assert len(ts) == 64 and np.all(np.diff(ts) < 0)
    with pytest.raises(ValueError):
        ddim_timesteps(16, 17)


def _oracle_denoiser(y0):
    def fn(y, cond, gamma):
        g = np.asarray(gamma).reshape(-1, 1, 1, 1)
        return (y - np.sqrt(g) * y0) / np.sqrt(1 - g)

    return fn


@pytest.mark.parametrize("n_steps", [1, 8, 64])
def test_ddim_sample_recovers_y0_with_exact_eps(n_steps):
    rng = np.random.default_rng(4)
    y0 = rng.uniform(-1, 1, (3, 6, 6)).astype(np.float32)
    out = ddim_sample(_oracle_denoiser(y0), rng.standard_normal(y0.shape), np.zeros((6, 6, 6)), n_steps)
    np.testing.assert_allclose(out, y0, atol=1e-5)


def test_ddim_sample_batched_matches_single():
    rng = np.random.default_rng(6)
    y0 = rng.uniform(-1, 1, (3, 4, 4))

    def den(y, cond, gamma):
        return 0.3 * y + 0.1 * cond[:, :3] - 0.05 * cond[:, 3:]

    x = rng.uniform(-1, 1, (6, 4, 4))
    eps = rng.standard_normal((3, 3, 4, 4)).astype(np.float32)
    batched = ddim_sample(den, eps, x, 8)
    for i in range(3):
        np.testing.assert_allclose(batched[i], ddim_sample(den, eps[i], x, 8), atol=1e-6)


def test_ddim_sample_deterministic_and_bounded():
    rng = np.random.default_rng(7)
    eps = rng.standard_normal((3, 5, 5))
    x = rng.uniform(-1, 1, (6, 5, 5))

    def den(y, cond, gamma):
        return np.tanh(y + cond[:, :3])

    a = ddim_sample(den, eps, x, 8)
    b = ddim_sample(den, eps, x, 8)
    assert a.tobytes() == b.tobytes()
    assert a.min() >= -1 and a.max() <= 1
    with pytest.raises(ValueError):
        ddim_sample(den, eps, x, 0)


def test_guided_epsilon_omega_zero_is_conditional():
    rng = np.random.default_rng(8)
    y = rng.standard_normal((2, 3, 4, 4))
    x = rng.uniform(-1, 1, (2, 6, 4, 4))

    def den(y_, c, g):
        return y_ * 0.5 + c[:, :3]

    np.testing.assert_array_equal(guided_epsilon(den, y, x, 0.5, GuidanceConfig(0.0)), den(y, x, None))
    # with omega > 0 the unconditional branch sees the -2 fill
    out = guided_epsilon(den, y, x, 0.5, GuidanceConfig(1.0))
    np.testing.assert_allclose(out, 2 * den(y, x, None) - (y * 0.5 - 2.0), atol=1e-12)
