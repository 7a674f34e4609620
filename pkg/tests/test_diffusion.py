from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flare_uq.diffusion import (
    cosine_schedule,
    ddim_step,
    ddpm_step,
    forward_noising,
    linear_schedule,
    make_noise,
    oracle_eps,
    sample_trajectory,
    schedule_from_betas,
    write_schedule_csv,
)
from flare_uq.errors import InvalidArgument, NumericalBreakdown


def zero_model(x, t):
    return np.zeros_like(np.asarray(x, dtype=np.float64))


@settings(max_examples=30, deadline=None)
@given(T=st.integers(2, 1000))
def test_cosine_invariants(T):
    s = cosine_schedule(T)
    ab = s.bar_alpha[1:]
    assert ab[-1] < ab[0]
    assert np.all(np.diff(ab) < 0)
    assert np.all(s.a[1:] == 1.0 / np.sqrt(1.0 - s.beta[1:]))
    assert np.all(s.a[1:] >= 1.0) and np.all(s.b[1:] > 0) and np.all(s.tilde_beta >= 0)
    assert s.tilde_beta[1] == 0.0


def test_cosine_600():
    s = cosine_schedule(600)
    assert np.all(s.beta[1:] > 0) and np.all(s.beta[1:] <= 0.999)
    assert s.tilde_beta[1] == 0.0


def test_schedule_identities():
    s = cosine_schedule(50)
    t = np.arange(1, 51)
    np.testing.assert_allclose(
        s.b[t], s.beta[t] / (np.sqrt(s.alpha[t]) * np.sqrt(1 - s.bar_alpha[t])), rtol=1e-15)
    np.testing.assert_allclose(
        s.tilde_beta[t], (1 - s.bar_alpha[t - 1]) / (1 - s.bar_alpha[t]) * s.beta[t], rtol=1e-15)
    np.testing.assert_allclose(s.bar_alpha[t], np.cumprod(1 - s.beta[t]), rtol=1e-14)


def test_cosine_rejects_short():
    with pytest.raises(InvalidArgument):
        cosine_schedule(1)
    with pytest.raises(InvalidArgument):
        schedule_from_betas([0.5, 1.0])


def test_forward_noising_examples():
    s = cosine_schedule(10)
    x0 = np.array([1.0, -2.0])
    eps = np.array([0.3, 0.4])
    np.testing.assert_array_equal(forward_noising(s, x0, 0, eps), x0)
    np.testing.assert_allclose(forward_noising(s, np.zeros(2), 5, eps),
                               np.sqrt(1 - s.bar_alpha[5]) * eps)
    fake = SimpleNamespace(bar_alpha=np.array([1.0, 0.25]))
    np.testing.assert_allclose(forward_noising(fake, [2.0], 1, [0.0]), [1.0])


def test_ddpm_step_examples():
    s = cosine_schedule(10)
    x = np.array([0.7, -1.2])
    np.testing.assert_array_equal(ddpm_step(zero_model, s, x, 4, np.zeros(2)), s.a[4] * x)
    fake = SimpleNamespace(a=np.array([0.0, 2.0]), b=np.array([0.0, 1.0]))
    out = ddpm_step(lambda x, t: np.array([0.5]), fake, np.array([1.0]), 1, np.zeros(1))
    np.testing.assert_allclose(out, [1.5])


def test_ddim_step_examples():
    s = cosine_schedule(10)
    x = np.array([0.7, -1.2])
    np.testing.assert_allclose(ddim_step(zero_model, s, x, 6),
                               np.sqrt(s.bar_alpha[5] / s.bar_alpha[6]) * x, rtol=1e-14)
    same = SimpleNamespace(bar_alpha=np.array([1.0, 0.3, 0.3]))
    eps = lambda x, t: np.array([0.2])
    np.testing.assert_allclose(ddim_step(eps, same, np.array([1.0]), 2), [1.0], rtol=1e-14)
    fake = SimpleNamespace(bar_alpha=np.array([1.0, 0.64, 0.25]))
    got = ddim_step(lambda x, t: np.array([0.5]), fake, np.array([1.0]), 2)
    x0_hat = (1.0 - 0.5 * 0.75 ** 0.5) / 0.5
    ref = 0.8 * x0_hat + 0.6 * 0.5
    assert abs(got[0] - ref) < 1e-12


def test_ddpm_last_step_deterministic():
    s = cosine_schedule(8)
    n = make_noise(s, 3, 0, np.arange(4))
    assert np.all(n.eta[1] == 0.0)


def test_trajectory_reproducible_and_zero_model():
    s = cosine_schedule(12)
    n = make_noise(s, 3, 5, np.arange(6))
    a = sample_trajectory(zero_model, s, "ddpm", n)
    b = sample_trajectory(zero_model, s, "ddpm", n)
    assert np.array_equal(a, b)
    d = sample_trajectory(zero_model, s, "ddim", n)
    np.testing.assert_allclose(d[0], n.x_T / np.sqrt(s.bar_alpha[12]), rtol=1e-12)


def test_noise_per_sample_streams():
    s = cosine_schedule(6)
    full = make_noise(s, 2, 9, np.arange(5))
    part = make_noise(s, 2, 9, [3])
    assert np.array_equal(full.x_T[3], part.x_T[0])
    assert np.array_equal(full.eta[:, 3], part.eta[:, 0])
    z = full.zeroed()
    assert z.is_zero and not np.any(z.eta) and np.array_equal(z.x_T, full.x_T)


def test_oracle_ddim_recovers_x0():
    s = cosine_schedule(100)
    x0 = np.array([[0.3, -1.1, 2.0]])
    eps = np.random.default_rng(0).standard_normal(x0.shape)
    n = make_noise(s, 3, 0, [0])
    n.x_T[:] = forward_noising(s, x0, 100, eps)
    out = sample_trajectory(oracle_eps(s, x0), s, "ddim", n, keep=False)
    np.testing.assert_allclose(out, x0, atol=1e-8)


def test_nonfinite_model_raises():
    s = cosine_schedule(4)
    with pytest.raises(NumericalBreakdown):
        ddpm_step(lambda x, t: np.full_like(x, np.nan), s, np.ones(2), 2)


def test_schedule_csv(tmp_path):
    s = linear_schedule(5)
    p = tmp_path / "s.csv"
    write_schedule_csv(s, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "t,beta,alpha,bar_alpha,a,b,tilde_beta"
    assert len(lines) == 6
    assert float(lines[3].split(",")[1]) == s.beta[3]
    assert s.hash != cosine_schedule(5).hash
