import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flare_uq.datasets import generate
from flare_uq.diffusion import cosine_schedule, linear_schedule, make_noise, schedule_from_betas
from flare_uq.errors import InvalidArgument, ShapeError
from flare_uq.laplace import GgnMatrix, PosteriorOperator, build_posterior
from flare_uq.uncertainty import (
    discount,
    epistemic_rollout,
    flare_sample,
    keep_fraction_sweep,
    llla_rollout,
    one_step_projection,
    predictive_variance_rollout,
    propagate,
    streaming_trace,
    unrolled_accumulation,
)

from conftest import random_spd, tiny_model


def iso_posterior(indices, damping=1.0, kind="full"):
    idx = np.asarray(indices)
    return PosteriorOperator(GgnMatrix(idx, np.zeros((idx.size, idx.size)), 1), damping, kind)


@pytest.fixture(scope="module")
def sine_tiny():
    s = cosine_schedule(8)
    m = tiny_model(d=10, hidden=6, n_blocks=1, E=4, seed=3)
    ds = generate("sine", 0, n=200)
    full = build_posterior(m, ds, s, "full", n_pairs=16, damping=1e-3)
    return m, ds, s, full


def test_one_step_examples(rng):
    np.testing.assert_allclose(one_step_projection(np.eye(3), np.eye(3), 2.0), 4 * np.eye(3))
    assert np.all(one_step_projection(np.zeros((3, 5)), np.eye(5), 1.3) == 0)
    J = rng.standard_normal((3, 5))
    S = random_spd(5, rng)
    np.testing.assert_allclose(one_step_projection(J, S, 0.7), 0.49 * J @ S @ J.T, rtol=1e-10)
    op = PosteriorOperator(GgnMatrix(np.arange(5), S, 1), 1e-2, "full")
    np.testing.assert_allclose(one_step_projection(J, op, 0.7),
                               0.49 * J @ np.linalg.inv(S + 1e-2 * np.eye(5)) @ J.T, rtol=1e-9)
    with pytest.raises(ShapeError):
        one_step_projection(np.ones((3, 4)), np.eye(5), 1.0)


def test_propagate_examples(rng):
    D = random_spd(3, rng)
    np.testing.assert_allclose(propagate(np.zeros((3, 3)), 0.9, D), D)
    P = random_spd(3, rng)
    np.testing.assert_allclose(propagate(P, 1.0, np.zeros((3, 3))), P)
    np.testing.assert_allclose(propagate(np.eye(2), 0.5, np.eye(2)), 1.25 * np.eye(2))


def test_unrolled_examples(rng):
    J = [rng.standard_normal((2, 4)) for _ in range(3)]
    S = random_spd(4, rng)
    np.testing.assert_allclose(unrolled_accumulation([3.0], [0.5], J[:1], S),
                               0.25 * J[0] @ S @ J[0].T, rtol=1e-12)
    plain = sum(0.04 * j @ S @ j.T for j in J)
    np.testing.assert_allclose(unrolled_accumulation([1.0] * 3, [0.2] * 3, J, S), plain, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), T=st.integers(1, 8))
def test_recursion_equals_unroll(seed, T):
    r = np.random.default_rng(seed)
    d, m = 3, 6
    a = r.uniform(0.5, 1.5, T)
    b = r.uniform(0.0, 1.0, T)
    Js = [r.standard_normal((d, m)) for _ in range(T)]
    S = random_spd(m, r)
    sig = np.zeros((d, d))
    for s in range(T - 1, -1, -1):  # step T down to 1
        sig = propagate(sig, a[s], one_step_projection(Js[s], S, b[s]))
    ref = unrolled_accumulation(a, b, Js, S)
    assert abs(np.trace(sig) - np.trace(ref)) <= 1e-10 * np.trace(ref)
    np.testing.assert_allclose(sig, ref, rtol=1e-10, atol=1e-12)


def test_discount_matches_products(sched8):
    w = discount(sched8)
    for t in range(1, 9):
        np.testing.assert_allclose(w[t], np.prod(sched8.a[1:t] ** 2), rtol=1e-12)


def test_zero_posterior_gives_zero(model8, sched8):
    noise = make_noise(sched8, 3, 0, range(4))
    tr = flare_sample(model8, sched8, PosteriorOperator.zero(np.arange(model8.p)), "ddpm", noise)
    assert np.all(tr.sigma0 == 0)


def test_flare_full_set_bit_identical(sine_tiny):
    m, ds, s, full = sine_tiny
    sub = build_posterior(m, ds, s, "subnet", m=m.p, n_pairs=16, damping=1e-3)
    noise = make_noise(s, m.d, 1, range(5))
    a = flare_sample(m, s, sub, "ddpm", noise)
    b = epistemic_rollout(m, s, full, "ddpm", noise, estimator="full")
    assert np.array_equal(a.sigma0, b.sigma0)
    assert np.array_equal(a.x0, b.x0)


def test_rollout_matches_unroll_t4(rng):
    s = cosine_schedule(4)
    m = tiny_model(T=4, seed=5)
    idx = np.sort(rng.choice(m.p, 20, replace=False))
    S = random_spd(20, rng)
    op = PosteriorOperator(GgnMatrix(idx, S, 1), 1e-2, "subnet")
    Sd = op.dense()
    noise = make_noise(s, m.d, 2, [0])
    tr = flare_sample(m, s, op, "ddpm", noise, keep_states=True)
    Js = [m.param_jacobian_columns(tr.states[t][0], t, idx) for t in range(1, 5)]
    ref = unrolled_accumulation(s.a[1:], s.b[1:], Js, Sd)
    assert abs(np.trace(tr.sigma0[0]) - np.trace(ref)) <= 1e-10 * np.trace(ref)
    np.testing.assert_allclose(tr.trace_contrib.sum(axis=0), tr.trace0, rtol=1e-8)


def test_trajectory_invariants(sine_tiny):
    m, ds, s, full = sine_tiny
    tr = flare_sample(m, s, full, "ddpm", make_noise(s, m.d, 0, range(6)), stride=2)
    for sig in [tr.sigma0, *tr.sigma_stride.values()]:
        np.testing.assert_allclose(sig, np.swapaxes(sig, 1, 2), atol=1e-12)
        ev = np.linalg.eigvalsh(sig)
        assert np.all(ev.min(axis=1) >= -1e-9 * np.trace(sig, axis1=1, axis2=2))
    assert np.all(tr.scores >= 0)
    np.testing.assert_allclose(tr.trace_contrib.sum(axis=0), tr.trace0, rtol=1e-8)
    assert sorted(tr.sigma_stride) == [0, 2, 4, 6]


def test_b_scale_homogeneity(sine_tiny):
    m, ds, s, full = sine_tiny
    noise = make_noise(s, m.d, 0, range(3))
    a = flare_sample(m, s, full, "ddpm", noise)
    b = flare_sample(m, s, full, "ddpm", noise, b_scale=3.0)
    np.testing.assert_allclose(b.trace_contrib, 9.0 * a.trace_contrib, rtol=1e-12)


def test_ddim_matches_zeroed_ddpm_replay(sine_tiny):
    m, ds, s, full = sine_tiny
    noise = make_noise(s, m.d, 4, range(3))
    dd = flare_sample(m, s, full, "ddim", noise, keep_states=True)
    rep = flare_sample(m, s, full, "ddpm", noise.zeroed(), replay_states=dd.states)
    assert np.array_equal(dd.sigma0, rep.sigma0)
    assert np.all(dd.aleatoric == 0) and np.all(rep.aleatoric == 0)


def test_streaming_matches_dense(sine_tiny):
    m, ds, s, full = sine_tiny
    noise = make_noise(s, m.d, 0, range(4))
    dense = flare_sample(m, s, full, "ddpm", noise)
    x0, tr, contrib = streaming_trace(m, s, full, noise)
    np.testing.assert_allclose(tr, dense.trace0, rtol=1e-6)
    np.testing.assert_array_equal(x0, dense.x0)


def test_streaming_zero_hessian(sine_tiny):
    m, ds, s, _ = sine_tiny
    lam = 0.5
    op = iso_posterior(np.arange(m.p), lam)
    noise = make_noise(s, m.d, 0, [0])
    tr = flare_sample(m, s, op, "ddpm", noise, keep_states=True)
    _, _, contrib = streaming_trace(m, s, op, noise)
    w = discount(s)
    for t in range(1, s.T + 1):
        J = m.param_jacobian(tr.states[t][0], t)
        assert contrib[t, 0] == pytest.approx(w[t] * s.b[t] ** 2 * np.sum(J * J) / lam, rel=1e-9)


def test_streaming_zero_jacobian(sched8):
    m = tiny_model()
    ll = m.last_layer_indices()
    # weights of the head have zero Jacobian when features vanish; use a zero model
    z = m.with_values(np.zeros(m.p))
    idx = ll[: m.layer("head").out * m.layer("head").inp]
    op = iso_posterior(idx)
    _, tr, contrib = streaming_trace(z, sched8, op, make_noise(sched8, 3, 0, [0]))
    assert np.all(contrib == 0) and tr[0] == 0


def test_llla_examples(sched8):
    m = tiny_model(d=10, hidden=6)
    head = m.layer("head")
    assert m.last_layer_indices().size == 6 * 10 + 10 == head.size
    ds = generate("sine", 0, n=50)
    z = m.with_values(np.zeros(m.p))
    noise = make_noise(sched8, 10, 0, range(3))
    full = build_posterior(z, ds, sched8, "full", n_pairs=8)
    ll = build_posterior(z, ds, sched8, "last_layer", n_pairs=8)
    a = llla_rollout(z, sched8, ll, noise)
    b = epistemic_rollout(z, sched8, full, "ddpm", noise, estimator="full")
    np.testing.assert_allclose(a.sigma0, b.sigma0, rtol=1e-12)
    with pytest.raises(InvalidArgument):
        llla_rollout(m, sched8, full, noise)


def test_llla_misses_body_sensitivity(sched8):
    m = tiny_model(d=3, hidden=6)
    noise = make_noise(sched8, 3, 0, range(4))
    ll = llla_rollout(m, sched8, iso_posterior(m.last_layer_indices(), kind="last_layer"), noise)
    full = epistemic_rollout(m, sched8, iso_posterior(np.arange(m.p)), "ddpm", noise)
    assert np.all(ll.trace0 < full.trace0)


def test_flare_on_head_indices_equals_llla(sine_tiny):
    m, ds, s, _ = sine_tiny
    ll = build_posterior(m, ds, s, "last_layer", n_pairs=16)
    sub = build_posterior(m, ds, s, "subnet", indices=m.last_layer_indices(), n_pairs=16)
    noise = make_noise(s, m.d, 0, range(3))
    assert np.array_equal(flare_sample(m, s, sub, "ddpm", noise).sigma0,
                          llla_rollout(m, s, ll, noise).sigma0)


def test_predictive_variance_zero_posterior(sine_tiny):
    m, ds, s, _ = sine_tiny
    noise = make_noise(s, m.d, 0, range(2))
    res = predictive_variance_rollout(m, s, PosteriorOperator.zero(m.last_layer_indices()), 4,
                                      noise, 0)
    ref = sum(np.prod(s.a[1:t] ** 2) * s.tilde_beta[t] for t in range(1, s.T + 1))
    np.testing.assert_allclose(res.var[0], ref, rtol=1e-12)
    with pytest.raises(InvalidArgument):
        predictive_variance_rollout(m, s, PosteriorOperator.zero(m.last_layer_indices()), 1,
                                    noise, 0)


def test_predictive_variance_seed_stability():
    # a gentle schedule keeps the Monte-Carlo spread from being amplified by a_t
    s = linear_schedule(8)
    m = tiny_model(d=10, hidden=6, n_blocks=1, E=4, T=8, seed=3)
    ds = generate("sine", 0)
    ll = build_posterior(m, ds, s, "last_layer", n_pairs=64)
    noise = make_noise(s, m.d, 0, range(3))
    v1 = predictive_variance_rollout(m, s, ll, 64, noise, 1).var[0]
    v2 = predictive_variance_rollout(m, s, ll, 64, noise, 2).var[0]
    ale = sum(np.prod(s.a[1:t] ** 2) * s.tilde_beta[t] for t in range(1, s.T + 1))
    assert np.all(v1 > ale) and np.all(v2 > ale)
    assert np.all(np.abs(v1 - v2) <= 0.25 * np.maximum(v1, v2))
    np.testing.assert_array_equal(predictive_variance_rollout(m, s, ll, 64, noise, 1).var[0], v1)


def test_keep_sweep(sine_tiny):
    m, ds, s, _ = sine_tiny
    rows = keep_fraction_sweep(m, s, ds, [0.3, 1.0, 0.3], 3, seed=0, n_pairs=16)
    assert rows[0] == rows[2]
    assert rows[1]["m"] == m.p
    full = build_posterior(m, ds, s, "full", n_pairs=16, damping=1e-6, seed=0)
    ref = flare_sample(m, s, full, "ddpm", make_noise(s, m.d, 0, range(3))).scores.mean()
    assert rows[1]["mean_trace"] == pytest.approx(ref, rel=1e-12)
    with pytest.raises(InvalidArgument):
        keep_fraction_sweep(m, s, ds, [0.0], 2)


def test_schedule_from_betas_in_rollout(rng):
    s = schedule_from_betas(rng.uniform(0.01, 0.3, 5))
    m = tiny_model(T=5)
    tr = flare_sample(m, s, iso_posterior(np.arange(m.p)), "mean", make_noise(s, 3, 0, [0]))
    assert np.isfinite(tr.trace0).all() and np.all(tr.aleatoric == 0)
