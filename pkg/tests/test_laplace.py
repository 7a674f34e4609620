import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flare_uq.datasets import generate
from flare_uq.diffusion import cosine_schedule
from flare_uq.errors import InvalidArgument, ResourceLimit, ShapeError
from flare_uq.laplace import (
    GgnMatrix,
    PosteriorOperator,
    assemble_ggn,
    build_posterior,
    draw_pairs,
    ggn_from_jacobians,
    power_extremes,
)

from conftest import random_spd, tiny_model


def op_from(H, damping, dense_limit=4096, scale=1.0):
    return PosteriorOperator(GgnMatrix(np.arange(H.shape[0]), H, 1), damping, "full", scale,
                             dense_limit)


@pytest.fixture
def setup():
    s = cosine_schedule(8)
    m = tiny_model(d=10, hidden=6, n_blocks=1, E=4, seed=2)
    ds = generate("sine", 0, n=100)
    return m, ds, s


def test_single_pair_rank_one(setup):
    m, ds, s = setup
    x, t = draw_pairs(ds, s, 1, 0)
    idx = np.arange(0, m.p, 7)
    g = assemble_ggn(m, ds, s, idx, pairs=(x, t))
    J = m.param_jacobian_columns(x[0], int(t[0]), idx)
    np.testing.assert_allclose(g.H, J.T @ J, atol=1e-14)
    assert np.linalg.matrix_rank(g.H) <= m.d
    one = assemble_ggn(m, ds, s, [idx[3]], pairs=(x, t))
    np.testing.assert_allclose(one.H, np.array([[J[:, 3] @ J[:, 3]]]), atol=1e-14)


def test_bias_only_ggn_is_identity(setup):
    m, ds, s = setup
    v = m.params.values.copy()
    head = m.layer("head")
    v[head.w_off:head.b_off] = 0.0
    z = m.with_values(v)
    bias = np.arange(head.b_off, head.b_off + head.out)
    g = assemble_ggn(z, ds, s, bias, n_pairs=16, rng=1)
    np.testing.assert_allclose(g.H, np.eye(m.d), atol=1e-15)


def test_ggn_matches_stacked_oracle(setup):
    m, ds, s = setup
    x, t = draw_pairs(ds, s, 8, 3)
    g = assemble_ggn(m, ds, s, pairs=(x, t), chunk=3)
    J_pop = np.vstack([m.param_jacobian(x[i], int(t[i])) for i in range(8)])
    np.testing.assert_allclose(g.H, ggn_from_jacobians(J_pop, 8), rtol=1e-10, atol=1e-13)
    sym = g.H - g.H.T
    assert np.abs(sym).max() <= 1e-10
    np.linalg.cholesky(g.H + 1e-12 * np.eye(m.p))


def test_ggn_subset_selection_and_determinism(setup):
    m, ds, s = setup
    full = assemble_ggn(m, ds, s, n_pairs=12, rng=5)
    again = assemble_ggn(m, ds, s, n_pairs=12, rng=5)
    assert np.array_equal(full.H, again.H)
    idx = np.array([1, 4, 9, 30, m.p - 1])
    sub = assemble_ggn(m, ds, s, idx, n_pairs=12, rng=5)
    np.testing.assert_allclose(sub.H, full.H[np.ix_(idx, idx)], rtol=1e-12, atol=1e-15)
    allidx = assemble_ggn(m, ds, s, np.arange(m.p), n_pairs=12, rng=5)
    np.testing.assert_allclose(allidx.H, full.H, atol=1e-12)


def test_ggn_pair_order_invariance(setup):
    m, ds, s = setup
    x, t = draw_pairs(ds, s, 10, 4)
    perm = np.random.default_rng(0).permutation(10)
    a = assemble_ggn(m, ds, s, pairs=(x, t))
    b = assemble_ggn(m, ds, s, pairs=(x[perm], t[perm]))
    np.testing.assert_allclose(a.H, b.H, rtol=1e-12, atol=1e-14)


def test_ggn_resource_limit(setup):
    m, ds, s = setup
    big = tiny_model(d=2, hidden=300, n_blocks=1, E=4)
    with pytest.raises(ResourceLimit):
        assemble_ggn(big, generate("grid", 0, n_per_mode=2), s, n_pairs=1)


def test_apply_examples(rng):
    v = rng.standard_normal(5)
    np.testing.assert_allclose(op_from(np.zeros((5, 5)), 0.5).apply(v), v / 0.5)
    h = rng.uniform(0.1, 3, 5)
    np.testing.assert_allclose(op_from(np.diag(h), 1e-3).apply(v), v / (h + 1e-3), rtol=1e-12)
    H = random_spd(12, rng)
    op = op_from(H, 1e-6)
    ref = np.linalg.solve(H + 1e-6 * np.eye(12), v[:5].repeat(3)[:12])
    np.testing.assert_allclose(op.apply(v[:5].repeat(3)[:12]), ref, rtol=1e-8)


@pytest.mark.parametrize("dense_limit", [4096, 4])
def test_apply_inverts(rng, dense_limit):
    H = random_spd(12, rng)
    op = op_from(H, 1e-3, dense_limit)
    v = rng.standard_normal(12)
    back = (H + 1e-3 * np.eye(12)) @ op.apply(v)
    assert np.linalg.norm(back - v) <= 1e-8 * np.linalg.norm(v)
    J = rng.standard_normal((2, 3, 12))
    ref = J @ np.linalg.inv(H + 1e-3 * np.eye(12)) @ np.swapaxes(J, 1, 2)
    np.testing.assert_allclose(op.quad_form(J), ref, rtol=1e-8)


def test_dense_examples(rng):
    np.testing.assert_allclose(op_from(np.zeros((3, 3)), 2.0).dense(), 0.5 * np.eye(3))
    np.testing.assert_allclose(op_from(np.eye(3), 1.0).dense(), 0.5 * np.eye(3))
    H = random_spd(9, rng)
    S = op_from(H, 1e-2).dense()
    np.testing.assert_allclose((H + 1e-2 * np.eye(9)) @ S, np.eye(9), atol=1e-8)
    with pytest.raises(ResourceLimit):
        op_from(H, 1e-2, dense_limit=4).dense()


def test_scale_and_sampling(rng):
    H = random_spd(6, rng)
    op = op_from(H, 1e-2, scale=0.25)
    np.testing.assert_allclose(op.dense(), 0.25 * np.linalg.inv(H + 1e-2 * np.eye(6)), rtol=1e-10)
    draws = op.sample(200_000, np.random.default_rng(0))
    np.testing.assert_allclose(np.cov(draws.T), op.dense(), atol=0.02 * np.abs(op.dense()).max())
    Y = op.sqrt_project(rng.standard_normal((4, 6)))
    J = rng.standard_normal((4, 6))
    Y = op.sqrt_project(J)
    np.testing.assert_allclose(Y @ Y.T, J @ op.dense() @ J.T, rtol=1e-10)


def test_zero_operator():
    z = PosteriorOperator.zero(np.arange(4))
    assert np.all(z.apply(np.ones(4)) == 0) and np.all(z.dense() == 0)
    assert np.all(z.quad_form(np.ones((3, 4))) == 0)


def test_bad_arguments(rng):
    H = random_spd(3, rng)
    with pytest.raises(InvalidArgument):
        op_from(H, 0.0)
    with pytest.raises(ShapeError):
        op_from(H, 1.0).apply(np.ones(4))


def test_summary_json(rng):
    H = np.diag([1.0, 2.0, 5.0])
    d = json.loads(op_from(H, 1e-6).summary_json())
    assert d["kind"] == "full" and d["m"] == 3 and d["lambda"] == 1e-6
    assert d["trace_H"] == 8.0
    assert d["eig_max_H"] == pytest.approx(5.0, rel=1e-6)
    assert d["eig_min_H"] == pytest.approx(1.0, rel=1e-4)
    lo, hi = power_extremes(random_spd(10, rng), iters=500)
    assert lo <= hi


def test_build_posterior_kinds(setup):
    m, ds, s = setup
    full = build_posterior(m, ds, s, "full", n_pairs=8)
    ll = build_posterior(m, ds, s, "last_layer", n_pairs=8)
    sub = build_posterior(m, ds, s, "subnet", m=20, n_pairs=8)
    allsub = build_posterior(m, ds, s, "subnet", m=m.p, n_pairs=8)
    assert full.m == m.p and np.array_equal(ll.indices, m.last_layer_indices())
    assert sub.m == 20 and full.scale == pytest.approx(1 / ds.n)
    np.testing.assert_array_equal(allsub.ggn.H, full.ggn.H)
    np.testing.assert_allclose(sub.ggn.H, full.ggn.H[np.ix_(sub.indices, sub.indices)],
                               rtol=1e-12, atol=1e-15)
    with pytest.raises(InvalidArgument):
        build_posterior(m, ds, s, "subnet", n_pairs=8)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), lam=st.floats(1e-6, 10.0))
def test_apply_inverse_property(seed, lam):
    r = np.random.default_rng(seed)
    H = random_spd(8, r) * r.uniform(0.0, 5.0)
    v = r.standard_normal(8)
    out = op_from(H, lam).apply(v)
    assert np.linalg.norm((H + lam * np.eye(8)) @ out - v) <= 1e-8 * np.linalg.norm(v)
