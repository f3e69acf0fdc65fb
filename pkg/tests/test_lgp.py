import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointgl.lgp import (
    HAVE_NUMBA,
    LgpParams,
    edge_features,
    graph_pool,
    lgp_backward,
    lgp_forward,
    pool_gathered,
    pool_rows,
    scatter_pool_grad,
    vote_count,
)
from pointgl.numcore import ContractError, ShapeError, Variable, gather_rows, mul, numerical_grad, sum_all

import oracles


def params(alpha, beta):
    return LgpParams(np.asarray(alpha, dtype=float), np.asarray(beta, dtype=float))


def dyadic(rng, shape, scale=64):
    """Small multiples of 1/8: sums and differences stay exact in float32."""
    return (rng.integers(-scale, scale, size=shape) / 8).astype(np.float32)


# --- parameters ---------------------------------------------------------------


def test_fresh_params():
    p = LgpParams.init(7)
    assert np.array_equal(p.alpha, np.ones(7)) and np.array_equal(p.beta, np.zeros(7))
    assert p.n_params == 14
    assert LgpParams.init(7, scalar=True).n_params == 2


def test_width_mismatch():
    with pytest.raises(ShapeError):
        edge_features(np.zeros((1, 2)), np.zeros((1, 3, 2)), params([1, 1, 1], [0, 0, 0]))


# --- forward examples ---------------------------------------------------------


def test_edges_zero_when_neighbors_equal_center():
    c = np.array([[0.5, -2.0]])
    nb = np.repeat(c[:, None], 4, axis=1)
    assert np.array_equal(edge_features(c, nb, params([1, 1], [0, 0])), np.zeros((1, 4, 2)))
    assert np.array_equal(edge_features(c, nb, params([1, 1], [5, 5])), np.full((1, 4, 2), 5.0))
    assert np.array_equal(lgp_forward(c, nb, params([1, 1], [0, 0])).pooled, np.zeros((1, 2)))


def test_hand_example():
    c = np.array([[1.0, 0.0]])
    nb = np.array([[[2.0, 3.0], [0.0, 1.0]]])
    p = params([1, 1], [0, 0])
    assert edge_features(c, nb, p).tolist() == [[[1, 3], [-1, 1]]]
    out = lgp_forward(c, nb, p)
    assert out.pooled.tolist() == [[1, 3]]
    assert out.argmax_idx.tolist() == [[0, 0]]


def test_ties_pick_first_slot():
    c = np.zeros((1, 1))
    nb = np.array([[[1.0], [3.0], [3.0]]])
    assert lgp_forward(c, nb, params([1], [0])).argmax_idx.tolist() == [[1]]


def test_empty_neighbors_rejected():
    with pytest.raises(ValueError):
        lgp_forward(np.zeros((2, 3)), np.zeros((2, 0, 3)), LgpParams.init(3))


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_loop_oracle(seed):
    r = np.random.default_rng(seed)
    c, nb = r.normal(size=(4, 3)), r.normal(size=(4, 6, 3))
    a, b = r.normal(size=3), r.normal(size=3)
    out = lgp_forward(c, nb, params(a, b))
    pooled, arg = oracles.lgp(c, nb, a, b)
    assert np.array_equal(out.pooled, pooled)
    assert np.array_equal(out.argmax_idx, arg)
    # pooled equals the edge at the recorded slot, exactly
    e = edge_features(c, nb, params(a, b))
    assert np.array_equal(np.take_along_axis(e, out.argmax_idx[:, None], axis=1)[:, 0], out.pooled)


# --- invariances --------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_neighbor_permutation_invariance(seed):
    r = np.random.default_rng(seed)
    m, k, d = 5, 8, 6
    c, nb = r.normal(size=(m, d)), r.normal(size=(m, k, d))
    p = params(r.normal(size=d), r.normal(size=d))
    out = lgp_forward(c, nb, p)
    perms = np.stack([r.permutation(k) for _ in range(m)])
    out_p = lgp_forward(c, np.take_along_axis(nb, perms[:, :, None], axis=1), p)
    assert out.pooled.tobytes() == out_p.pooled.tobytes()
    # with distinct edge values the argmax follows the permutation
    assert np.array_equal(np.take_along_axis(perms, out_p.argmax_idx, axis=1), out.argmax_idx)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_constant_offset_invariance(seed):
    r = np.random.default_rng(seed)
    m, k, d = 4, 6, 5
    c, nb = dyadic(r, (m, d)), dyadic(r, (m, k, d))
    p = LgpParams(dyadic(r, d, 16), dyadic(r, d, 16))
    shift = dyadic(r, (m, 1, d))
    base = lgp_forward(c, nb, p)
    moved = lgp_forward(c + shift[:, 0], nb + shift, p)
    assert base.pooled.tobytes() == moved.pooled.tobytes()
    assert np.array_equal(base.argmax_idx, moved.argmax_idx)


# --- backward -----------------------------------------------------------------


def test_backward_zero_upstream():
    r = np.random.default_rng(0)
    p = params(r.normal(size=3), r.normal(size=3))
    out = lgp_forward(r.normal(size=(2, 3)), r.normal(size=(2, 4, 3)), p)
    for g in lgp_backward(np.zeros((2, 3)), out, p, k=4):
        assert not np.any(g)


def test_backward_dbeta_is_column_sum():
    r = np.random.default_rng(1)
    p = params(r.normal(size=3), r.normal(size=3))
    up = r.normal(size=(5, 3))
    out = lgp_forward(r.normal(size=(5, 3)), r.normal(size=(5, 4, 3)), p)
    assert np.array_equal(lgp_backward(up, out, p)[3], up.sum(axis=0))


def test_backward_requires_saved_state():
    with pytest.raises(ContractError):
        lgp_backward(np.zeros((1, 1)), None, LgpParams.init(1))


@pytest.mark.parametrize("seed", range(10))
def test_backward_single_group_single_channel_fd(seed):
    r = np.random.default_rng(seed)
    c, nb = r.normal(size=(1, 1)), r.normal(size=(1, 5, 1))
    a, b = r.normal(size=1), r.normal(size=1)

    def f():
        return float(lgp_forward(c, nb, params(a, b)).pooled.sum())

    out = lgp_forward(c, nb, params(a, b))
    dc, dn, da, db = lgp_backward(np.ones((1, 1)), out, params(a, b), k=5)
    for analytic, x in ((dc, c), (dn, nb), (da, a), (db, b)):
        assert np.abs(analytic - numerical_grad(f, x)).max() < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_backward_multi_group_fd(seed):
    r = np.random.default_rng(50 + seed)
    c, nb = r.normal(size=(3, 4)), r.normal(size=(3, 6, 4))
    a, b = r.normal(size=4), r.normal(size=4)
    up = r.normal(size=(3, 4))

    def f():
        return float((lgp_forward(c, nb, params(a, b)).pooled * up).sum())

    grads = lgp_backward(up, lgp_forward(c, nb, params(a, b)), params(a, b), k=6)
    for analytic, x in zip(grads, (c, nb, a, b)):
        assert np.abs(analytic - numerical_grad(f, x)).max() < 1e-6


def test_scalar_affine_gradients_are_summed(f64):
    r = np.random.default_rng(3)
    c, nb = r.normal(size=(3, 4)), r.normal(size=(3, 5, 4))
    a, b = np.array([0.7]), np.array([0.2])
    up = r.normal(size=(3, 4))

    def f():
        return float((lgp_forward(c, nb, params(a, b)).pooled * up).sum())

    _, _, da, db = lgp_backward(up, lgp_forward(c, nb, params(a, b)), params(a, b), k=5)
    assert da.shape == (1,) and db.shape == (1,)
    assert abs(da[0] - numerical_grad(f, a)[0]) < 1e-6
    assert abs(db[0] - numerical_grad(f, b)[0]) < 1e-6


# --- votes --------------------------------------------------------------------


def test_votes_single_neighbor():
    assert vote_count(np.zeros((1, 7), dtype=int), np.array([[3]]), 5).tolist() == [0, 0, 0, 7, 0]


def test_votes_disjoint_groups_each_sum_to_width():
    r = np.random.default_rng(0)
    m, k, d = 4, 3, 6
    nidx = np.arange(m * k).reshape(m, k)
    arg = r.integers(0, k, size=(m, d))
    votes = vote_count(arg, nidx, m * k)
    assert votes.reshape(m, k).sum(axis=1).tolist() == [d] * m


@pytest.mark.parametrize("seed", range(5))
def test_votes_match_recount(seed):
    r = np.random.default_rng(seed)
    n, m, k, d = 30, 8, 5, 7
    nidx = r.integers(0, n, size=(m, k))
    arg = r.integers(0, k, size=(m, d))
    votes = vote_count(arg, nidx, n)
    assert votes.tolist() == oracles.votes(arg.tolist(), nidx.tolist(), n)
    assert votes.sum() == m * d


# --- fused kernels ------------------------------------------------------------


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_pool_rows_matches_dense(dtype):
    r = np.random.default_rng(4)
    v = r.normal(size=(40, 9)).astype(dtype)
    cidx = r.choice(40, 10, replace=False)
    nidx = r.integers(0, 40, size=(10, 6))
    a, b = r.normal(size=9).astype(dtype), r.normal(size=9).astype(dtype)
    ref = lgp_forward(v[cidx], v[nidx], LgpParams(a, b))
    for use_numba in {False, HAVE_NUMBA}:
        pooled, arg, winners, diff = pool_rows(v, cidx, nidx, a, b, use_numba=use_numba)
        assert pooled.tobytes() == ref.pooled.tobytes()
        assert np.array_equal(arg, ref.argmax_idx)
        assert np.array_equal(winners, np.take_along_axis(nidx, arg, axis=1))
        assert diff.tobytes() == ref.diff_at_argmax.tobytes()


@pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")
def test_scatter_kernel_matches_numpy():
    r = np.random.default_rng(5)
    cidx = r.integers(0, 20, size=8)
    winners = r.integers(0, 20, size=(8, 4))
    routed = r.normal(size=(8, 4))
    a = scatter_pool_grad(20, cidx, winners, routed, use_numba=True)
    b = scatter_pool_grad(20, cidx, winners, routed, use_numba=False)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_graph_pool_matches_gathered_path(f64):
    r = np.random.default_rng(6)
    vals = r.normal(size=(30, 5))
    cidx = r.choice(30, 6, replace=False)
    nidx = r.integers(0, 30, size=(6, 4))
    up = Variable(r.normal(size=(6, 5)))

    v1 = Variable.param(vals.copy())
    a1, b1 = Variable.param(r.normal(size=5)), Variable.param(r.normal(size=5))
    rec = {}
    sum_all(mul(graph_pool(v1, cidx, nidx, a1, b1, rec), up)).backward()

    v2 = Variable.param(vals.copy())
    a2, b2 = Variable.param(a1.value.copy()), Variable.param(b1.value.copy())
    out2 = pool_gathered(gather_rows(v2, cidx), gather_rows(v2, nidx), a2, b2)
    sum_all(mul(out2, up)).backward()

    np.testing.assert_allclose(v1.grad, v2.grad, atol=1e-12)
    np.testing.assert_allclose(a1.grad, a2.grad, atol=1e-12)
    np.testing.assert_allclose(b1.grad, b2.grad, atol=1e-12)
    assert rec["argmax"].shape == (6, 5)
