import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hybridsan.attention import MhaWeights, attention_head, identity_mha_weights, multi_head_attention
from hybridsan.tensor import DimensionError, Tensor, grad_check, tsum


def naive_mha(x, w: MhaWeights, mask=None):
    outs = []
    for i in range(w.h):
        q, k, v = x @ w.wq.data[i], x @ w.wk.data[i], x @ w.wv.data[i]
        s = q @ k.T / math.sqrt(w.d_att)
        if mask is not None:
            s = np.where(mask, s, -np.inf)
        p = np.exp(s - s.max(-1, keepdims=True))
        outs.append((p / p.sum(-1, keepdims=True)) @ v)
    return np.concatenate(outs, -1) @ w.u_h.data


def test_mha_matches_per_head_loop(rng):
    w = MhaWeights.init(3, 6, rng)
    x = rng.normal(size=(5, 6))
    out, recs = multi_head_attention(Tensor(x), Tensor(x), Tensor(x), w)
    np.testing.assert_allclose(out.data, naive_mha(x, w), atol=1e-12)
    assert len(recs) == 3 and recs[0].matrix.shape == (5, 5)


def test_batched_mask_matches_unpadded(rng):
    w = MhaWeights.init(2, 4, rng)
    x = rng.normal(size=(2, 6, 4))
    mask = (np.arange(6)[None, :] < np.array([6, 3])[:, None])[:, None, :]
    out, recs = multi_head_attention(Tensor(x), Tensor(x), Tensor(x), w, mask)
    np.testing.assert_allclose(out.data[1, :3], naive_mha(x[1, :3], w), atol=1e-12)
    assert np.all(recs[1].matrix[1, :, 3:] == 0.0)


def test_single_head_formula(rng):
    d = 4
    x = rng.normal(size=(3, d))
    wq, wk, wv = (Tensor(rng.normal(size=(d, d))) for _ in range(3))
    out, rec = attention_head(Tensor(x), Tensor(x), Tensor(x), wq, wk, wv)
    s = (x @ wq.data) @ (x @ wk.data).T / 2.0
    p = np.exp(s) / np.exp(s).sum(-1, keepdims=True)
    np.testing.assert_allclose(out.data, p @ x @ wv.data, atol=1e-12)
    np.testing.assert_allclose(rec.matrix, p, atol=1e-12)


def test_single_position_attends_to_itself(rng):
    w = MhaWeights.init(2, 4, rng)
    x = Tensor(rng.normal(size=(1, 4)))
    _, recs = multi_head_attention(x, x, x, w)
    assert all(r.matrix[0, 0] == 1.0 for r in recs)


@pytest.mark.parametrize("h", [1, 2, 4])
def test_identity_weights_with_identity_attention(h, rng):
    x = rng.normal(size=(7, 8))
    out, _ = multi_head_attention(Tensor(x), Tensor(x), Tensor(x), identity_mha_weights(h, 8),
                                  attn_override=np.eye(7))
    np.testing.assert_allclose(out.data, x, atol=1e-14)


def test_u_h_shape_checked(rng):
    w = MhaWeights.init(2, 4, rng)
    with pytest.raises(DimensionError):
        MhaWeights(w.wq, w.wk, w.wv, Tensor(np.zeros((4, 4))))


def test_width_mismatch(rng):
    w = MhaWeights.init(2, 4, rng)
    x = Tensor(np.zeros((3, 5)))
    with pytest.raises(DimensionError):
        multi_head_attention(x, x, x, w)


def test_mha_gradients(rng):
    w = MhaWeights.init(2, 4, rng)
    x = Tensor(rng.normal(size=(2, 5, 4)), requires_grad=True)
    mask = np.ones((2, 1, 5), dtype=bool)
    mask[1, 0, 4] = False
    proj = Tensor(rng.normal(size=(2, 5, 4)))
    f = lambda: tsum(multi_head_attention(x, x, x, w, mask)[0] * proj)  # noqa: E731
    report = grad_check(f, {"x": x, "wq": w.wq, "wk": w.wk, "wv": w.wv, "u_h": w.u_h})
    assert report.ok, report.max_rel_error


@given(st.integers(1, 4), st.integers(1, 9), st.integers(0, 2**31))
def test_attention_rows_stochastic(h, n, seed):
    rng = np.random.default_rng(seed)
    w = MhaWeights.init(h, 4, rng)
    x = Tensor(3 * rng.normal(size=(n, 4)))
    _, recs = multi_head_attention(x, x, x, w)
    for r in recs:
        assert np.all(r.matrix >= 0)
        np.testing.assert_allclose(r.matrix.sum(-1), 1.0, atol=1e-12)


@given(st.integers(2, 8), st.integers(0, 2**31))
def test_permutation_equivariance(n, seed):
    rng = np.random.default_rng(seed)
    w = MhaWeights.init(2, 4, rng)
    x = rng.normal(size=(n, 4))
    perm = rng.permutation(n)
    out = multi_head_attention(Tensor(x), Tensor(x), Tensor(x), w)[0].data
    outp = multi_head_attention(Tensor(x[perm]), Tensor(x[perm]), Tensor(x[perm]), w)[0].data
    np.testing.assert_allclose(outp, out[perm], atol=1e-10)


def test_head_single_position(rng):
    x = rng.normal(size=(1, 3))
    wq, wk, wv = (Tensor(rng.normal(size=(3, 3))) for _ in range(3))
    out, rec = attention_head(Tensor(x), Tensor(x), Tensor(x), wq, wk, wv)
    assert rec.matrix.tolist() == [[1.0]]
    np.testing.assert_allclose(out.data, x @ wv.data, atol=1e-15)


def test_head_identical_keys_uniform(rng):
    xk = np.tile(rng.normal(size=(1, 4)), (5, 1))
    wq, wk, wv = (Tensor(rng.normal(size=(4, 4))) for _ in range(3))
    _, rec = attention_head(Tensor(rng.normal(size=(3, 4))), Tensor(xk), Tensor(rng.normal(size=(5, 4))),
                            wq, wk, wv)
    np.testing.assert_allclose(rec.matrix, 0.2, atol=1e-15)


def test_head_hand_computed_d1():
    # d=1: scores q_i k_j with q = 2x, k = -x, v = 3x for x = [1, 2]
    x = Tensor(np.array([[1.0], [2.0]]))
    out, rec = attention_head(x, x, x, Tensor([[2.0]]), Tensor([[-1.0]]), Tensor([[3.0]]))
    for i, xi in enumerate((1.0, 2.0)):
        s = np.array([2 * xi * -1.0, 2 * xi * -2.0])
        p = np.exp(s) / np.exp(s).sum()
        np.testing.assert_allclose(rec.matrix[i], p, atol=1e-12)
        assert out.data[i, 0] == pytest.approx(p @ np.array([3.0, 6.0]), abs=1e-12)


def test_single_head_with_identity_combine_equals_head(rng):
    w = MhaWeights.init(1, 4, rng)
    w.u_h.data = np.eye(4)
    x = Tensor(rng.normal(size=(3, 4)))
    mha, _ = multi_head_attention(x, x, x, w)
    head, _ = attention_head(x, x, x, Tensor(w.wq.data[0]), Tensor(w.wk.data[0]), Tensor(w.wv.data[0]))
    np.testing.assert_allclose(mha.data, head.data, atol=1e-12)


def test_identical_heads_averaged_equal_one_head(rng):
    h, d = 3, 4
    one = MhaWeights.init(1, d, rng)
    w = MhaWeights(*(Tensor(np.repeat(t.data, h, axis=0)) for t in (one.wq, one.wk, one.wv)),
                   u_h=Tensor(np.vstack([np.eye(d)] * h) / h))
    x = Tensor(rng.normal(size=(5, d)))
    head, _ = attention_head(x, x, x, Tensor(one.wq.data[0]), Tensor(one.wk.data[0]), Tensor(one.wv.data[0]))
    np.testing.assert_allclose(multi_head_attention(x, x, x, w)[0].data, head.data, atol=1e-12)


def test_full_size_shapes(rng):
    w = MhaWeights.init(4, 256, rng)
    assert w.u_h.shape == (1024, 256) and w.wq.shape == (4, 256, 256)


def test_identity_weights_single_frame_exact(rng):
    x = rng.normal(size=(1, 6))
    out, _ = multi_head_attention(Tensor(x), Tensor(x), Tensor(x), identity_mha_weights(4, 6))
    np.testing.assert_array_equal(out.data, x)


def test_identity_weights_scaled_combine(rng):
    h = 3
    w = identity_mha_weights(h, 5)
    w.u_h.data = np.vstack([np.eye(5)] * h) * 2.0
    x = rng.normal(size=(7, 5))
    out, _ = multi_head_attention(Tensor(x), Tensor(x), Tensor(x), w, attn_override=np.eye(7))
    np.testing.assert_allclose(out.data, 2 * h * x, atol=1e-12)


@given(st.integers(2, 8), st.integers(0, 2**31))
def test_key_value_permutation_invariance(m, seed):
    rng = np.random.default_rng(seed)
    w = MhaWeights.init(2, 4, rng)
    xq, xk, xv = rng.normal(size=(3, 4)), rng.normal(size=(m, 4)), rng.normal(size=(m, 4))
    perm = rng.permutation(m)
    a = multi_head_attention(Tensor(xq), Tensor(xk), Tensor(xv), w)[0].data
    b = multi_head_attention(Tensor(xq), Tensor(xk[perm]), Tensor(xv[perm]), w)[0].data
    np.testing.assert_allclose(a, b, atol=1e-9)
