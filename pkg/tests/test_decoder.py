import numpy as np
import pytest
from hypothesis import given, strategies as st

from hybridsan.decoder import (DecoderWeights, TokenVocab, ctc_feasible, ctc_loss, ctc_loss_batch,
                               decoder_forward, edit_distance, greedy_decode, joint_loss,
                               label_smoothing_ce, token_error_rate)
from hybridsan.tensor import Tape, Tensor, backward, grad_check, tsum

from oracles import ctc_brute_force, random_distribution


def test_vocab_layout():
    v = TokenVocab.synthetic(3)
    assert (v.blank, v.sos, v.eos, v.pad, v.first_content, len(v)) == (0, 1, 2, 3, 4, 7)


@pytest.mark.parametrize("T, target", [(3, [1]), (4, [1, 2]), (5, [1, 1]), (5, [2, 1, 2]), (2, [3])])
def test_ctc_matches_enumeration(T, target, rng):
    p = random_distribution(rng, T, 4)
    got = ctc_loss(Tensor(np.log(p)), target).item()
    assert abs(got - ctc_brute_force(p, target)) < 1e-10


def test_ctc_single_frame_single_label():
    p = np.array([[0.25, 0.75]])
    assert ctc_loss(Tensor(np.log(p)), [1]).item() == pytest.approx(-np.log(0.75), abs=1e-14)


def test_ctc_infeasible_is_inf_with_zero_grad():
    lp = Tensor(np.log(np.full((2, 3), 1 / 3)), requires_grad=True)
    with Tape() as tape:
        loss = ctc_loss(lp, [1, 1])
    assert loss.item() == np.inf
    backward(loss, tape)
    np.testing.assert_array_equal(lp.grad, 0.0)


@pytest.mark.parametrize("T, target, ok", [(2, [1, 1], False), (3, [1, 1], True), (2, [1, 2], True)])
def test_ctc_feasible(T, target, ok):
    assert ctc_feasible(T, target) is ok


def test_ctc_batch_with_padding_equals_single(rng):
    p1, p2 = random_distribution(rng, 6, 4), random_distribution(rng, 4, 4)
    lp = np.zeros((2, 6, 4))
    lp[0], lp[1, :4] = np.log(p1), np.log(p2)
    got = ctc_loss_batch(Tensor(lp), [6, 4], [[1, 2], [3]]).data
    assert got[0] == pytest.approx(ctc_brute_force(p1, [1, 2]), abs=1e-10)
    assert got[1] == pytest.approx(ctc_brute_force(p2, [3]), abs=1e-10)


def test_ctc_gradient(rng):
    from hybridsan.tensor import log_softmax
    x = Tensor(rng.normal(size=(2, 7, 5)), requires_grad=True)
    f = lambda: tsum(ctc_loss_batch(log_softmax(x), [7, 5], [[1, 2, 2], [4, 3]]))  # noqa: E731
    assert grad_check(f, {"x": x}).ok


@given(st.integers(1, 6), st.lists(st.integers(1, 3), max_size=3), st.integers(0, 2**31))
def test_ctc_probability_bounded(T, target, seed):
    p = random_distribution(np.random.default_rng(seed), T, 4)
    loss = ctc_loss(Tensor(np.log(p)), target).item()
    assert loss >= 0 or np.isclose(loss, 0)
    assert np.isinf(loss) == (not ctc_feasible(T, target))


def test_label_smoothing_uniform_logits():
    V = 5
    loss = label_smoothing_ce(Tensor(np.zeros((3, V))), [0, 1, 2], eps=0.1).item()
    assert loss == pytest.approx(np.log(V), abs=1e-12)


def test_label_smoothing_formula(rng):
    logits = rng.normal(size=(4, 6))
    targets = [1, 0, 5, 2]
    eps = 0.2
    lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    q = np.full((4, 6), eps / 6)
    q[np.arange(4), targets] += 1 - eps
    ref = -(q * lp).sum() / 4
    assert label_smoothing_ce(Tensor(logits), targets, eps).item() == pytest.approx(ref, abs=1e-12)


def test_label_smoothing_ignores_padding(rng):
    logits = rng.normal(size=(2, 3, 4))
    valid = np.array([[True, True, False], [True, False, False]])
    full = label_smoothing_ce(Tensor(logits), [[1, 2, 0], [3, 0, 0]], 0.1, valid).item()
    logits2 = logits.copy()
    logits2[0, 2] = 100.0
    assert label_smoothing_ce(Tensor(logits2), [[1, 2, 3], [3, 1, 1]], 0.1, valid).item() == \
        pytest.approx(full, abs=1e-12)


def test_joint_loss_endpoints():
    ld, lc = Tensor(np.array(2.0)), Tensor(np.array(np.inf))
    assert joint_loss(ld, lc, 0.0).item() == 2.0
    assert joint_loss(Tensor(np.array(2.0)), Tensor(np.array(4.0)), 0.25).item() == 2.5
    with pytest.raises(ValueError):
        joint_loss(ld, lc, 1.5)


def test_edit_distance_examples():
    assert edit_distance("abc", "axc") == 1
    assert token_error_rate(["abc"], ["axc"]) == pytest.approx(1 / 3)
    assert token_error_rate([[1, 2, 3]], [[]]) == 1.0
    assert token_error_rate([[1, 2]], [[1, 2]]) == 0.0


@given(st.lists(st.integers(0, 3), max_size=6), st.lists(st.integers(0, 3), max_size=6))
def test_edit_distance_metric_properties(a, b):
    d = edit_distance(a, b)
    assert d == edit_distance(b, a)
    assert abs(len(a) - len(b)) <= d <= max(len(a), len(b))
    assert (d == 0) == (a == b)


def test_decoder_is_causal(rng):
    w = DecoderWeights.init(7, 8, 16, 2, 2, rng)
    enc = Tensor(rng.normal(size=(1, 5, 8)))
    toks = np.array([[1, 4, 5, 6]])
    a = decoder_forward(enc, None, toks, w).data
    toks2 = toks.copy()
    toks2[0, 3] = 4
    b = decoder_forward(enc, None, toks2, w).data
    np.testing.assert_allclose(a[0, :3], b[0, :3], atol=1e-12)


def test_decoder_gradients(rng):
    w = DecoderWeights.init(6, 4, 8, 2, 1, rng)
    enc = Tensor(rng.normal(size=(2, 5, 4)), requires_grad=True)
    toks = np.array([[1, 4, 5], [1, 5, 3]])
    f = lambda: label_smoothing_ce(  # noqa: E731
        decoder_forward(enc, np.array([5, 3]), toks, w, np.array([3, 2])), [[4, 5, 2], [5, 2, 3]],
        0.1, np.array([[1, 1, 1], [1, 1, 0]], dtype=bool))
    params = {"enc": enc, "embed": w.embed, "out_w": w.out_w, "src_wq": w.layers[0].src_mha.wq,
              "self_wk": w.layers[0].self_mha.wk, "ff_s": w.layers[0].ff.s}
    report = grad_check(f, params)
    assert report.ok, report.max_rel_error


def test_greedy_decode_respects_max_len(rng):
    v = TokenVocab.synthetic(3)
    w = DecoderWeights.init(len(v), 8, 16, 2, 1, rng)
    w.out_b.data[v.eos] = -1e9
    hyps = greedy_decode(Tensor(rng.normal(size=(2, 4, 8))), None, w, v, max_len=3)
    assert [len(h) for h in hyps] == [3, 3]


def test_greedy_decode_stops_at_eos(rng):
    v = TokenVocab.synthetic(3)
    w = DecoderWeights.init(len(v), 8, 16, 2, 1, rng)
    w.out_b.data[v.eos] = 1e9
    assert greedy_decode(Tensor(rng.normal(size=(4, 8))), None, w, v, max_len=5) == [[]]


def test_ctc_two_frames_three_paths(rng):
    p = random_distribution(rng, 2, 3)
    ref = -np.log(p[0, 0] * p[1, 1] + p[0, 1] * p[1, 0] + p[0, 1] * p[1, 1])
    assert ctc_loss(Tensor(np.log(p)), [1]).item() == pytest.approx(ref, abs=1e-14)


def test_ctc_repeat_needs_blank(rng):
    p = random_distribution(rng, 4, 3)
    assert abs(ctc_loss(Tensor(np.log(p)), [1, 1]).item() - ctc_brute_force(p, [1, 1])) < 1e-10
    assert not ctc_feasible(1, [1, 1]) and ctc_feasible(3, [1, 1])


def test_label_smoothing_eps_zero_is_cross_entropy(rng):
    logits = rng.normal(size=(3, 5))
    targets = [4, 0, 2]
    lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    ref = -lp[np.arange(3), targets].mean()
    assert label_smoothing_ce(Tensor(logits), targets, 0.0).item() == pytest.approx(ref, abs=1e-12)


@pytest.mark.parametrize("eps", [0.0, 0.1, 0.5])
def test_label_smoothing_uniform_any_eps(eps):
    assert label_smoothing_ce(Tensor(np.zeros((2, 4))), [1, 3], eps).item() == pytest.approx(np.log(4))


def test_label_smoothing_all_padded_rejected(rng):
    with pytest.raises(ValueError):
        label_smoothing_ce(Tensor(rng.normal(size=(1, 2, 4))), [[1, 2]], 0.1, np.zeros((1, 2), bool))


def test_joint_loss_lambda_one():
    assert joint_loss(Tensor(np.array(np.inf)), Tensor(np.array(3.0)), 1.0).item() == 3.0
    assert joint_loss(Tensor(np.array(2.0)), Tensor(np.array(4.0)), 0.3).item() == pytest.approx(2.6)


@given(st.floats(0, 1), st.floats(0, 50), st.floats(0, 50), st.floats(0, 5))
def test_joint_loss_monotone(lam, ld, lc, delta):
    base = joint_loss(Tensor(np.array(ld)), Tensor(np.array(lc)), lam).item()
    assert joint_loss(Tensor(np.array(ld + delta)), Tensor(np.array(lc)), lam).item() >= base - 1e-12
    assert joint_loss(Tensor(np.array(ld)), Tensor(np.array(lc + delta)), lam).item() >= base - 1e-12


def test_decoder_sos_only_and_shape(rng):
    w = DecoderWeights.init(7, 8, 16, 2, 1, rng)
    enc = Tensor(rng.normal(size=(2, 5, 8)))
    assert decoder_forward(enc, None, np.array([[1], [1]]), w).shape == (2, 1, 7)
    assert decoder_forward(enc, None, np.array([[1, 4, 5], [1, 6, 6]]), w).shape == (2, 3, 7)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_decoder_causality_every_position(k, rng):
    w = DecoderWeights.init(7, 8, 16, 2, 2, rng)
    enc = Tensor(rng.normal(size=(1, 4, 8)))
    toks = np.array([[1, 4, 5, 6]])
    toks2 = toks.copy()
    toks2[0, k] = 4 if toks[0, k] != 4 else 5
    a, b = decoder_forward(enc, None, toks, w).data, decoder_forward(enc, None, toks2, w).data
    np.testing.assert_array_equal(a[0, :k], b[0, :k])


def test_decoder_rejects_out_of_range_token(rng):
    w = DecoderWeights.init(7, 8, 16, 2, 1, rng)
    with pytest.raises(IndexError):
        decoder_forward(Tensor(np.zeros((1, 3, 8))), None, np.array([[1, 7]]), w)
