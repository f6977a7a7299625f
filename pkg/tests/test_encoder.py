import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rankem.encoder import (EncoderError, EncoderParameters, Sentence, encode, encode_backward,
                            encode_batch, ema_update, init_params)
from rankem.numerics import grad_check, make_rng


def identity_encoder(table):
    table = np.asarray(table, dtype=np.float64)
    h = table.shape[1]
    return EncoderParameters(table, [np.eye(h)], [np.zeros(h)])


def straight_line(params, tokens):
    # independent loop evaluation: no matrices, no broadcasting
    h = params.hidden
    act = [sum(params.token_table[t][j] for t in tokens) / len(tokens) for j in range(h)]
    for p, (w, b) in enumerate(zip(params.weights, params.biases)):
        pre = [sum(w[o][i] * act[i] for i in range(len(act))) + b[o] for o in range(w.shape[0])]
        act = [math.tanh(v) for v in pre] if p < params.num_layers - 1 else pre
    n = math.sqrt(sum(v * v for v in act))
    return np.array([v / n for v in act])


def test_single_token_normalises():
    params = identity_encoder([[3 / 5, 4 / 5]])
    np.testing.assert_allclose(encode(params, Sentence((0,))), [0.6, 0.8], atol=1e-15)


def test_cancelling_tokens_are_degenerate():
    params = identity_encoder([[0.3, -0.2], [-0.3, 0.2]])
    with pytest.raises(EncoderError, match="degenerate embedding"):
        encode(params, Sentence((0, 1)))


def test_token_out_of_range():
    params = identity_encoder([[1.0, 0.0]])
    with pytest.raises(EncoderError):
        encode(params, Sentence((3,)))


def test_empty_sentence_rejected():
    with pytest.raises(EncoderError):
        Sentence(())


def test_fixed_two_layer_value():
    # frozen with mpmath at 50 digits, independent of this package
    table = [[0.1, -0.2, 0.3], [0.4, 0.0, -0.1], [-0.3, 0.2, 0.2], [0.05, 0.5, -0.4]]
    w1 = [[0.2, -0.1, 0.4], [0.3, 0.5, -0.2], [-0.4, 0.1, 0.3]]
    w2 = [[0.6, -0.3, 0.2], [-0.1, 0.4, 0.5]]
    params = EncoderParameters(np.array(table), [np.array(w1), np.array(w2)],
                               [np.array([0.01, -0.02, 0.03]), np.array([0.05, -0.05])])
    out = encode(params, Sentence((0, 3, 3, 1)))
    np.testing.assert_allclose(out, [-0.93332664140414561496, -0.35902838389918056765], atol=1e-12)


@given(st.integers(0, 2**32 - 1), st.integers(1, 3))
def test_matches_straight_line_evaluation(seed, layers):
    r = make_rng(seed)
    params = init_params(r, 9, 4, 3, layers)
    for b in params.biases:
        b += 0.1 * r.standard_normal(b.shape)
    tokens = tuple(int(t) for t in r.integers(0, 9, size=int(r.integers(1, 8))))
    np.testing.assert_allclose(encode(params, Sentence(tokens)), straight_line(params, tokens), atol=1e-12)


@given(st.integers(0, 2**32 - 1), st.lists(st.integers(0, 19), min_size=1, max_size=15))
def test_unit_norm(seed, tokens):
    params = init_params(make_rng(seed), 20, 6, 4, 2)
    assert abs(np.linalg.norm(encode(params, Sentence(tokens))) - 1.0) <= 1e-9


@given(st.integers(0, 2**32 - 1), st.lists(st.integers(0, 19), min_size=1, max_size=15), st.randoms())
def test_token_order_invariance(seed, tokens, rnd):
    params = init_params(make_rng(seed), 20, 6, 4, 2)
    shuffled = list(tokens)
    rnd.shuffle(shuffled)
    np.testing.assert_allclose(encode(params, Sentence(tokens)), encode(params, Sentence(shuffled)), atol=1e-12)


def _batch(seed):
    r = make_rng(seed)
    params = init_params(r, 10, 5, 3, 2)
    sents = [Sentence(tuple(r.integers(0, 10, size=4))) for _ in range(4)]
    return r, params, sents


def test_backward_zero_upstream():
    _, params, sents = _batch(0)
    grads = encode_backward(params, sents, np.zeros((4, 3)))
    assert not np.any(grads.flat())


def test_backward_radial_upstream_is_zero():
    _, params, sents = _batch(1)
    grads = encode_backward(params, sents, encode_batch(params, sents))
    np.testing.assert_allclose(grads.flat(), 0.0, atol=1e-14)


def test_backward_shape_mismatch():
    _, params, sents = _batch(2)
    with pytest.raises(EncoderError):
        encode_backward(params, sents, np.zeros((3, 3)))


@pytest.mark.parametrize("seed", range(3))
def test_backward_finite_differences(seed):
    r, params, sents = _batch(seed)
    for b in params.biases:
        b += 0.1 * r.standard_normal(b.shape)
    up = r.standard_normal((4, 3))
    shape = params.shape()

    def loss(theta):
        return float((encode_batch(EncoderParameters.from_flat(shape, theta), sents) * up).sum())

    rep = grad_check(loss, params.flat(), encode_backward(params, sents, up).flat(), h=1e-5, tol=1e-4)
    assert rep.passed, rep.max_rel_error


def test_ema_extremes_and_midpoint():
    _, fast, _ = _batch(3)
    _, slow, _ = _batch(4)
    np.testing.assert_array_equal(ema_update(slow, fast, 1.0).flat(), slow.flat())
    np.testing.assert_array_equal(ema_update(slow, fast, 0.0).flat(), fast.flat())
    zero = EncoderParameters.zeros(10, 5, 3, 2)
    two = EncoderParameters.from_flat(zero.shape(), np.full(zero.flat().size, 2.0))
    np.testing.assert_array_equal(ema_update(zero, two, 0.5).flat(), 1.0)


def test_ema_rejects_mismatch():
    a = EncoderParameters.zeros(10, 5, 3, 2)
    b = EncoderParameters.zeros(10, 5, 3, 1)
    with pytest.raises(EncoderError):
        ema_update(a, b, 0.5)
    with pytest.raises(EncoderError):
        ema_update(a, a, 1.5)


def test_init_is_bounded_and_deterministic():
    a = init_params(make_rng(9), 12, 4, 3, 2)
    b = init_params(make_rng(9), 12, 4, 3, 2)
    assert np.array_equal(a.flat(), b.flat())
    assert np.abs(a.token_table).max() <= 0.5
    assert all(np.abs(w).max() <= 0.5 for w in a.weights)


def test_init_share_ties_language_bands():
    p = init_params(make_rng(2), 12, 4, 3, 1, num_languages=3, share=1.0)
    np.testing.assert_allclose(p.token_table[:4], p.token_table[4:8])
    with pytest.raises(EncoderError):
        init_params(make_rng(2), 13, 4, 3, 1, num_languages=3, share=0.5)


def test_from_flat_size_check():
    with pytest.raises(EncoderError):
        EncoderParameters.from_flat({"vocab_size": 2, "hidden": 2, "dim": 2, "num_layers": 1}, [0.0])
