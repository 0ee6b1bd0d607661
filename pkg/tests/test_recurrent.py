import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mtnet.recurrent import RnnParams, rnn_masked_form, rnn_step, rnn_unroll, selection_matrix


def zeros(d_in, d_h, d_out, **kw):
    return RnnParams(np.zeros((d_in, d_h)), np.zeros((d_h, d_h)), np.zeros((1, d_h)),
                     np.zeros((d_h, d_out)), np.zeros((1, d_out)), **kw)


def test_step_zero_weights_gives_zero():
    p = zeros(3, 4, 2, phi_h="identity")
    h, y = rnn_step(np.ones((1, 3)), np.ones((1, 4)), p)
    assert np.array_equal(h, np.zeros((1, 4))) and np.array_equal(y, np.zeros((1, 2)))


def test_step_without_recurrence_is_memoryless(rng):
    p = RnnParams.random(rng, 3, 4, 2)
    p.u_h = np.zeros_like(p.u_h)
    x = rng.normal(size=(1, 3))
    a = rnn_step(x, rng.normal(size=(1, 4)), p)
    b = rnn_step(x, rng.normal(size=(1, 4)), p)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_step_matches_formula(rng):
    p = RnnParams.random(rng, 3, 4, 2, phi_h="tanh", phi_y="relu")
    x, h = rng.normal(size=(1, 3)), rng.normal(size=(1, 4))
    h_t, y_t = rnn_step(x, h, p)
    ref_h = np.tanh(x @ p.w_h + h @ p.u_h + p.b_h)
    assert np.abs(h_t - ref_h).max() < 1e-15
    assert np.abs(y_t - np.maximum(ref_h @ p.w_y + p.b_y, 0)).max() < 1e-15


def test_step_shape_errors(rng):
    p = RnnParams.random(rng, 3, 4, 2)
    with pytest.raises(ValueError):
        rnn_step(np.zeros((1, 2)), np.zeros((1, 4)), p)
    with pytest.raises(ValueError):
        rnn_step(np.zeros((1, 3)), np.zeros((1, 5)), p)
    with pytest.raises(ValueError):
        RnnParams(np.zeros((3, 4)), np.zeros((4, 3)), np.zeros((1, 4)), np.zeros((4, 2)), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        RnnParams.random(rng, 3, 4, 2, phi_h="sigmoid")


def test_unroll_single_step_and_zero_start(rng):
    p = RnnParams.random(rng, 3, 4, 2)
    x = rng.normal(size=(1, 3))
    H, Y = rnn_unroll(x, p)
    h, y = rnn_step(x, np.zeros((1, 4)), p)
    assert np.array_equal(H, h) and np.array_equal(Y, y)
    q = RnnParams.random(rng, 3, 4, 2)
    q.b_h[:] = 0
    H, _ = rnn_unroll(np.zeros((2, 3)), q)
    assert np.array_equal(H[0], np.tanh(np.zeros(4)))


def test_unroll_matches_loop(rng):
    p = RnnParams.random(rng, 3, 4, 2)
    x = rng.normal(size=(5, 3))
    H, Y = rnn_unroll(x, p)
    h = np.zeros((1, 4))
    for t in range(5):
        h = np.tanh(x[t:t + 1] @ p.w_h + h @ p.u_h + p.b_h)
        assert np.array_equal(H[t:t + 1], h)
        assert np.array_equal(Y[t:t + 1], h @ p.w_y + p.b_y)


def test_masked_form_examples(rng):
    p = RnnParams.random(rng, 4, 4, 3)
    x = rng.uniform(-1, 1, size=(6, 4))
    _, Y = rnn_unroll(x, p)
    assert np.abs(rnn_masked_form(x, p, 6) - Y).max() <= 1e-12
    assert np.abs(rnn_masked_form(x, p, 1) - rnn_step(x[:1], np.zeros((1, 4)), p)[1]).max() <= 1e-12
    for t in range(1, 7):
        assert np.abs(rnn_masked_form(x, p, t) - Y[:t]).max() <= 1e-12
    for t in (0, 7):
        with pytest.raises(ValueError):
            rnn_masked_form(x, p, t)


def test_selection_matrix():
    assert np.array_equal(selection_matrix(2, 3), [[1, 0, 0], [0, 1, 0]])


@given(seed=st.integers(0, 2**31))
def test_masked_form_equals_unroll_property(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(1, 9))
    d_in, d_h, d_out = (int(v) for v in r.integers(1, 9, size=3))
    p = RnnParams.random(r, d_in, d_h, d_out, str(r.choice(["tanh", "relu"])), str(r.choice(["identity", "relu"])))
    x = r.uniform(-1, 1, size=(n, d_in))
    _, Y = rnn_unroll(x, p)
    prev = None
    for t in range(1, n + 1):
        y_t = rnn_masked_form(x, p, t)
        assert np.abs(y_t - Y[:t]).max() <= 1e-12
        if prev is not None:
            assert np.array_equal(prev, y_t[:-1])
        prev = y_t
