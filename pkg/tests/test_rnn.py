import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from lsic.nn import ParamTensor, finite_diff_check, init_uniform, make_rng, zero_grads
from lsic.rnn import (LstmCell, SessionEncoder, bptt_backward, embed_session_input, encode_trajectory, lstm_step,
                      session_weights)

from conftest import random_inputs


def make_encoder(H=3, D=2, F=0, ctx=0, num_counterparts=4, seed=0, scale=0.5):
    rng = make_rng(seed)
    cell = LstmCell.create("c.", H, D, ctx, rng, init_range=scale)
    table = init_uniform("table", (num_counterparts, D), -scale, scale, rng)
    proj = init_uniform("proj", (D, F), -scale, scale, rng) if F else None
    return SessionEncoder(cell, table, proj)


def encoder_params(enc):
    p = dict(enc.cell.tensors())
    p["table"] = enc.table
    if enc.content_proj is not None:
        p["proj"] = enc.content_proj
    return p


def test_zero_cell_fixed_point():
    cell = LstmCell.zeros("z.", 4, 3)
    h, c = lstm_step(cell, np.zeros(4), np.zeros(4), np.ones(3))
    assert not h.any() and not c.any()


def test_zero_cell_carries_half_the_memory():
    cell = LstmCell.zeros("z.", 4, 3)
    h, c = lstm_step(cell, np.zeros(4), np.ones(4), np.zeros(3))
    assert np.allclose(c, 0.5)
    assert np.allclose(h, 0.5 * np.tanh(0.5))
    assert h[0] == pytest.approx(0.2311, abs=1e-4)


def test_step_shape_mismatch():
    cell = LstmCell.zeros("z.", 4, 3)
    with pytest.raises(ValueError):
        lstm_step(cell, np.zeros(4), np.zeros(4), np.zeros(2))
    with pytest.raises(ValueError):
        lstm_step(cell, np.zeros(4), np.zeros(4), np.zeros(3), context=np.zeros(2))


def test_context_slot_with_zero_weights_matches_plain_cell():
    rng = make_rng(1)
    plain = LstmCell.create("p.", 3, 2, 0, rng, 0.5)
    with_ctx = LstmCell(plain.W, plain.bW, plain.V, plain.bV,
                        ParamTensor("Wc", np.zeros((9, 4))), ParamTensor("Vc", np.zeros((3, 4))))
    x, h0, c0 = np.array([0.3, -0.2]), np.array([0.1, 0.2, -0.3]), np.array([0.5, -0.5, 0.0])
    a = lstm_step(plain, h0, c0, x)
    b = lstm_step(with_ctx, h0, c0, x, context=np.ones(4))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.1, 20.0))
def test_hidden_state_bounded(seed, scale):
    rng = np.random.default_rng(seed)
    cell = LstmCell.create("r.", 4, 3, 0, rng, init_range=scale)
    h, c = lstm_step(cell, rng.uniform(-1, 1, 4), rng.normal(0, 3, 4), rng.normal(0, scale, 3))
    assert np.all(np.abs(h) <= 1.0)


def test_single_step_gradient_closed_form():
    # zero weights, zero state: only the candidate bias path is live, d sum(h)/d bV = o * i = 0.25
    enc = SessionEncoder(LstmCell.zeros("z.", 2, 1), ParamTensor("table", np.zeros((1, 1))))
    sessions = [sp.csr_matrix(np.ones((1, 1)))]
    traj = encode_trajectory(enc, sessions, 0)
    bptt_backward(enc, traj, {1: np.ones(2)})
    assert np.allclose(enc.cell.bV.grad, 0.25)
    assert not enc.cell.bW.grad.any()


def test_lstm_step_gradient_fd():
    enc = make_encoder(H=3, D=2)
    inputs = random_inputs(1, 4, 1, seed=4)
    params = encoder_params(enc)

    def f():
        zero_grads(params)
        traj = enc.encode(np.array([0]), inputs.user)
        bptt_backward(enc, traj, {1: np.ones(3)})
        return float(traj.state(1).sum()), {k: p.grad.copy() for k, p in params.items()}

    assert finite_diff_check(f, params) < 1e-4


@pytest.mark.parametrize("F,ctx", [(0, 0), (3, 0), (3, 2)])
def test_bptt_fd_full_trajectory(F, ctx):
    T, U = 4, 3
    enc = make_encoder(H=4, D=3, F=F, ctx=ctx, num_counterparts=5, seed=F + ctx)
    inputs = random_inputs(U, 5, T, seed=9)
    rng = np.random.default_rng(2)
    content = rng.normal(size=(U, F)) if F else None
    contexts = [rng.normal(size=ctx) for _ in range(T + (1 if F else 0))] if ctx else None
    weights = rng.normal(size=(T + 1, 4))
    params = encoder_params(enc)

    def f():
        zero_grads(params)
        traj = encode_trajectory(enc, inputs.user, 1, content=content, contexts=contexts)
        loss = sum(float(weights[t] @ traj.state(t)[0]) for t in range(T + 1))
        bptt_backward(enc, traj, {t: weights[t] for t in range(T + 1)})
        return loss, {k: p.grad.copy() for k, p in params.items()}

    assert finite_diff_check(f, params) < 1e-4


def test_zero_upstream_gradient_gives_zero_gradients():
    enc = make_encoder(F=2)
    inputs = random_inputs(2, 4, 3)
    traj = enc.encode(np.arange(2), inputs.user, content=np.ones((2, 2)))
    bptt_backward(enc, traj, {})
    assert all(not p.grad.any() for p in encoder_params(enc).values())


def test_missing_cache_rejected():
    enc = make_encoder()
    traj = enc.encode(np.arange(2), random_inputs(2, 4, 2).user, keep_cache=False)
    with pytest.raises(RuntimeError):
        bptt_backward(enc, traj, {1: np.ones((2, 3))})


def test_contexts_length_mismatch():
    enc = make_encoder(ctx=2)
    with pytest.raises(ValueError):
        encode_trajectory(enc, random_inputs(2, 4, 3).user, 0, contexts=[np.zeros(2)] * 2)


def test_zero_sessions_returns_initial_state():
    enc = make_encoder()
    h0 = np.array([0.1, -0.2, 0.3])
    traj = encode_trajectory(enc, [], 0, h0=h0)
    assert traj.num_states == 1
    assert np.array_equal(traj.state(0)[0], h0)


def test_content_changes_movie_state():
    enc = make_encoder(F=3)
    sessions = random_inputs(2, 4, 2).user
    a = encode_trajectory(enc, sessions, 0, content=np.array([[1.0, 0.0, 2.0], [0.0, 0.0, 0.0]]))
    b = encode_trajectory(enc, sessions, 0)
    assert not np.allclose(a.state(0), b.state(0))


def test_causality():
    inputs = random_inputs(1, 4, 3, seed=1)
    enc = make_encoder()
    base = encode_trajectory(enc, inputs.user, 0)
    perturbed = list(inputs.user)
    perturbed[1] = session_weights(sp.csr_matrix(np.array([[5.0, 5.0, 5.0, 5.0]])))
    moved = encode_trajectory(enc, perturbed, 0)
    # state t summarises sessions before t
    assert np.array_equal(base.state(0), moved.state(0))
    assert np.array_equal(base.state(1), moved.state(1))
    assert not np.allclose(base.state(2), moved.state(2))


def test_embed_session_input_examples():
    table = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]])
    assert np.array_equal(embed_session_input(table, [], []), np.zeros(2))
    assert np.array_equal(embed_session_input(table, [1], [5]), table[1])
    assert np.allclose(embed_session_input(table, [0, 1], [5, 5]), (table[0] + table[1]) / 2)


def test_session_weights_match_embedding():
    r = sp.csr_matrix(np.array([[5.0, 0, 2.0], [0, 0, 0]]))
    table = np.arange(6.0).reshape(3, 2)
    x = session_weights(r) @ table
    assert np.allclose(x[0], embed_session_input(table, [0, 2], [5, 2]))
    assert not x[1].any()
