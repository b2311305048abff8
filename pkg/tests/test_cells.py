import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surnn.cells import (GruParams, RnnParams, backbone_jacobian, ensemble_expand, gru_step,
                         init_gru, init_rnn, rnn_step, selective_step, sensitivity_product,
                         step_jacobian)
from surnn.numerics import Rng, orthogonal


def zero_rnn(H=3, D=2):
    return RnnParams(np.zeros((H, D)), np.zeros((H, H)), np.zeros(H))


def zero_gru(H=3, D=2):
    return GruParams(np.zeros((3 * H, D)), np.zeros((3 * H, H)), np.zeros(3 * H), np.zeros(3 * H))


def test_rnn_examples():
    f, _ = rnn_step(zero_rnn(), np.array([1.0, -2.0, 3.0]), np.array([4.0, 5.0]))
    assert np.all(f == 0.0)
    p = zero_rnn()
    p.b[:] = 1.0
    f, _ = rnn_step(p, np.ones(3), np.ones(2))
    np.testing.assert_array_equal(f, np.tanh(1.0))
    p = RnnParams(np.array([[0.5]]), np.array([[0.5]]), np.zeros(1))
    assert rnn_step(p, np.ones(1), np.ones(1))[0][0] == np.tanh(1.0)


def test_gru_examples():
    f, c = gru_step(zero_gru(), np.zeros(3), np.zeros(2))
    assert np.all(c.heads["z"] == 0.5) and np.all(c.heads["n"] == 0.0) and np.all(f == 0.0)
    h = np.ones(3)
    f, _ = gru_step(zero_gru(), h, np.zeros(2))
    np.testing.assert_array_equal(f, 0.5 * h)
    p = zero_gru()
    p.b_ih[3:6] = -50.0
    f, _ = gru_step(p, np.array([0.3, -0.7, 0.9]), np.zeros(2))
    np.testing.assert_allclose(f, [0.3, -0.7, 0.9], atol=1e-20 + 1e-21)


def test_reset_gate_acts_on_hidden_side_of_candidate():
    rng = Rng(1)
    p = init_gru(rng, 2, 3)
    p.b_hh[6:] = rng.normal(0, 1, 3)
    h, x = rng.normal(0, 1, 3), rng.normal(0, 1, 2)
    _, c = gru_step(p, h, x)
    gi = p.W_ih @ x + p.b_ih
    gh = p.W_hh @ h + p.b_hh
    r = 1 / (1 + np.exp(-(gi[:3] + gh[:3])))
    np.testing.assert_allclose(c.heads["n"], np.tanh(gi[6:] + r * gh[6:]), rtol=1e-14)


def test_dimension_errors():
    with pytest.raises(ValueError):
        rnn_step(zero_rnn(), np.zeros(4), np.zeros(2))
    with pytest.raises(ValueError):
        gru_step(zero_gru(), np.zeros(3), np.zeros(5))
    with pytest.raises(ValueError):
        RnnParams(np.zeros((0, 2)), np.zeros((0, 0)), np.zeros(0))
    with pytest.raises(ValueError):
        GruParams(np.zeros((6, 2)), np.zeros((6, 3)), np.zeros(6), np.zeros(6))


def test_selective_examples():
    step = lambda h, x: (np.array([0.5, 0.9]), type("C", (), {"h_prev": h})())
    h_next, _ = selective_step(lambda h, x: rnn_step(RnnParams(np.zeros((2, 1)), np.zeros((2, 2)),
                                                                np.arctanh([0.5, 0.9])), h, x),
                               np.array([0.1, 0.2]), np.zeros(1), np.array([1.0, 0.0]))
    np.testing.assert_allclose(h_next, [0.5, 0.2], rtol=1e-15)
    assert h_next[1] == 0.2
    with pytest.raises(ValueError):
        selective_step(step, np.zeros(2), np.zeros(1), np.array([0.5, 1.0]))


@given(st.integers(0, 2**31 - 1), st.integers(1, 8), st.integers(1, 5), st.booleans())
@settings(max_examples=60, deadline=None)
def test_carry_and_reduction_bitwise(seed, H, D, gru):
    rng = Rng(seed)
    p = init_gru(rng, D, H) if gru else init_rnn(rng, D, H)
    back = (lambda h, x: gru_step(p, h, x)) if gru else (lambda h, x: rnn_step(p, h, x))
    h, x = rng.normal(0, 1, H), rng.normal(0, 1, D)
    carried, _ = selective_step(back, h, x, np.zeros(H))
    assert carried.tobytes() == h.tobytes()
    full, _ = selective_step(back, h, x, np.ones(H))
    assert full.tobytes() == back(h, x)[0].tobytes()
    g = (rng.uniform(0, 1, H) < 0.5).astype(float)
    mixed, _ = selective_step(back, h, x, g)
    f = back(h, x)[0]
    for i in range(H):
        assert mixed[i] == (f[i] if g[i] == 1 else h[i])


def fd_jacobian(step, h, eps=1e-6):
    H = h.shape[0]
    J = np.zeros((H, H))
    for j in range(H):
        e = np.zeros(H)
        e[j] = eps
        J[:, j] = (step(h + e) - step(h - e)) / (2 * eps)
    return J


def test_jacobian_examples():
    p = init_gru(Rng(0), 2, 3)
    _, c = selective_step(lambda h, x: gru_step(p, h, x), np.ones(3), np.ones(2), np.zeros(3))
    np.testing.assert_array_equal(step_jacobian(c), np.eye(3))
    p = RnnParams(np.zeros((1, 1)), np.array([[0.7]]), np.zeros(1))
    _, c = selective_step(lambda h, x: rnn_step(p, h, x), np.zeros(1), np.zeros(1), np.ones(1))
    assert step_jacobian(c)[0, 0] == pytest.approx(0.7)


@pytest.mark.parametrize("gru", [False, True])
def test_jacobian_matches_finite_differences(gru):
    rng = Rng(3)
    for _ in range(20):
        p = init_gru(rng, 2, 3) if gru else init_rnn(rng, 2, 3)
        back = (lambda h, x: gru_step(p, h, x)) if gru else (lambda h, x: rnn_step(p, h, x))
        h, x = rng.normal(0, 1, 3), rng.normal(0, 1, 2)
        g = (rng.uniform(0, 1, 3) < 0.6).astype(float)
        _, c = selective_step(back, h, x, g)
        J = step_jacobian(c)
        J_fd = fd_jacobian(lambda hh: selective_step(back, hh, x, g)[0], h)
        np.testing.assert_allclose(J, J_fd, atol=1e-8)
        for i in np.flatnonzero(g == 0):
            np.testing.assert_array_equal(J[i], np.eye(3)[i])


def test_batched_jacobian_rejected():
    p = init_rnn(Rng(0), 1, 2)
    _, c = rnn_step(p, np.zeros((4, 2)), np.zeros((4, 1)))
    with pytest.raises(ValueError):
        backbone_jacobian(c)


def run_span(p, gru, hs0, xs, gs):
    back = (lambda h, x: gru_step(p, h, x)) if gru else (lambda h, x: rnn_step(p, h, x))
    caches, h = [], hs0
    for x, g in zip(xs, gs):
        h, c = selective_step(back, h, x, g)
        caches.append(c)
    return h, caches


def test_sensitivity_product_examples():
    rng = Rng(4)
    p = init_gru(rng, 2, 2)
    xs = rng.normal(0, 1, (2, 2))
    h0 = rng.normal(0, 1, 2)
    gs = np.array([[1.0, 0.0], [1.0, 1.0]])
    _, caches = run_span(p, True, h0, xs, gs)
    np.testing.assert_array_equal(sensitivity_product(caches[:1]), step_jacobian(caches[0]))
    np.testing.assert_array_equal(sensitivity_product([], H=2), np.eye(2))
    fd = fd_jacobian(lambda h: run_span(p, True, h, xs, gs)[0], h0)
    np.testing.assert_allclose(sensitivity_product(caches), fd, atol=1e-8)
    _, off = run_span(p, True, h0, xs, np.zeros((2, 2)))
    np.testing.assert_array_equal(sensitivity_product(off), np.eye(2))


def test_ensemble_expand_examples():
    np.testing.assert_array_equal(ensemble_expand([], H=2), np.eye(2))
    rng = Rng(5)
    p = init_rnn(rng, 1, 1)
    _, caches = run_span(p, False, np.array([0.3]), rng.normal(0, 1, (2, 1)), np.ones((2, 1)))
    d1 = step_jacobian(caches[0])[0, 0] - 1
    d2 = step_jacobian(caches[1])[0, 0] - 1
    assert ensemble_expand(caches)[0, 0] == pytest.approx(1 + d1 + d2 + d2 * d1, abs=1e-12)
    _, off = run_span(p, False, np.array([0.3]), rng.normal(0, 1, (3, 1)), np.zeros((3, 1)))
    np.testing.assert_array_equal(ensemble_expand(off), np.eye(1))


def test_ensemble_span_limit():
    p = init_rnn(Rng(0), 1, 1)
    _, caches = run_span(p, False, np.zeros(1), np.zeros((21, 1)), np.ones((21, 1)))
    with pytest.raises(ValueError):
        ensemble_expand(caches)


def test_row_contracts_at_its_last_update():
    # contractive vanilla backbone at the origin: J_f = rho * Q exactly
    rho, H, T = 0.8, 6, 40
    rng = np.random.default_rng(0)
    for seed in range(10):
        p = RnnParams(np.zeros((H, 1)), rho * orthogonal(Rng(seed), H), np.zeros(H))
        gs = (rng.random((T, H)) < 0.3).astype(float)
        _, caches = run_span(p, False, np.zeros(H), np.zeros((T, 1)), gs)
        M = sensitivity_product(caches)
        for i in range(H):
            # the last update of unit i contracts its row by rho; carry steps cannot grow it
            last = np.flatnonzero(gs[:, i])
            if len(last):
                assert np.linalg.norm(M[i]) <= rho * np.linalg.norm(
                    sensitivity_product(caches[:last[-1]], H=H), 2) + 1e-12
            else:
                np.testing.assert_array_equal(M[i], np.eye(H)[i])
