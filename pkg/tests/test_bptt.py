import numpy as np
import pytest

from surnn.bptt import Layer, grad_trace, layer_backward, layer_forward, nonidentity_count
from surnn.cells import RnnParams, init_gru, init_rnn
from surnn.gates import (Dense, EveryKSteps, FixedRandomBernoulli, GateMask, LearnableTable,
                         Rhythmic, init_program)
from surnn.numerics import Rng
from surnn.onepass import init_onepass

T, B, D, H = 7, 3, 2, 4


def make_layer(kind, seed=0, schedule=None, soft=False):
    rng = Rng(seed)
    if kind.endswith("rnn"):
        params = init_rnn(rng, D, H)
    elif kind.startswith("onepass"):
        params = init_onepass(rng, D, H, -4.0)
    else:
        params = init_gru(rng, D, H)
    return Layer(kind, params, schedule, soft)


def weighted_loss(layer, x, w, mask=None):
    hs, _ = layer_forward(layer, x, mask=mask)
    return float(np.sum(w * hs))


def fd_check(layer, x, w, mask=None, eps=1e-6):
    _, tape = layer_forward(layer, x, mask=mask)
    grads = layer_backward(tape, w)
    worst = 0.0
    for name, arr in layer.param_blocks().items():
        an = grads.params[name]
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + eps
            lp = weighted_loss(layer, x, w, mask)
            arr[idx] = old - eps
            lm = weighted_loss(layer, x, w, mask)
            arr[idx] = old
            fd[idx] = (lp - lm) / (2 * eps)
        worst = max(worst, np.max(np.abs(an - fd)) / max(np.max(np.abs(fd)), 1e-12))
    return worst


def inputs(seed=1):
    rng = Rng(seed)
    return rng.normal(0, 1, (T, B, D)), rng.normal(0, 1, (T, B, H))


def closed_mask(value):
    a = np.full((T, H), 1.0 if value else -1.0)
    return GateMask((a > 0).astype(float), a)


@pytest.mark.parametrize("kind", ["su-rnn", "su-gru"])
def test_all_closed_adjoint_is_flat(kind):
    layer = make_layer(kind, schedule=EveryKSteps(1))
    x, _ = inputs()
    w = np.zeros((T, B, H))
    w[-1] = Rng(3).normal(0, 1, (B, H))
    _, tape = layer_forward(layer, x, mask=closed_mask(False))
    grads = layer_backward(tape, w)
    for t in range(T + 1):
        assert grads.adjoint[t].tobytes() == w[-1].tobytes()
    for arr in grads.params.values():
        assert np.all(arr == 0.0)


@pytest.mark.parametrize("kind,plain", [("su-rnn", "rnn"), ("su-gru", "gru")])
def test_all_open_matches_backbone(kind, plain):
    x, w = inputs()
    su = make_layer(kind, schedule=Dense())
    ref = make_layer(plain)
    hs_su, tape_su = layer_forward(su, x)
    hs_ref, tape_ref = layer_forward(ref, x)
    assert hs_su.tobytes() == hs_ref.tobytes()
    g_su, g_ref = layer_backward(tape_su, w), layer_backward(tape_ref, w)
    for name in g_ref.params:
        np.testing.assert_allclose(g_su.params[name], g_ref.params[name], rtol=0, atol=1e-12)
    np.testing.assert_allclose(g_su.dx, g_ref.dx, rtol=0, atol=1e-12)


@pytest.mark.parametrize("kind", ["rnn", "gru", "su-rnn", "su-gru"])
def test_param_grads_match_finite_differences(kind):
    sched = FixedRandomBernoulli(0.4, seed=5) if kind.startswith("su") else None
    layer = make_layer(kind, schedule=sched)
    x, w = inputs()
    assert fd_check(layer, x, w) < 1e-6


def test_onepass_input_grads_match_finite_differences():
    layer = make_layer("onepass-su-gru", schedule=FixedRandomBernoulli(0.4, seed=5))
    x, w = inputs()
    _, tape = layer_forward(layer, x)
    grads = layer_backward(tape, w)
    p = layer.params.base
    eps = 1e-6
    for name in ("W_hh", "b_ih", "b_hh"):
        arr = getattr(p, name)
        idx = (1,) * arr.ndim
        old = arr[idx]
        arr[idx] = old + eps
        lp = weighted_loss(layer, x, w)
        arr[idx] = old - eps
        lm = weighted_loss(layer, x, w)
        arr[idx] = old
        assert grads.params[name][idx] == pytest.approx((lp - lm) / (2 * eps), rel=1e-6, abs=1e-9)
    # real-input columns are trainable, gate-channel columns receive nothing
    assert np.all(grads.params["W_ih"][:, D:] == 0.0)
    arr = p.W_ih
    old = arr[2, 1]
    arr[2, 1] = old + eps
    lp = weighted_loss(layer, x, w)
    arr[2, 1] = old - eps
    lm = weighted_loss(layer, x, w)
    arr[2, 1] = old
    assert grads.params["W_ih"][2, 1] == pytest.approx((lp - lm) / (2 * eps), rel=1e-6)


def test_input_grads_match_finite_differences():
    layer = make_layer("su-gru", schedule=FixedRandomBernoulli(0.5, seed=2))
    x, w = inputs()
    _, tape = layer_forward(layer, x)
    dx = layer_backward(tape, w).dx
    eps = 1e-6
    for idx in [(0, 0, 0), (3, 1, 1), (6, 2, 0)]:
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        fd = (weighted_loss(layer, xp, w) - weighted_loss(layer, xm, w)) / (2 * eps)
        assert dx[idx] == pytest.approx(fd, rel=1e-6, abs=1e-10)


def test_gate_signal_example():
    # f - h = 0.5 with h0 = 0, preactivation a = 0 (gate closed), slope 2
    p = RnnParams(np.zeros((1, 1)), np.zeros((1, 1)), np.array([np.arctanh(0.5)]))
    table = LearnableTable(np.zeros((1, 1)), slope=2.0)
    layer = Layer("su-rnn", p, table)
    _, tape = layer_forward(layer, np.zeros((1, 1, 1)))
    grads = layer_backward(tape, np.ones((1, 1, 1)))
    assert grads.d_a[0, 0, 0] == pytest.approx(0.25, rel=1e-15)
    assert grads.gate["logits"][0, 0] == pytest.approx(0.25, rel=1e-15)


def test_no_increment_means_no_gate_gradient():
    p = RnnParams(np.zeros((H, D)), np.zeros((H, H)), np.zeros(H))
    table = LearnableTable(Rng(0).normal(0, 1, (H, T)))
    layer = Layer("su-rnn", p, table)
    x, w = inputs()
    _, tape = layer_forward(layer, np.zeros_like(x))
    grads = layer_backward(tape, w)
    assert np.all(grads.d_a == 0.0)
    assert np.all(grads.gate["logits"] == 0.0)


def test_soft_gate_program_grads_match_finite_differences():
    prog = init_program(Rng(4), H, T, K=3)
    layer = make_layer("su-gru", schedule=Rhythmic(prog), soft=True)
    x, w = inputs()
    _, tape = layer_forward(layer, x)
    grads = layer_backward(tape, w)
    eps = 1e-6
    for name in ("alpha", "phi", "bias"):
        arr = getattr(prog, name)
        for idx in list(np.ndindex(arr.shape))[:6]:
            old = arr[idx]
            arr[idx] = old + eps
            lp = weighted_loss(layer, x, w)
            arr[idx] = old - eps
            lm = weighted_loss(layer, x, w)
            arr[idx] = old
            assert grads.gate[name][idx] == pytest.approx((lp - lm) / (2 * eps), rel=1e-5, abs=1e-9)


def test_closed_steps_contribute_no_parameter_gradient():
    layer = make_layer("su-gru", schedule=EveryKSteps(1))
    x, w = inputs()
    a = np.full((T, H), -1.0)
    a[2] = 1.0  # only step 3 opens
    mask = GateMask((a > 0).astype(float), a)
    _, tape = layer_forward(layer, x, mask=mask)
    full = layer_backward(tape, w)
    # perturbing the inputs at a closed step must not change anything
    x2 = x.copy()
    x2[5] += 10.0
    _, tape2 = layer_forward(layer, x2, mask=mask)
    other = layer_backward(tape2, w)
    for name in full.params:
        assert full.params[name].tobytes() == other.params[name].tobytes()
    assert np.all(full.dx[5] == 0.0)


def test_gradients_are_sparse_in_closed_pairs():
    layer = make_layer("su-rnn", schedule=FixedRandomBernoulli(0.3, seed=1))
    x, w = inputs()
    _, tape = layer_forward(layer, x)
    grads = layer_backward(tape, w)
    closed_rows = np.all(tape.mask.g[:, 0, :] == 0.0, axis=0)
    assert np.all(grads.params["W_hh"][closed_rows] == 0.0)
    assert np.all(grads.params["b"][closed_rows] == 0.0)


def test_nonidentity_counts():
    layer = make_layer("su-gru", schedule=EveryKSteps(3))
    _, tape = layer_forward(layer, np.zeros((9, 2, D)))
    counts, rate = nonidentity_count(tape)
    np.testing.assert_array_equal(counts, np.full(H, 3.0))
    assert rate == pytest.approx(1 / 3)
    dense = make_layer("gru")
    _, tape = layer_forward(dense, np.zeros((9, 2, D)))
    counts, rate = nonidentity_count(tape)
    assert rate == 1.0 and np.all(counts == 9.0)


def test_grad_trace_shape_and_values():
    adj = np.zeros((4, 2, 3))
    adj[3] = [[3.0, 4.0, 0.0], [0.0, 0.0, 1.0]]
    tr = grad_trace(adj)
    np.testing.assert_array_equal(tr[:, 0], [0, 1, 2, 3])
    np.testing.assert_array_equal(tr[:, 1], [0, 0, 0, 3.0])


def test_shape_errors():
    layer = make_layer("gru")
    with pytest.raises(ValueError):
        layer_forward(layer, np.zeros((T, B, D + 1)))
    _, tape = layer_forward(layer, np.zeros((T, B, D)))
    with pytest.raises(ValueError):
        layer_backward(tape, np.zeros((T, B, H + 1)))
    with pytest.raises(ValueError):
        Layer("lstm", init_gru(Rng(0), D, H))
    with pytest.raises(ValueError):
        Layer("su-gru", init_gru(Rng(0), D, H))
