import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surnn import gates as G
from surnn.numerics import Rng


def program(K=1, H=1, alpha=1.0, omega=np.pi / 2, bias=0.0):
    om = np.array([omega]) if K == 1 else np.geomspace(0.1, np.pi, K)
    return G.GateProgram(om, np.full((H, K), alpha), np.zeros((H, K)), np.full(H, bias))


def test_zero_amplitude_gives_bias():
    p = program(K=4, H=3, alpha=0.0)
    assert np.all(G.preactivation(p, 5) == 0.0)
    p.bias[:] = 1.0
    assert np.all(G.preactivation(p, 17) == 1.0)


def test_single_sinusoid_closed_form():
    p = program()
    assert G.preactivation(p, 1)[0] == pytest.approx(1.0, abs=1e-15)
    assert G.preactivation(p, 2)[0] == pytest.approx(0.0, abs=1e-15)


def test_time_is_one_based():
    with pytest.raises(ValueError):
        G.preactivation(program(), 0)


def test_program_validation():
    with pytest.raises(ValueError):
        G.GateProgram(np.array([0.5, 0.2]), np.zeros((1, 2)), np.zeros((1, 2)), np.zeros(1))
    with pytest.raises(ValueError):
        G.GateProgram(np.array([0.5]), np.zeros((2, 1)), np.zeros((1, 1)), np.zeros(2))
    with pytest.raises(ValueError):
        G.GateProgram(np.array([0.5]), np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1), slope=0.0)


def test_binarize_strict():
    assert G.binarize(0.3) == 1.0
    assert G.binarize(0.0) == 0.0
    assert G.binarize(-1e-300) == 0.0


def test_surrogate_values_and_symmetry():
    assert G.surrogate_grad(0.0, 2.0) == pytest.approx(0.5)
    assert G.surrogate_grad(0.0, 1.0) == pytest.approx(0.25)
    assert G.surrogate_grad(50.0, 3.0) < 1e-40
    a = np.linspace(-5, 5, 101)
    np.testing.assert_array_equal(G.surrogate_grad(a, 2.0), G.surrogate_grad(-a, 2.0))
    assert np.argmax(G.surrogate_grad(a, 2.0)) == 50


def test_schedules():
    assert np.all(G.generate_mask(G.EveryKSteps(1), 7, 3).g == 1.0)
    assert np.all(G.generate_mask(G.FixedRandomBernoulli(0.0), 7, 3).g == 0.0)
    g = G.generate_mask(G.EveryKSteps(3), 6, 2).g
    assert np.flatnonzero(g[:, 0]).tolist() == [2, 5]  # steps 3 and 6
    assert np.all(G.generate_mask(G.Dense(), 4, 2).g == 1.0)


@given(st.integers(1, 10), st.integers(1, 60))
@settings(max_examples=40, deadline=None)
def test_every_k_rate(k, T):
    m = G.generate_mask(G.EveryKSteps(k), T, 3)
    assert G.update_rate(m) == (T // k) / T


def test_update_rate_counts():
    assert G.update_rate(np.ones((3, 4))) == 1.0
    assert G.update_rate(np.zeros((3, 4))) == 0.0
    assert G.update_rate(np.array([[1, 0], [0, 1]])) == 0.5
    with pytest.raises(ValueError):
        G.update_rate(np.zeros((0, 3)))


def test_input_threshold_needs_inputs():
    with pytest.raises(ValueError):
        G.generate_mask(G.InputThreshold(), 5, 2)
    x = np.zeros((5, 2, 3))
    x[2, 1, 0] = 0.7
    m = G.generate_mask(G.InputThreshold(), 5, 4, inputs=x)
    assert m.g.shape == (5, 2, 4)
    assert m.g.sum() == 4 and np.all(m.g[2, 1] == 1.0)


@given(st.integers(0, 2**31 - 1), st.integers(1, 12), st.integers(3, 80))
@settings(max_examples=40, deadline=None)
def test_mask_is_heaviside_of_preactivation(seed, H, T):
    p = G.init_program(Rng(seed), H, T)
    m = G.generate_mask(G.Rhythmic(p), T, H)
    m.check()
    assert set(np.unique(m.g)) <= {0.0, 1.0}


@given(st.integers(0, 2**31 - 1), st.integers(1, 9), st.integers(3, 120))
@settings(max_examples=40, deadline=None)
def test_exact_table_matches_direct_bitwise(seed, H, T):
    p = G.init_program(Rng(seed), H, T)
    direct = np.stack([G.preactivation(p, t) for t in range(1, T + 1)])
    np.testing.assert_array_equal(G.preactivation_table(p, T, exact=True), direct)
    np.testing.assert_allclose(G.preactivation_table(p, T), direct, atol=1e-12)


def test_short_grid_rejected():
    with pytest.raises(ValueError):
        G.init_program(Rng(0), 4, 2)


def test_init_grid_and_default_rate():
    p = G.init_program(Rng(0), 64, 500)
    assert p.K == 64
    assert p.omega[0] == pytest.approx(2 * np.pi / 500) and p.omega[-1] == pytest.approx(np.pi)
    rate = G.update_rate(G.generate_mask(G.Rhythmic(p), 500, 64))
    assert 0.4 < rate < 0.6


@pytest.mark.parametrize("rate", [0.05, 0.1, 0.37, 1.0])
def test_target_rate_bias(rate):
    p = G.init_program(Rng(1), 16, 300, target_rate=rate)
    g = G.generate_mask(G.Rhythmic(p), 300, 16).g
    np.testing.assert_array_equal(g.sum(axis=0), round(rate * 300))


def test_program_backward_matches_finite_differences():
    rng = Rng(5)
    p = G.init_program(rng, 3, 20, K=4, learn_omega=True)
    d_a = rng.normal(0, 1, (20, 3))

    def objective():
        return float(np.sum(d_a * G.preactivation_table(p, 20)))

    grads = G.program_backward(p, d_a)
    for name in ("omega", "alpha", "phi", "bias"):
        arr = getattr(p, name)
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + 1e-6
            up = objective()
            arr[idx] = old - 1e-6
            down = objective()
            arr[idx] = old
            fd[idx] = (up - down) / 2e-6
        np.testing.assert_allclose(grads[name], fd, rtol=1e-6, atol=1e-7)


def test_frozen_omega_has_no_gradient():
    p = G.init_program(Rng(0), 2, 10)
    assert "omega" not in G.program_backward(p, np.ones((10, 2)))


def test_dump_mask_csv(tmp_path):
    m = G.generate_mask(G.EveryKSteps(2), 4, 2)
    G.dump_mask_csv(m, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "t,i,a,g"
    assert len(lines) == 1 + 8
    assert lines[3].startswith("2,0,") and lines[3].endswith(",1")
