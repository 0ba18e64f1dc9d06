import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from equimf.discrete import (Posterior, RateRow, conditional_rate_row, discrete_loss,
                             discrete_step, discrete_step_batch, euler_transition,
                             marginal_rate_row, sample_quantized, transition_probs)
from equimf.errors import DegenerateTime, NonFinite


def relu_rate_oracle(z_t, z1, t, K):
    """Off-diagonal rates straight from the ReLU construction with uniform noise."""
    p = lambda z: t * (z == z1) + (1 - t) / K  # noqa: E731
    dp = lambda z: (z == z1) - 1.0 / K  # noqa: E731
    out = np.zeros(K)
    for j in range(K):
        if j != z_t:
            out[j] = max(dp(j) - dp(z_t), 0.0) / (K * p(z_t))
    return out


def _ulp_close(a, b):
    return np.all(np.abs(a - b) <= np.spacing(np.maximum(np.abs(a), np.abs(b))))


def test_conditional_rate_examples():
    row = conditional_rate_row(1, 1, 0.3, 3)
    assert np.count_nonzero(row.rates) == 0
    row = conditional_rate_row(1, 0, 0.5, 2)
    np.testing.assert_array_equal(row.rates, [2.0, -2.0])


@pytest.mark.parametrize("t", [1.0, 1.5])
def test_conditional_rate_degenerate_time(t):
    with pytest.raises(DegenerateTime):
        conditional_rate_row(0, 1, t, 2)


def test_conditional_rate_matches_relu_formula():
    for K in range(1, 5):
        for z_t, z1 in itertools.product(range(K), repeat=2):
            for t in np.linspace(0.0, 0.99, 34):
                row = conditional_rate_row(z_t, z1, t, K)
                off = np.delete(row.rates, z_t)
                oracle = np.delete(relu_rate_oracle(z_t, z1, t, K), z_t)
                assert np.array_equal(off == 0, oracle == 0)
                assert _ulp_close(off, oracle)
                assert abs(row.rates.sum()) <= 1e-12


def test_marginal_rate_examples():
    assert np.count_nonzero(marginal_rate_row(np.eye(3)[2], 2, 0.4).rates) == 0
    row = marginal_rate_row(np.full(3, 1 / 3), 0, 0.0)
    np.testing.assert_allclose(row.rates[1:], [1 / 3, 1 / 3], rtol=0, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 4), st.integers(0, 3), st.floats(0.0, 0.98), st.integers(0, 2 ** 31))
def test_marginal_rate_is_expectation_of_conditional(K, z_t, t, seed):
    z_t = z_t % K
    post = np.random.default_rng(seed).dirichlet(np.ones(K))
    expected = sum(post[z1] * conditional_rate_row(z_t, z1, t, K).rates for z1 in range(K))
    got = marginal_rate_row(post, z_t, t).rates
    off = np.arange(K) != z_t
    assert np.abs(got[off] - expected[off]).max() < 1e-12
    assert abs(got.sum()) < 1e-12


def test_euler_transition_examples():
    zero = RateRow(np.zeros(3), 1)
    np.testing.assert_array_equal(euler_transition(zero, 0.5), [0, 1, 0])
    row = RateRow(np.array([2.0, -2.0]), 1)
    np.testing.assert_allclose(euler_transition(row, 0.25), [0.5, 0.5], atol=0)
    np.testing.assert_array_equal(euler_transition(row, 0.75), [1.0, 0.0])


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 6), st.floats(1e-6, 1.0), st.floats(0.0, 0.999), st.integers(0, 2 ** 31))
def test_euler_transition_is_simplex(K, delta, t, seed):
    rng = np.random.default_rng(seed)
    post = rng.dirichlet(np.ones(K) * 0.3)
    probs = euler_transition(marginal_rate_row(post, int(rng.integers(K)), t), delta)
    assert np.all(probs >= 0)
    assert abs(probs.sum() - 1.0) < 1e-12


def test_transition_probs_matches_rowwise_kernel():
    rng = np.random.default_rng(0)
    post = rng.dirichlet(np.ones(4), size=(5, 3))
    z = rng.integers(0, 4, size=(5, 3))
    t = rng.uniform(0, 0.9, size=(5, 1))
    d = rng.uniform(0, 1, size=(5, 1))
    got = transition_probs(post, z, t, d)
    for i, j in itertools.product(range(5), range(3)):
        ref = euler_transition(marginal_rate_row(post[i, j], z[i, j], t[i, 0]), d[i, 0])
        np.testing.assert_allclose(got[i, j], ref, atol=1e-14)


def _rate_matrix(post, t):
    K = post.shape[-1]
    return np.stack([marginal_rate_row(post[z], z, t).rates for z in range(K)])


def test_richardson_two_half_steps():
    post = np.array([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.1, 0.1, 0.8]])
    Q = _rate_matrix(post, 0.3)
    errs = []
    for h in (1e-2, 5e-3):
        one = np.stack([euler_transition(RateRow(Q[z], z), 2 * h) for z in range(3)])
        half = np.stack([euler_transition(RateRow(Q[z], z), h) for z in range(3)])
        errs.append(np.abs(half @ half - one).max())
        np.testing.assert_allclose(half @ half - one, h * h * Q @ Q, atol=1e-14)
    assert 3.5 < errs[0] / errs[1] < 4.5


def exact_evolution_defects(q, delta=1e-4, checkpoints=(0.1, 0.25, 0.5, 0.75, 0.9, 1.0)):
    """TV between Euler-evolved and closed-form marginals at each checkpoint."""
    K = q.size
    pi = np.full(K, 1.0 / K)
    steps = int(round(1.0 / delta))
    marks = {int(round(c / delta)): c for c in checkpoints}
    out = {}
    eye = np.eye(K)
    for k in range(steps):
        t = k * delta
        mix = t * eye + (1 - t) / K  # mix[z1, z] = p(z_t = z | z1)
        joint = q[:, None] * mix
        post = (joint / joint.sum(0, keepdims=True)).T  # post[z, z1]
        P = transition_probs(post, np.arange(K), t, delta)
        pi = pi @ P
        if k + 1 in marks:
            s = marks[k + 1]
            exact = s * q + (1 - s) / K
            out[s] = 0.5 * np.abs(pi - exact).sum()
    return out


@pytest.mark.parametrize("q", [np.array([0.7, 0.3]), np.array([0.5, 0.3, 0.2]), np.array([1.0, 0.0, 0.0])])
def test_exact_evolution_oracle(q):
    defects = exact_evolution_defects(q, delta=1e-3)
    assert max(defects.values()) < 1e-2


def test_sample_quantized_grid_tie():
    p = np.array([0.3, 0.7])
    q = p + np.array([1e-10, -1e-10])
    u = np.random.default_rng(0).random(1000)
    assert np.array_equal(sample_quantized(np.broadcast_to(p, (1000, 2)), u),
                          sample_quantized(np.broadcast_to(q, (1000, 2)), u))


def test_sample_quantized_frequencies():
    u = np.random.default_rng(1).random(100_000)
    draws = sample_quantized(np.broadcast_to([0.2, 0.5, 0.3], (u.size, 3)), u)
    np.testing.assert_allclose(np.bincount(draws) / u.size, [0.2, 0.5, 0.3], atol=0.01)


def test_discrete_step_fixed_point():
    post = Posterior(np.eye(3)[[0, 2]], np.eye(2)[[1]])
    x, e = discrete_step([0, 2], [[1, 1], [1, 1]], post, 0.4, 0.3, np.random.default_rng(0))
    assert list(x) == [0, 2] and e[0, 1] == 1


def test_discrete_step_final_uses_posterior():
    post = Posterior(np.eye(3)[[1, 2]], np.eye(2)[[0]])
    x, e = discrete_step([0, 0], [[1, 1], [1, 1]], post, 0.6, 0.4, np.random.default_rng(0))
    assert list(x) == [1, 2] and e[0, 1] == 0 and e[1, 0] == 0


def test_discrete_step_two_state_frequency():
    rng = np.random.default_rng(3)
    B = 100_000
    node_probs = np.broadcast_to([1.0, 0.0], (B, 1, 2))
    edge_probs = np.zeros((B, 1, 1, 2))
    x_s, _ = discrete_step_batch(np.ones((B, 1), dtype=int), np.ones((B, 1, 1), dtype=int),
                                 node_probs, edge_probs, np.full(B, 0.5), np.full(B, 0.25),
                                 np.ones((B, 1), dtype=bool), rng)
    p = np.mean(x_s[:, 0] == 0)
    assert abs(p - 0.5) < 3 * np.sqrt(0.25 / B)


def test_discrete_step_batch_output_is_symmetric():
    rng = np.random.default_rng(4)
    B, N, b, a = 3, 4, 2, 2
    node_probs = rng.dirichlet(np.ones(b), size=(B, N))
    ep = rng.dirichlet(np.ones(a + 1), size=(B, N, N))
    ep = 0.5 * (ep + ep.transpose(0, 2, 1, 3))
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0], [1, 0, 0, 0]], dtype=bool)
    x, e = discrete_step_batch(np.zeros((B, N), int), np.full((B, N, N), a), node_probs, ep,
                               np.full(B, 0.2), np.full(B, 0.5), mask, rng)
    assert np.array_equal(e, e.transpose(0, 2, 1))
    assert np.all(np.diagonal(e, axis1=1, axis2=2) == a)
    assert np.all(e[1, 2:, :] == a) and np.all(x[2, 1:] == 0)


def test_discrete_step_degenerate_time():
    post = Posterior(np.eye(2)[[0]], np.zeros((0, 2)))
    with pytest.raises(DegenerateTime):
        discrete_step([0], [[1]], post, 1.0, 0.0, np.random.default_rng(0))


def _logp(probs):
    return torch.log(torch.as_tensor(probs, dtype=torch.float64))


def test_discrete_loss_perfect_and_uniform():
    x1 = torch.tensor([[0, 1]])
    e1 = torch.tensor([[[1, 0], [0, 1]]])
    mask = torch.ones(1, 2, dtype=torch.bool)
    node = _logp(np.eye(4)[[0, 1]][None])
    edge = _logp(np.eye(2)[[[1, 0], [0, 1]]][None])
    loss, _, _ = discrete_loss(node, edge, x1, e1, mask)
    assert float(loss) == 0.0
    uniform = torch.full((1, 2, 4), np.log(0.25), dtype=torch.float64)
    _, node_term, _ = discrete_loss(uniform, edge, x1, e1, mask)
    assert abs(float(node_term) - np.log(4)) < 1e-12


def test_discrete_loss_edge_weight_zero_ignores_edges():
    rng = np.random.default_rng(0)
    x1 = torch.tensor([[0, 1, 1]])
    e1 = torch.tensor([[[1, 0, 1], [0, 1, 1], [1, 1, 1]]])
    mask = torch.ones(1, 3, dtype=torch.bool)
    node = torch.log_softmax(torch.as_tensor(rng.normal(size=(1, 3, 2))), -1)
    e_a = torch.log_softmax(torch.as_tensor(rng.normal(size=(1, 3, 3, 2))), -1)
    e_b = torch.log_softmax(torch.as_tensor(rng.normal(size=(1, 3, 3, 2))), -1)
    l_a, _, _ = discrete_loss(node, e_a, x1, e1, mask, edge_weight=0.0)
    l_b, _, _ = discrete_loss(node, e_b, x1, e1, mask, edge_weight=0.0)
    assert float(l_a) == float(l_b)
    assert float(discrete_loss(node, e_a, x1, e1, mask)[0]) >= 0


def test_discrete_loss_masked_entries_ignored():
    x1 = torch.tensor([[0, 0]])
    e1 = torch.tensor([[[1, 1], [1, 1]]])
    node = torch.log(torch.tensor([[[1.0, 0.0], [0.0, 1.0]]], dtype=torch.float64))
    edge = torch.log(torch.tensor([[[[0.0, 1.0]] * 2] * 2], dtype=torch.float64))
    loss, _, _ = discrete_loss(node, edge, x1, e1, torch.tensor([[True, False]]))
    assert float(loss) == 0.0
    with pytest.raises(NonFinite):
        discrete_loss(node, edge, x1, e1, torch.tensor([[True, True]]))
