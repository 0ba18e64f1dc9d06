import inspect

import numpy as np
import pytest
from scipy import stats

from equimf.bridge import (conditional_velocity, noise_batch, noise_categorical,
                           noise_coordinates, noise_discrete_graph, sample_time_pair, TimePair)
from equimf.errors import BadConfig
from equimf.graph import Batch, Graph, validate, zero_center

from conftest import random_graph

N = 100_000


def test_time_pair_forced_interval():
    rng = np.random.default_rng(0)
    tp = sample_time_pair(0.999, rng, size=1000)
    assert np.all(tp.t <= 0.001 + 1e-15)
    assert np.all(tp.delta >= 0.999)
    assert np.all(tp.s <= 1.0)


def test_time_pair_bounds_monte_carlo():
    tp = sample_time_pair(0.05, np.random.default_rng(1), size=N)
    assert tp.delta.min() >= 0.05
    assert tp.s.max() <= 1.0
    assert tp.t.min() >= 0.0 and tp.t.max() < 0.95


@pytest.mark.parametrize("bad", [0.0, 1.0, -0.1])
def test_time_pair_rejects_bad_delta_min(bad):
    with pytest.raises(BadConfig, match="delta_min"):
        sample_time_pair(bad, np.random.default_rng(0))


def test_noise_categorical_t1_is_identity():
    z = np.random.default_rng(0).integers(0, 5, size=1000)
    assert np.array_equal(noise_categorical(z, 1.0, 5, np.random.default_rng(1)), z)


def test_noise_categorical_t0_uniform_chi2():
    draws = noise_categorical(np.zeros(N, dtype=int), 0.0, 4, np.random.default_rng(2))
    counts = np.bincount(draws, minlength=4)
    assert stats.chisquare(counts).pvalue > 0.01


def test_noise_categorical_mixture_half():
    draws = noise_categorical(np.zeros(N, dtype=int), 0.5, 2, np.random.default_rng(3))
    p_hat = np.mean(draws == 0)
    assert abs(p_hat - 0.75) < 3 * np.sqrt(0.75 * 0.25 / N)


@pytest.mark.parametrize("z1, t, K", [(0, 0.2, 3), (2, 0.7, 4), (1, 0.9, 2)])
def test_noise_categorical_marginal_consistency(z1, t, K):
    draws = noise_categorical(np.full(N, z1), t, K, np.random.default_rng(4))
    p = t + (1 - t) / K
    assert abs(np.mean(draws == z1) - p) < 3 * np.sqrt(p * (1 - p) / N)


def test_noise_discrete_graph_t1_and_invariants(rng):
    g = random_graph(5, 3, 2, rng)
    x, e = noise_discrete_graph(g, 1.0, 3, 2, rng)
    assert np.array_equal(x, g.x) and np.array_equal(e, g.e)
    for _ in range(50):
        x, e = noise_discrete_graph(g, 0.3, 3, 2, rng)
        validate(Graph(x, e, g.r), 3, 2)


def test_noise_discrete_graph_t0_joint_uniform():
    g = Graph([0, 0], [[1, 0], [0, 1]], np.zeros((2, 3)))
    rng = np.random.default_rng(5)
    counts = np.zeros(8)
    for _ in range(20_000):
        x, e = noise_discrete_graph(g, 0.0, 2, 1, rng)
        counts[x[0] * 4 + x[1] * 2 + e[0, 1]] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def test_noise_coordinates_endpoints(rng):
    r1 = zero_center(rng.standard_normal((4, 3)))
    rt, eps = noise_coordinates(r1, 1.0, np.random.default_rng(0))
    assert np.array_equal(rt, r1)
    rt, eps = noise_coordinates(r1, 0.0, np.random.default_rng(0))
    assert np.array_equal(rt, eps)
    assert np.abs(eps.sum(0)).max() < 1e-12


def test_noise_coordinates_second_moment():
    n = 4
    rng = np.random.default_rng(6)
    samples = np.stack([noise_coordinates(np.zeros((n, 3)), 0.5, rng)[0] for _ in range(N // 4)])
    # a centered standard Gaussian entry has variance (n - 1) / n
    expected = 0.25 * (n - 1) / n
    assert abs(samples.var() / expected - 1.0) < 0.02


def test_noise_coordinates_mean_is_t_r1():
    r1 = zero_center(np.random.default_rng(7).standard_normal((3, 3)))
    rng = np.random.default_rng(8)
    t = 0.4
    draws = np.stack([noise_coordinates(r1, t, rng)[0] for _ in range(20_000)])
    sem = draws.std(0) / np.sqrt(draws.shape[0])
    assert np.all(np.abs(draws.mean(0) - t * r1) < 4 * sem)


def test_conditional_velocity_identities(rng):
    r1 = zero_center(rng.standard_normal((5, 3)))
    assert np.count_nonzero(conditional_velocity(r1, r1)) == 0
    R1 = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
    np.testing.assert_array_equal(conditional_velocity(R1, np.zeros_like(R1)), R1)
    for t in (0.1, 0.5, 0.9):
        rt, eps = noise_coordinates(r1, t, rng)
        u = conditional_velocity(r1, eps)
        assert np.abs(u.sum(0)).max() < 1e-12
        np.testing.assert_allclose(rt + (1 - t) * u, r1, atol=1e-12)


def test_noise_batch_respects_mask_and_shared_time(rng):
    graphs = [random_graph(n, 3, 2, rng) for n in (2, 4)]
    batch = Batch.from_graphs(graphs, 3, 2)
    times = TimePair(np.array([0.2, 0.6]), np.array([0.1, 0.3]))
    nb = noise_batch(batch, times, rng)
    assert np.all(nb.x_t[0, 2:].numpy() == 0)
    assert np.all(nb.e_t[0, 2:, :].numpy() == 2)
    assert nb.r_t[0, 2:].abs().sum() == 0
    assert abs(nb.eps[1].sum(0)).max() < 1e-12
    np.testing.assert_allclose(nb.r_t + (1 - nb.t[:, None, None]) * nb.u_cond,
                               batch.r * batch.mask[..., None], atol=1e-12)


def test_no_per_domain_time_override():
    # one time pair drives both domains; the API offers nothing else
    params = inspect.signature(noise_batch).parameters
    assert list(params) == ["batch", "times", "rng"]
