"""Synchronized noising process for the discrete and continuous parts of a graph.

One time pair ``(t, delta)`` drives both domains; there is deliberately no
way to give nodes, edges and coordinates different times.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import BadConfig
from .graph import Batch, Graph, symmetric_from_upper, upper_pairs, zero_center


@dataclass(frozen=True)
class TimePair:
    t: np.ndarray
    delta: np.ndarray

    @property
    def s(self) -> np.ndarray:
        return self.t + self.delta


def sample_time_pair(delta_min: float, rng: np.random.Generator, size=None) -> TimePair:
    """``t ~ U(0, 1 - delta_min)`` then ``delta ~ U(delta_min, 1 - t)``."""
    if not 0.0 < delta_min < 1.0:
        raise BadConfig(f"must lie in (0, 1), got {delta_min}", key="delta_min")
    t = rng.uniform(0.0, 1.0 - delta_min, size=size)
    delta = rng.uniform(delta_min, 1.0 - t)
    delta = np.maximum(delta, delta_min)
    # guard the last ulp so that s = t + delta never exceeds 1
    over = t + delta > 1.0
    while np.any(over):
        delta = np.where(over, np.nextafter(delta, 0.0), delta)
        over = t + delta > 1.0
    return TimePair(np.asarray(t, dtype=np.float64), np.asarray(delta, dtype=np.float64))


def noise_categorical(z1, t, K: int, rng: np.random.Generator):
    """Draw from ``t * delta(., z1) + (1 - t) / K`` elementwise."""
    z1 = np.asarray(z1)
    keep = rng.random(z1.shape) < t
    uniform = rng.integers(0, K, size=z1.shape)
    out = np.where(keep, z1, uniform)
    return out if out.ndim else int(out)


def noise_discrete_graph(g: Graph, t: float, b: int, a: int, rng: np.random.Generator):
    x_t = noise_categorical(g.x, t, b, rng)
    i, j = upper_pairs(g.n)
    e_up = noise_categorical(g.e[i, j], t, a + 1, rng)
    return np.asarray(x_t), symmetric_from_upper(e_up, g.n, a)


def noise_coordinates(r1, t: float, rng: np.random.Generator):
    """Return ``(R_t, eps)`` with ``R_t = t R1 + (1 - t) eps`` and ``eps`` centered."""
    r1 = np.asarray(r1, dtype=np.float64)
    eps = zero_center(rng.standard_normal(r1.shape))
    return t * r1 + (1.0 - t) * eps, eps


def conditional_velocity(r1, eps):
    """Velocity of the linear path, ``d/dt [t R1 + (1 - t) eps] = R1 - eps``."""
    return r1 - eps


@dataclass(frozen=True)
class NoisedBatch:
    """Batch-level corruption at a shared time pair per graph."""

    x_t: torch.Tensor
    e_t: torch.Tensor
    r_t: torch.Tensor
    eps: torch.Tensor
    u_cond: torch.Tensor
    t: torch.Tensor
    delta: torch.Tensor


def noise_batch(batch: Batch, times: TimePair, rng: np.random.Generator) -> NoisedBatch:
    """Corrupt every graph of ``batch``; graph ``k`` uses ``times.t[k]``."""
    bs, N = batch.x.shape
    mask = batch.mask.numpy()
    t = np.asarray(times.t, dtype=np.float64).reshape(bs)
    delta = np.asarray(times.delta, dtype=np.float64).reshape(bs)

    x1 = batch.x.numpy()
    x_t = noise_categorical(x1, t[:, None], batch.b, rng)
    x_t = np.where(mask, x_t, 0)

    i, j = upper_pairs(N)
    e_up = noise_categorical(batch.e.numpy()[:, i, j], t[:, None], batch.a + 1, rng)
    pair_ok = mask[:, i] & mask[:, j]
    e_up = np.where(pair_ok, e_up, batch.a)
    e_t = np.full((bs, N, N), batch.a, dtype=np.int64)
    e_t[:, i, j] = e_up
    e_t[:, j, i] = e_up

    r1 = batch.r.numpy()
    eps = zero_center(rng.standard_normal(r1.shape), mask)
    tt = t[:, None, None]
    r_t = tt * r1 + (1.0 - tt) * eps
    u = conditional_velocity(r1, eps)
    return NoisedBatch(
        torch.from_numpy(x_t.astype(np.int64)), torch.from_numpy(e_t),
        torch.from_numpy(r_t), torch.from_numpy(eps), torch.from_numpy(u),
        torch.from_numpy(t.copy()), torch.from_numpy(delta.copy()),
    )
