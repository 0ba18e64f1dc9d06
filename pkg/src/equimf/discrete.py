"""CTMC rates, the finite-interval Euler kernel, the discrete denoising step and loss.

With a uniform noise distribution over ``K`` states the conditional rate
toward the clean state ``z1`` is ``1 / (1 - t)`` and zero everywhere else, so
the marginal rate toward ``j`` is ``p(z1 = j | z_t) / (1 - t)``. The network
posterior is conditioned on the interval length, and one Euler step uses the
full interval.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DegenerateTime, NonFinite

QUANTUM = 10_000_000  # probabilities are rounded to a 1e-7 grid before sampling
FINAL_STEP_EPS = 1e-9


@dataclass(frozen=True)
class RateRow:
    """Row ``z_t`` of a rate matrix; ``rates[z_t]`` holds minus the row's outflow."""

    rates: np.ndarray
    state: int

    @property
    def K(self) -> int:
        return int(self.rates.shape[0])


@dataclass(frozen=True)
class Posterior:
    """Per-node (``n x b``) and per-upper-triangle-edge (``P x (a+1)``) probabilities."""

    node_probs: np.ndarray
    edge_probs: np.ndarray


def _check_time(t):
    if np.any(np.asarray(t) >= 1.0):
        raise DegenerateTime("rate is unbounded at t >= 1")


def _row(off_diag: np.ndarray, z_t: int) -> RateRow:
    rates = np.array(off_diag, dtype=np.float64)
    rates[z_t] = 0.0
    rates[z_t] = -rates.sum()
    return RateRow(rates, int(z_t))


def conditional_rate_row(z_t: int, z1: int, t: float, K: int) -> RateRow:
    """Rate out of ``z_t`` given the clean state ``z1`` (uniform noise)."""
    _check_time(t)
    off = np.zeros(K)
    if z_t != z1:
        off[z1] = 1.0 / (1.0 - t)
    return _row(off, z_t)


def marginal_rate_row(posterior_row, z_t: int, t: float) -> RateRow:
    """Expectation of :func:`conditional_rate_row` under ``z1 ~ posterior_row``."""
    _check_time(t)
    p = np.asarray(posterior_row, dtype=np.float64)
    return _row(p / (1.0 - t), z_t)


def euler_transition(row: RateRow, delta: float) -> np.ndarray:
    """``delta(z_t, .) + rates * delta``, clamped at zero and renormalized."""
    probs = row.rates * delta
    probs[row.state] += 1.0
    return _project(probs)


def _project(probs: np.ndarray) -> np.ndarray:
    probs = np.clip(probs, 0.0, None)
    return probs / probs.sum(axis=-1, keepdims=True)


def transition_probs(posterior, z_t, t, delta) -> np.ndarray:
    """Vectorized marginal-rate Euler kernel.

    ``posterior`` has shape ``[..., K]``; ``z_t``, ``t`` and ``delta``
    broadcast against its leading dimensions.
    """
    _check_time(t)
    posterior = np.asarray(posterior, dtype=np.float64)
    K = posterior.shape[-1]
    z_t = np.asarray(z_t)
    scale = (np.asarray(delta, dtype=np.float64) / (1.0 - np.asarray(t, dtype=np.float64)))
    onehot = np.eye(K, dtype=np.float64)[z_t]
    off = posterior * (1.0 - onehot)
    probs = off * scale[..., None] + onehot * (1.0 - off.sum(-1, keepdims=True) * scale[..., None])
    return _project(probs)


def sample_quantized(probs, u) -> np.ndarray:
    """Inverse-CDF categorical sampling on probabilities rounded to a 1e-7 grid.

    Two probability rows that round to the same grid yield the same index for
    the same uniform ``u``.
    """
    q = np.rint(np.asarray(probs, dtype=np.float64) * QUANTUM).astype(np.int64)
    cum = np.cumsum(q, axis=-1)
    target = np.floor(np.asarray(u) * cum[..., -1]).astype(np.int64)
    return (cum > target[..., None]).argmax(axis=-1)


def discrete_step_batch(x_t, e_t, node_probs, edge_probs, t, delta, mask, rng):
    """One denoising step for a padded batch.

    Shapes: ``x_t [B, N]``, ``e_t [B, N, N]``, ``node_probs [B, N, b]``,
    ``edge_probs [B, N, N, a+1]`` (symmetric), ``t``/``delta`` ``[B]``.
    Returns new ``(x_s, e_s)`` numpy arrays. Uniforms for every node and
    every upper-triangle pair are drawn even where masked so the stream does
    not depend on padding.
    """
    x_t = np.asarray(x_t)
    e_t = np.asarray(e_t)
    mask = np.asarray(mask, dtype=bool)
    B, N = x_t.shape
    a = edge_probs.shape[-1] - 1
    t = np.asarray(t, dtype=np.float64).reshape(B)
    delta = np.asarray(delta, dtype=np.float64).reshape(B)
    _check_time(t)
    final = (t + delta) >= 1.0 - FINAL_STEP_EPS
    t_safe = np.where(final, 0.0, t)

    iu, ju = np.triu_indices(N, k=1)
    u_nodes = rng.random((B, N))
    u_edges = rng.random((B, iu.size))

    p_nodes = np.asarray(node_probs, dtype=np.float64)
    step_nodes = transition_probs(p_nodes, x_t, t_safe[:, None], delta[:, None])
    step_nodes = np.where(final[:, None, None], p_nodes, step_nodes)
    x_s = sample_quantized(step_nodes, u_nodes)
    x_s = np.where(mask, x_s, 0)

    p_edges = np.asarray(edge_probs, dtype=np.float64)[:, iu, ju]
    step_edges = transition_probs(p_edges, e_t[:, iu, ju], t_safe[:, None], delta[:, None])
    step_edges = np.where(final[:, None, None], p_edges, step_edges)
    e_up = sample_quantized(step_edges, u_edges)
    e_up = np.where(mask[:, iu] & mask[:, ju], e_up, a)
    e_s = np.full((B, N, N), a, dtype=np.int64)
    e_s[:, iu, ju] = e_up
    e_s[:, ju, iu] = e_up
    return x_s.astype(np.int64), e_s


def discrete_step(x_t, e_t, posterior: Posterior, t: float, delta: float, rng):
    """Single-graph form of :func:`discrete_step_batch`."""
    x_t = np.asarray(x_t)
    n = x_t.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    K = posterior.edge_probs.shape[-1] if posterior.edge_probs.size else int(np.max(e_t)) + 1
    edge_full = np.zeros((n, n, K))
    edge_full[iu, ju] = posterior.edge_probs
    edge_full[ju, iu] = posterior.edge_probs
    x_s, e_s = discrete_step_batch(
        x_t[None], np.asarray(e_t)[None], np.asarray(posterior.node_probs)[None],
        edge_full[None], [t], [delta], np.ones((1, n), dtype=bool), rng,
    )
    return x_s[0], e_s[0]


def discrete_loss(node_logprobs: torch.Tensor, edge_logprobs: torch.Tensor,
                  x1: torch.Tensor, e1: torch.Tensor, mask: torch.Tensor,
                  edge_weight: float = 1.0):
    """Cross-entropy of the clean graph under the predicted posterior.

    Node terms are averaged per node and edge terms per upper-triangle edge
    within each graph, then averaged over the batch. Returns
    ``(loss, node_term, edge_term)``.
    """
    nll_x = -node_logprobs.gather(-1, x1.unsqueeze(-1)).squeeze(-1)
    nll_e = -edge_logprobs.gather(-1, e1.unsqueeze(-1)).squeeze(-1)
    m = mask.to(nll_x.dtype)
    pair = (m[:, :, None] * m[:, None, :]).triu(diagonal=1)
    if torch.isinf(nll_x[m > 0]).any() or torch.isinf(nll_e[pair > 0]).any():
        raise NonFinite("discrete_loss: -inf log-probability on a target state")
    nll_x = torch.where(m > 0, nll_x, torch.zeros_like(nll_x))
    nll_e = torch.where(pair > 0, nll_e, torch.zeros_like(nll_e))
    node_term = (nll_x * m).sum(-1) / m.sum(-1).clamp(min=1.0)
    n_pairs = pair.sum((-1, -2))
    edge_term = (nll_e * pair).sum((-1, -2)) / n_pairs.clamp(min=1.0)
    node_mean = node_term.mean()
    edge_mean = edge_term.mean()
    return node_mean + edge_weight * edge_mean, node_mean, edge_mean
