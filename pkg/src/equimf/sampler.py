"""Few-step joint generation on a (possibly distorted) time grid."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .backbone import DTYPE, EquiMF, check_finite
from .discrete import discrete_step_batch
from .errors import BadConfig, NonFinite
from .graph import Graph, upper_pairs, zero_center
from .meanflow import coord_update

DISTORTIONS = ("identity", "polydec")
CHUNK = 256  # graphs per rng stream; fixed so results never depend on batching


def distort_time(t, distortion: str = "polydec"):
    """``2t - t^2`` for ``polydec``; front-loads progress near ``t = 0``."""
    if distortion == "identity":
        return t
    if distortion == "polydec":
        return 2.0 * t - t * t
    raise BadConfig(f"expected one of {DISTORTIONS}", key="distortion_function")


def make_grid(steps: int, distortion: str = "polydec") -> list[tuple[float, float]]:
    """``(t_k, delta_k)`` for ``k < steps`` with ``t_k = f(k / steps)``.

    The last knot is pinned to exactly 1 so the walk never over- or
    undershoots.
    """
    if int(steps) != steps or steps < 1:
        raise BadConfig("must be a positive integer", key="nfe")
    knots = [float(distort_time(k / steps, distortion)) for k in range(steps)] + [1.0]
    return [(knots[k], knots[k + 1] - knots[k]) for k in range(steps)]


@dataclass(frozen=True)
class SampleConfig:
    steps: int = 50
    distortion: str = "polydec"
    n: Optional[int] = None  # fixed node count; otherwise drawn from a histogram
    n_samples: int = 1
    seed: int = 0
    record: bool = False

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise BadConfig("must be a positive integer", key="nfe")
        if self.distortion not in DISTORTIONS:
            raise BadConfig(f"expected one of {DISTORTIONS}", key="distortion_function")
        if self.n is not None and self.n < 1:
            raise BadConfig("must be a positive integer", key="n")
        if self.n_samples < 1:
            raise BadConfig("must be a positive integer", key="n_samples")


@dataclass
class Trajectory:
    """Snapshots ``(t, Graph)`` from ``t = 0`` to ``t = 1``."""

    snapshots: list = field(default_factory=list)

    @property
    def times(self) -> list[float]:
        return [t for t, _ in self.snapshots]


def _unpad(x, e, r, mask) -> list[Graph]:
    out = []
    for k in range(x.shape[0]):
        n = int(mask[k].sum())
        out.append(Graph(x[k, :n], e[k, :n, :n], r[k, :n]))
    return out


def joint_step(model: EquiMF, x, e, r, mask, t, delta, rng: np.random.Generator):
    """One coupled step over ``[t, t + delta]`` for a padded batch.

    ``x``, ``e`` are integer arrays, ``r`` a float64 tensor, ``t`` and
    ``delta`` per-graph arrays. The same ``delta`` drives the network, the
    coordinate transport and the discrete Euler step.
    """
    b, a = model.config.b, model.config.a
    mask_t = torch.as_tensor(mask)
    xoh = torch.nn.functional.one_hot(torch.as_tensor(x), b).to(DTYPE)
    eoh = torch.nn.functional.one_hot(torch.as_tensor(e), a + 1).to(DTYPE)
    tt = torch.as_tensor(np.asarray(t, dtype=np.float64))
    dd = torch.as_tensor(np.asarray(delta, dtype=np.float64))
    with torch.no_grad():
        node_logp, edge_logp, vel = model(xoh, eoh, r, mask_t, tt, dd)
    check_finite(node_logp, edge_logp, vel, where="sampler")
    r_s = coord_update(r, vel, dd)
    x_s, e_s = discrete_step_batch(x, e, node_logp.exp().numpy(), edge_logp.exp().numpy(),
                                   tt.numpy(), dd.numpy(), mask, rng)
    return x_s, e_s, r_s


def sample_from(model: EquiMF, x0, e0, r0, mask, grid: Sequence[tuple[float, float]],
                rng: np.random.Generator, record: bool = False):
    """Integrate from a given initial state; returns ``(graphs, trajectories)``."""
    x, e = np.asarray(x0, dtype=np.int64), np.asarray(e0, dtype=np.int64)
    r = torch.as_tensor(np.asarray(r0, dtype=np.float64))
    mask = np.asarray(mask, dtype=bool)
    bs = x.shape[0]
    trajs = [Trajectory() for _ in range(bs)] if record else None
    if record:
        for k, g in enumerate(_unpad(x, e, r.numpy(), mask)):
            trajs[k].snapshots.append((0.0, g))
    for k, (t, delta) in enumerate(grid):
        try:
            x, e, r = joint_step(model, x, e, r, mask, np.full(bs, t), np.full(bs, delta), rng)
        except NonFinite as exc:
            raise NonFinite(f"sampler: non-finite output at step {k}") from exc
        if record:
            s = 1.0 if k == len(grid) - 1 else t + delta
            for j, g in enumerate(_unpad(x, e, r.numpy(), mask)):
                trajs[j].snapshots.append((s, g))
    return _unpad(x, e, r.numpy(), mask), trajs


def initial_state(sizes: Sequence[int], b: int, a: int, rng: np.random.Generator):
    """Uniform discrete noise and centered Gaussian coordinates, padded."""
    sizes = [int(n) for n in sizes]
    bs, big = len(sizes), max(sizes)
    mask = np.zeros((bs, big), dtype=bool)
    for k, n in enumerate(sizes):
        mask[k, :n] = True
    x = rng.integers(0, b, size=(bs, big))
    i, j = upper_pairs(big)
    e_up = rng.integers(0, a + 1, size=(bs, i.size))
    r = rng.standard_normal((bs, big, 3))
    x = np.where(mask, x, 0)
    e_up = np.where(mask[:, i] & mask[:, j], e_up, a)
    e = np.full((bs, big, big), a, dtype=np.int64)
    e[:, i, j] = e_up
    e[:, j, i] = e_up
    return x.astype(np.int64), e, zero_center(r, mask), mask


def draw_sizes(n_total: int, cfg: SampleConfig, node_counts: Optional[dict],
               rng: np.random.Generator) -> np.ndarray:
    if cfg.n is not None:
        return np.full(n_total, cfg.n, dtype=np.int64)
    if not node_counts:
        raise BadConfig("needs either n or a node-count histogram", key="n")
    keys = np.array(sorted(node_counts), dtype=np.int64)
    w = np.array([node_counts[k] for k in keys], dtype=np.float64)
    return rng.choice(keys, size=n_total, p=w / w.sum())


def sample(model: EquiMF, cfg: SampleConfig, node_counts: Optional[dict] = None):
    """Generate ``cfg.n_samples`` graphs; returns ``(graphs, trajectories or None)``.

    Samples are produced in fixed-size chunks, chunk ``c`` drawing from the
    stream ``(seed, c)``, so outputs depend only on the seed and config.
    """
    grid = make_grid(cfg.steps, cfg.distortion)
    graphs, trajs = [], [] if cfg.record else None
    n_chunks = -(-cfg.n_samples // CHUNK)
    for c in range(n_chunks):
        rng = np.random.default_rng([cfg.seed, c])
        count = min(CHUNK, cfg.n_samples - c * CHUNK)
        sizes = draw_sizes(count, cfg, node_counts, rng)
        x0, e0, r0, mask = initial_state(sizes, model.config.b, model.config.a, rng)
        out, tr = sample_from(model, x0, e0, r0, mask, grid, rng, cfg.record)
        graphs.extend(out)
        if cfg.record:
            trajs.extend(tr)
    return graphs, trajs
