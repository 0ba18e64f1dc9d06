"""Toy-chemistry metrics, exact enumerable oracles and the equivariance probe suite."""
from __future__ import annotations

import copy
import itertools
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import networkx as nx
import numpy as np
import torch

from .backbone import DTYPE, EquiMF
from .errors import TooLarge, UnknownState, Unsatisfiable
from .graph import Graph, symmetric_from_upper, upper_pairs
from .sampler import initial_state, joint_step, make_grid, sample_from

MAX_EXACT_STATES = 10 ** 6
CANONICAL_EXACT_MAX_N = 8


# -- chemistry ----------------------------------------------------------------

@dataclass(frozen=True)
class ToyChemistry:
    """Valence per node type; bond order and ideal length per real edge type.

    The no-edge type (index ``a``) always has bond order 0.
    """

    valence: tuple = (1, 2, 3)
    bond_order: tuple = (1, 2, 3)
    ideal_length: tuple = (1.0, 0.9, 0.8)

    def __post_init__(self):
        object.__setattr__(self, "valence", tuple(int(v) for v in self.valence))
        object.__setattr__(self, "bond_order", tuple(int(v) for v in self.bond_order))
        object.__setattr__(self, "ideal_length", tuple(float(v) for v in self.ideal_length))
        if any(v < 0 for v in self.valence):
            raise ValueError("valences must be nonnegative")
        if any(o < 0 for o in self.bond_order):
            raise ValueError("bond orders must be nonnegative")
        if len(self.ideal_length) != len(self.bond_order):
            raise ValueError("one ideal length per bond type")
        if any(not (v > 0) for v in self.ideal_length):
            raise ValueError("ideal lengths must be positive")

    @property
    def b(self) -> int:
        return len(self.valence)

    @property
    def a(self) -> int:
        return len(self.bond_order)

    def restrict(self, b: int, a: int) -> "ToyChemistry":
        """The first ``b`` node types and first ``a`` bond types."""
        if not (1 <= b <= self.b and 1 <= a <= self.a):
            raise ValueError(f"cannot restrict a ({self.b}, {self.a}) table to ({b}, {a})")
        return ToyChemistry(self.valence[:b], self.bond_order[:a], self.ideal_length[:a])

    def orders(self) -> np.ndarray:
        """Bond order per edge index, no-edge included."""
        return np.array(self.bond_order + (0,), dtype=np.int64)

    def to_dict(self) -> dict:
        return {"valence": list(self.valence), "bond_order": list(self.bond_order),
                "ideal_length": list(self.ideal_length)}


def bond_sums(g: Graph, chem: ToyChemistry) -> np.ndarray:
    return chem.orders()[g.e].sum(axis=1)


def atom_stability(g: Graph, chem: ToyChemistry) -> float:
    """Fraction of nodes whose bond-order sum equals their valence."""
    need = np.array(chem.valence, dtype=np.int64)[g.x]
    return float(np.mean(bond_sums(g, chem) == need))


def molecule_stability(g: Graph, chem: ToyChemistry) -> int:
    return int(atom_stability(g, chem) == 1.0)


def bond_graph(g: Graph, a: int) -> nx.Graph:
    out = nx.Graph()
    out.add_nodes_from(range(g.n))
    i, j = np.nonzero(np.triu(g.e != a, k=1))
    out.add_edges_from(zip(i.tolist(), j.tolist()))
    return out


def is_connected(g: Graph, a: int) -> bool:
    return nx.is_connected(bond_graph(g, a))


def is_valid(g: Graph, chem: ToyChemistry) -> bool:
    """Connected and no node exceeds its valence."""
    need = np.array(chem.valence, dtype=np.int64)[g.x]
    return bool(np.all(bond_sums(g, chem) <= need)) and is_connected(g, chem.a)


@lru_cache(maxsize=None)
def _permutations(n: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n))), dtype=np.int64)


def canonical_form(g: Graph) -> tuple:
    """Permutation-invariant key of the discrete graph.

    Exact lexicographic minimum over node orderings for ``n <= 8``; a
    Weisfeiler-Lehman hash beyond that.
    """
    n = g.n
    if n <= CANONICAL_EXACT_MAX_N:
        perms = _permutations(n)
        xs = g.x[perms]
        i, j = upper_pairs(n)
        es = g.e[perms[:, i], perms[:, j]]
        rows = np.concatenate([xs, es], axis=1)
        best = rows[np.lexsort(rows.T[::-1])[0]]
        return ("exact", n) + tuple(int(v) for v in best)
    h = nx.Graph()
    for k in range(n):
        h.add_node(k, t=str(int(g.x[k])))
    i, j = upper_pairs(n)
    for p, q in zip(i, j):
        h.add_edge(int(p), int(q), t=str(int(g.e[p, q])))
    return ("wl", n, nx.weisfeiler_lehman_graph_hash(h, node_attr="t", edge_attr="t"))


def validity_uniqueness(samples: Sequence[Graph], chem: ToyChemistry) -> tuple[float, float]:
    """``(valid fraction, distinct valid graphs / all samples)``."""
    if not samples:
        raise ValueError("no samples")
    valid = [g for g in samples if is_valid(g, chem)]
    unique = {canonical_form(g) for g in valid}
    return len(valid) / len(samples), len(unique) / len(samples)


def bond_length_mae(graphs: Iterable[Graph], chem: ToyChemistry, stable_only: bool = True) -> float:
    """Mean ``|d_ij - ideal(e_ij)|`` over bonds; NaN when there are none."""
    ideal = np.array(chem.ideal_length)
    errs = []
    for g in graphs:
        if stable_only and not molecule_stability(g, chem):
            continue
        i, j = np.nonzero(np.triu(g.e != chem.a, k=1))
        if i.size:
            d = np.linalg.norm(g.r[i] - g.r[j], axis=-1)
            errs.append(np.abs(d - ideal[g.e[i, j]]))
    return float(np.concatenate(errs).mean()) if errs else float("nan")


def stability_summary(graphs: Sequence[Graph], chem: ToyChemistry) -> dict:
    atoms = [atom_stability(g, chem) for g in graphs]
    mols = [molecule_stability(g, chem) for g in graphs]
    valid, vu = validity_uniqueness(graphs, chem)
    return {
        "atom_stability_mean": float(np.mean(atoms)),
        "mol_stability_frac": float(np.mean(mols)),
        "valid": valid,
        "valid_and_unique": vu,
        "bond_length_mae": bond_length_mae(graphs, chem),
    }


# -- exact enumerable spaces ----------------------------------------------------

@dataclass(frozen=True, eq=False)
class ExactSpace:
    """Every discrete graph with ``n`` nodes over ``b`` / ``a + 1`` types, with target probabilities."""

    n: int
    b: int
    a: int
    states: tuple  # discrete keys, see Graph.discrete_key
    probs: np.ndarray

    def __post_init__(self):
        index = {s: k for k, s in enumerate(self.states)}
        object.__setattr__(self, "_index", index)

    def __len__(self):
        return len(self.states)

    def index_of(self, key) -> int:
        try:
            return self._index[key]
        except KeyError:
            raise UnknownState(f"state outside the enumerated space: {key}") from None

    def support(self) -> list:
        return [s for s, p in zip(self.states, self.probs) if p > 0]


def space_size(n: int, b: int, a: int) -> int:
    return b ** n * (a + 1) ** (n * (n - 1) // 2)


def graph_from_key(key, n: int, a: int, r=None) -> Graph:
    x, e_up = key
    e = symmetric_from_upper(np.array(e_up, dtype=np.int64), n, a)
    return Graph(x, e, np.zeros((n, 3)) if r is None else r)


def enumerate_exact(n: int, b: int, a: int,
                    target: Union[str, Callable[[Graph], float]] = "uniform_stable",
                    chem: Optional[ToyChemistry] = None) -> ExactSpace:
    """Enumerate all ``b^n (a+1)^(n(n-1)/2)`` discrete graphs with target weights.

    ``target`` is ``"uniform_stable"`` (uniform over molecule-stable graphs
    under ``chem``), ``"uniform"`` or a callable returning a nonnegative
    weight per graph.
    """
    size = space_size(n, b, a)
    if size > MAX_EXACT_STATES:
        raise TooLarge(f"{size} states exceed the {MAX_EXACT_STATES} bound")
    if chem is None:
        chem = ToyChemistry().restrict(b, a)
    if target == "uniform":
        weight = lambda g: 1.0  # noqa: E731
    elif target == "uniform_stable":
        weight = lambda g: float(molecule_stability(g, chem))  # noqa: E731
    elif callable(target):
        weight = target
    else:
        raise ValueError(f"unknown target rule {target!r}")
    states, w = [], []
    n_pairs = n * (n - 1) // 2
    for x in itertools.product(range(b), repeat=n):
        for e_up in itertools.product(range(a + 1), repeat=n_pairs):
            key = (tuple(x), tuple(e_up))
            states.append(key)
            w.append(weight(graph_from_key(key, n, a)))
    w = np.array(w, dtype=np.float64)
    if w.sum() <= 0:
        raise Unsatisfiable(n, f"target has no support with n={n}")
    return ExactSpace(n, b, a, tuple(states), w / w.sum())


def empirical_distribution(samples, space: ExactSpace) -> np.ndarray:
    """Normalized counts over ``space`` from graphs, discrete keys or a key->count map."""
    counts = np.zeros(len(space), dtype=np.float64)
    if isinstance(samples, Mapping):
        items = samples.items()
    else:
        items = ((s.discrete_key() if isinstance(s, Graph) else s, 1) for s in samples)
    for key, c in items:
        counts[space.index_of(key)] += c
    total = counts.sum()
    if total <= 0:
        raise ValueError("no samples")
    return counts / total


def tv(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p, dtype=np.float64) - np.asarray(q, dtype=np.float64)).sum())


def tv_distance(empirical, exact: ExactSpace) -> float:
    """Total variation between samples (graphs, keys or counts) and the oracle."""
    return tv(empirical_distribution(empirical, exact), exact.probs)


# -- rigid motions --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RigidTransform:
    """``r -> r Q^T + a`` with ``Q`` orthogonal (rotation or reflection)."""

    Q: np.ndarray
    a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    check: bool = True

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "a", np.asarray(self.a, dtype=np.float64).reshape(3))
        if self.check and not self.is_orthogonal():
            raise ValueError("Q is not orthogonal")

    def is_orthogonal(self, tol: float = 1e-10) -> bool:
        return bool(np.abs(self.Q.T @ self.Q - np.eye(3)).max() < tol)

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.Q))

    def apply(self, r):
        if isinstance(r, torch.Tensor):
            return r @ torch.as_tensor(self.Q, dtype=r.dtype).T + torch.as_tensor(self.a, dtype=r.dtype)
        return np.asarray(r, dtype=np.float64) @ self.Q.T + self.a

    def rotate(self, v):
        """Action on velocities and other difference vectors (no translation)."""
        if isinstance(v, torch.Tensor):
            return v @ torch.as_tensor(self.Q, dtype=v.dtype).T
        return np.asarray(v, dtype=np.float64) @ self.Q.T


def random_orthogonal(rng: np.random.Generator, reflection: Optional[bool] = None) -> np.ndarray:
    """Haar-random element of O(3); ``reflection`` forces the sign of the determinant."""
    q, rr = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(rr))
    if reflection is None:
        return q
    want = -1.0 if reflection else 1.0
    if np.sign(np.linalg.det(q)) != want:
        q[:, 0] = -q[:, 0]
    return q


def random_transform(rng: np.random.Generator, reflection: Optional[bool] = None,
                     translation_scale: float = 3.0) -> RigidTransform:
    return RigidTransform(random_orthogonal(rng, reflection),
                          translation_scale * rng.standard_normal(3))


def pairwise_distance_check(r, g) -> float:
    """Largest change of any pairwise squared distance under ``g``.

    ``g`` may be a :class:`RigidTransform` or a raw ``(Q, a)`` pair, which is
    how non-orthogonal maps are probed.
    """
    if not isinstance(g, RigidTransform):
        Q, a = g
        g = RigidTransform(Q, a, check=False)
    r = np.asarray(r, dtype=np.float64)
    moved = g.apply(r)
    d0 = ((r[:, None] - r[None]) ** 2).sum(-1)
    d1 = ((moved[:, None] - moved[None]) ** 2).sum(-1)
    i, j = upper_pairs(r.shape[0])
    if i.size == 0:
        return 0.0
    return float(np.abs(d1[i, j] - d0[i, j]).max())


# -- equivariance suite ---------------------------------------------------------

@dataclass
class EquivarianceReport:
    entries: list

    @property
    def passed(self) -> bool:
        return all(e["pass"] for e in self.entries)

    def by_prop(self, prop: str) -> dict:
        return next(e for e in self.entries if e["prop"] == prop)

    def to_json(self) -> str:
        return json.dumps(self.entries, indent=2)


def _entry(prop, defect, tol, probes, **extra):
    out = {"prop": prop, "max_defect": float(defect), "tolerance": float(tol),
           "pass": bool(defect < tol), "probes": int(probes)}
    for k, v in extra.items():
        out[k] = v
        if isinstance(v, bool) and not v:
            out["pass"] = False
    return out


def random_probe_graph(n: int, b: int, a: int, rng: np.random.Generator):
    x, e, r, mask = initial_state([n], b, a, rng)
    return x, e, torch.as_tensor(r), mask


def equivariance_suite(model: EquiMF, tolerance: float = 1e-4, n_probes: int = 50,
                       rng: Optional[np.random.Generator] = None,
                       posterior_tolerance: Optional[float] = None,
                       n_range: tuple = (2, 6), trajectory_steps: int = 10,
                       distortion: str = "polydec") -> EquivarianceReport:
    """Probe the model with random rigid motions, reflections included.

    A.1 checks that the discrete inputs are untouched by the motion, A.2 the
    velocity defect, A.3 the posterior defect and A.4 one coupled step plus
    a full sampling trajectory, requiring identical discrete outputs.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    post_tol = tolerance if posterior_tolerance is None else posterior_tolerance
    b, a = model.config.b, model.config.a
    grid = make_grid(trajectory_steps, distortion)
    d1 = d2 = d3 = d4_step = d4_traj = 0.0
    same_step = same_traj = True
    for k in range(n_probes):
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        g = random_transform(rng, reflection=bool(k % 2))
        x, e, r, mask = random_probe_graph(n, b, a, rng)
        # A.1: the motion acts on coordinates only
        moved = Graph(x[0], e[0], g.apply(r[0].numpy()))
        d1 = max(d1, float(np.abs(moved.x - x[0]).max() + np.abs(moved.e - e[0]).max()))

        t = rng.uniform(0.0, 0.95)
        delta = rng.uniform(0.0, 1.0 - t)
        mask_t = torch.as_tensor(mask)
        xoh = torch.nn.functional.one_hot(torch.as_tensor(x), b).to(DTYPE)
        eoh = torch.nn.functional.one_hot(torch.as_tensor(e), a + 1).to(DTYPE)
        tt, dd = torch.tensor([t], dtype=DTYPE), torch.tensor([delta], dtype=DTYPE)
        r_g = g.apply(r)
        with torch.no_grad():
            nl0, el0, v0 = model(xoh, eoh, r, mask_t, tt, dd)
            nl1, el1, v1 = model(xoh, eoh, r_g, mask_t, tt, dd)
        d2 = max(d2, float((v1 - g.rotate(v0)).abs().max()))
        d3 = max(d3, float((nl1.exp() - nl0.exp()).abs().max()),
                 float((el1.exp() - el0.exp()).abs().max()))

        seed = int(rng.integers(2 ** 63))
        xs0, es0, rs0 = joint_step(model, x, e, r, mask, [t], [delta], np.random.default_rng(seed))
        xs1, es1, rs1 = joint_step(model, x, e, r_g, mask, [t], [delta], np.random.default_rng(seed))
        d4_step = max(d4_step, float((rs1 - g.apply(rs0)).abs().max()))
        same_step &= bool(np.array_equal(xs0, xs1) and np.array_equal(es0, es1))

        f0, _ = sample_from(model, x, e, r, mask, grid, np.random.default_rng(seed))
        f1, _ = sample_from(model, x, e, r_g, mask, grid, np.random.default_rng(seed))
        d4_traj = max(d4_traj, float(np.abs(f1[0].r - g.apply(f0[0].r)).max()))
        same_traj &= bool(np.array_equal(f0[0].x, f1[0].x) and np.array_equal(f0[0].e, f1[0].e))

    return EquivarianceReport([
        _entry("A.1", d1, tolerance, n_probes),
        _entry("A.2", d2, tolerance, n_probes),
        _entry("A.3", d3, post_tol, n_probes),
        _entry("A.4", max(d4_step, d4_traj), tolerance, n_probes,
               step_defect=d4_step, trajectory_defect=d4_traj,
               discrete_identical=bool(same_step and same_traj)),
    ])


# -- deliberately broken model for the mutation test ----------------------------

def break_equivariance(model: EquiMF, seed: int = 0, scale: float = 1.0) -> EquiMF:
    """Return a copy whose node embeddings see absolute coordinates, with nonzero heads.

    Used to show the suite detects a symmetry violation.
    """
    broken = copy.deepcopy(model)
    gen = torch.Generator().manual_seed(seed)
    for enc in broken.encoders.values():
        dim = enc.node_in.out_features
        proj = scale * torch.randn(3, dim, generator=gen, dtype=DTYPE)

        def embed(xoh, r, tau, _enc=enc, _proj=proj):
            return _enc.node_in(xoh) + tau[:, None, :] + r @ _proj

        enc.embed_nodes = embed
    randomize_heads(broken, seed)
    return broken


def randomize_heads(model: EquiMF, seed: int = 0, scale: float = 0.5) -> EquiMF:
    """Overwrite the zero-initialized output layers with random weights in place."""
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for sub in model.modules():
            if getattr(sub, "final_zero", False):
                last = [m for m in sub if isinstance(m, torch.nn.Linear)][-1]
                last.weight.copy_(scale * torch.randn(last.weight.shape, generator=gen, dtype=DTYPE)
                                  / math.sqrt(last.in_features))
                last.bias.copy_(scale * torch.randn(last.bias.shape, generator=gen, dtype=DTYPE))
    return model
