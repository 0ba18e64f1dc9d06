"""Attributed geometric graphs: data model, validation, encodings, batching, I/O.

Edge type index ``a`` (the last one) always means "no edge".
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import InvalidGraph


def _frozen(arr, dtype):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Graph:
    """A graph ``G = (X, E, R)`` with ``n`` nodes.

    ``x`` holds node-type indices, ``e`` the symmetric edge-type matrix and
    ``r`` the ``n x 3`` coordinates. Arrays are copied and made read-only.
    """

    x: np.ndarray
    e: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", _frozen(self.x, np.int64).reshape(-1))
        n = self.x.shape[0]
        object.__setattr__(self, "e", _frozen(self.e, np.int64).reshape(n, n))
        object.__setattr__(self, "r", _frozen(self.r, np.float64).reshape(n, 3))

    @property
    def n(self) -> int:
        return int(self.x.shape[0])

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            np.array_equal(self.x, other.x)
            and np.array_equal(self.e, other.e)
            and np.array_equal(self.r, other.r)
        )

    def __hash__(self):
        return hash((self.x.tobytes(), self.e.tobytes(), self.r.tobytes()))

    def replace(self, x=None, e=None, r=None) -> "Graph":
        return Graph(
            self.x if x is None else x,
            self.e if e is None else e,
            self.r if r is None else r,
        )

    def discrete_key(self) -> tuple:
        """Hashable key of the discrete part (node types + upper-triangle edges)."""
        iu = np.triu_indices(self.n, k=1)
        return (tuple(int(v) for v in self.x), tuple(int(v) for v in self.e[iu]))


def validate(g: Graph, b: int, a: int) -> Graph:
    """Return ``g`` unchanged if it is a legal graph over ``b`` node and ``a+1`` edge types."""
    n = g.n
    if n < 1:
        raise InvalidGraph("empty graph")
    if g.e.shape != (n, n) or g.r.shape != (n, 3):
        raise InvalidGraph("shape mismatch")
    if np.any(g.x < 0) or np.any(g.x >= b):
        raise InvalidGraph("node type out of range")
    if np.any(g.e < 0) or np.any(g.e > a):
        raise InvalidGraph("edge type out of range")
    if not np.array_equal(g.e, g.e.T):
        raise InvalidGraph("asymmetric")
    if np.any(np.diag(g.e) != a):
        raise InvalidGraph("self-edge")
    if not np.all(np.isfinite(g.r)):
        raise InvalidGraph("non-finite coordinate")
    return g


def zero_center(r, mask=None):
    """Subtract the (masked) centroid. Works on numpy arrays and torch tensors.

    With a mask of shape ``[..., n]`` padded rows are left at zero.
    """
    if isinstance(r, torch.Tensor):
        if mask is None:
            return r - r.mean(dim=-2, keepdim=True)
        m = mask.to(r.dtype).unsqueeze(-1)
        count = m.sum(dim=-2, keepdim=True).clamp(min=1.0)
        mean = (r * m).sum(dim=-2, keepdim=True) / count
        return (r - mean) * m
    r = np.asarray(r, dtype=np.float64)
    if mask is None:
        return r - r.mean(axis=-2, keepdims=True)
    m = np.asarray(mask, dtype=np.float64)[..., None]
    count = np.maximum(m.sum(axis=-2, keepdims=True), 1.0)
    return (r - (r * m).sum(axis=-2, keepdims=True) / count) * m


def upper_pairs(n: int):
    """Index arrays ``(i, j)`` of the strict upper triangle, row-major."""
    return np.triu_indices(n, k=1)


def symmetric_from_upper(values, n: int, diag: int) -> np.ndarray:
    out = np.full((n, n), diag, dtype=np.int64)
    i, j = upper_pairs(n)
    out[i, j] = values
    out[j, i] = values
    return out


@dataclass(frozen=True, eq=False)
class OneHotGraph:
    xoh: np.ndarray  # n x b
    eoh: np.ndarray  # n x n x (a+1)
    r: np.ndarray


def encode_one_hot(g: Graph, b: int, a: int) -> OneHotGraph:
    xoh = np.eye(b, dtype=np.float64)[g.x]
    eoh = np.eye(a + 1, dtype=np.float64)[g.e]
    return OneHotGraph(xoh, eoh, np.array(g.r))


def decode_one_hot(oh: OneHotGraph) -> Graph:
    return Graph(oh.xoh.argmax(-1), oh.eoh.argmax(-1), oh.r)


@dataclass(frozen=True, eq=False)
class Batch:
    """Graphs padded to a common node count.

    Padding uses node type 0, the no-edge type and zero coordinates; ``mask``
    marks the real nodes.
    """

    x: torch.Tensor  # [B, N] long
    e: torch.Tensor  # [B, N, N] long
    r: torch.Tensor  # [B, N, 3] float64
    mask: torch.Tensor  # [B, N] bool
    b: int
    a: int

    @classmethod
    def from_graphs(cls, graphs: Sequence[Graph], b: int, a: int) -> "Batch":
        big = max(g.n for g in graphs)
        bs = len(graphs)
        x = np.zeros((bs, big), dtype=np.int64)
        e = np.full((bs, big, big), a, dtype=np.int64)
        r = np.zeros((bs, big, 3), dtype=np.float64)
        mask = np.zeros((bs, big), dtype=bool)
        for k, g in enumerate(graphs):
            x[k, : g.n] = g.x
            e[k, : g.n, : g.n] = g.e
            r[k, : g.n] = g.r
            mask[k, : g.n] = True
        return cls(
            torch.from_numpy(x), torch.from_numpy(e), torch.from_numpy(r),
            torch.from_numpy(mask), b, a,
        )

    def __len__(self):
        return int(self.x.shape[0])

    @property
    def sizes(self) -> torch.Tensor:
        return self.mask.sum(-1)

    def one_hot(self):
        xoh = torch.nn.functional.one_hot(self.x, self.b).to(torch.float64)
        eoh = torch.nn.functional.one_hot(self.e, self.a + 1).to(torch.float64)
        return xoh, eoh

    def to_graphs(self) -> list[Graph]:
        out = []
        for k in range(len(self)):
            n = int(self.mask[k].sum())
            out.append(Graph(
                self.x[k, :n].numpy(), self.e[k, :n, :n].numpy(), self.r[k, :n].detach().numpy()
            ))
        return out


# -- JSON lines ---------------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def graph_to_json(g: Graph) -> str:
    r = "[" + ",".join("[" + ",".join(_fmt(c) for c in row) + "]" for row in g.r) + "]"
    return (
        '{"n": %d, "x": %s, "e": %s, "r": %s}'
        % (g.n, json.dumps(g.x.tolist()), json.dumps(g.e.tolist()), r)
    )


def graph_from_json(line: str) -> Graph:
    obj = json.loads(line)
    n = int(obj["n"])
    g = Graph(obj["x"], obj["e"], obj["r"])
    if g.n != n:
        raise InvalidGraph(f"declared n={n} but x has {g.n} entries")
    return g


def save_jsonl(graphs: Iterable[Graph], path) -> None:
    with open(path, "w") as fh:
        for g in graphs:
            fh.write(graph_to_json(g) + "\n")


def load_jsonl(path) -> list[Graph]:
    text = Path(path).read_text()
    return [graph_from_json(line) for line in text.splitlines() if line.strip()]
