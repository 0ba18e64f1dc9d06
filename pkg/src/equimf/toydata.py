"""Synthetic datasets: stable toy molecules with relaxed geometry, and tiny enumerable spaces."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import BadConfig, TooLarge, Unsatisfiable
from .evalkit import (ExactSpace, ToyChemistry, enumerate_exact, graph_from_key, is_connected,
                      molecule_stability, space_size, MAX_EXACT_STATES)
from .graph import Graph, load_jsonl, save_jsonl, validate, zero_center

DATASET_NAMES = ("toy-mol", "tiny-exact")
RELAX_STEPS = 200
BOND_TOLERANCE = 0.05
MAX_ATTEMPTS = 20_000


@dataclass(frozen=True)
class DatasetSpec:
    name: str = "toy-mol"
    size: int = 1000
    n_min: int = 2
    n_max: int = 5
    b: int = 3
    a: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.name not in DATASET_NAMES:
            raise BadConfig(f"expected one of {DATASET_NAMES}", key="name")
        if self.size < 1:
            raise BadConfig("must be a positive integer", key="size")
        if not 1 <= self.n_min <= self.n_max:
            raise BadConfig("need 1 <= n_min <= n_max", key="n_min")
        try:
            self.chemistry()
        except ValueError as exc:
            raise BadConfig(str(exc), key="b") from exc
        if self.name == "tiny-exact":
            if self.n_min != self.n_max:
                raise BadConfig("tiny-exact needs a single node count", key="n_max")
            if space_size(self.n_min, self.b, self.a) > MAX_EXACT_STATES:
                raise BadConfig("state space is not enumerable", key="n_max")

    def chemistry(self) -> ToyChemistry:
        return ToyChemistry().restrict(self.b, self.a)

    def to_dict(self) -> dict:
        return asdict(self)


# -- geometry -----------------------------------------------------------------

def _relax(p: np.ndarray, e: np.ndarray, chem: ToyChemistry, steps: int, dt: float,
           stiffness: float, damping: float) -> np.ndarray:
    """Spring dynamics on ``p`` of shape ``[..., n, 3]`` with edges ``e`` of shape ``[..., n, n]``."""
    n = e.shape[-1]
    ideal = np.array(chem.ideal_length + (0.0,))[e]
    off = ~np.eye(n, dtype=bool)
    bonded = (e != chem.a) & off
    free = ~bonded & off
    v = np.zeros_like(p)
    for _ in range(steps):
        diff = p[..., :, None, :] - p[..., None, :, :]
        d = np.maximum(np.linalg.norm(diff, axis=-1), 1e-6)
        unit = diff / d[..., None]
        mag = np.where(bonded, -stiffness * (d - ideal), 0.0) + np.where(free, 1.0 / d ** 2, 0.0)
        force = (mag[..., None] * unit).sum(-2)
        v = (1.0 - damping * dt) * v + dt * force
        p = p + dt * v
    return p - p.mean(-2, keepdims=True)


def relax_coordinates(e: np.ndarray, chem: ToyChemistry, rng: np.random.Generator,
                      steps: int = RELAX_STEPS, dt: float = 0.05, stiffness: float = 40.0,
                      damping: float = 4.0) -> np.ndarray:
    """Damped spring dynamics toward ideal bond lengths with ``1/d^2`` repulsion between non-bonded pairs."""
    p = rng.standard_normal((e.shape[0], 3))
    return zero_center(_relax(p, e, chem, steps, dt, stiffness, damping))


def bonds_within_tolerance(e: np.ndarray, r: np.ndarray, chem: ToyChemistry,
                           tol: float = BOND_TOLERANCE) -> bool:
    i, j = np.nonzero(np.triu(e != chem.a, k=1))
    if i.size == 0:
        return True
    d = np.linalg.norm(r[i] - r[j], axis=-1)
    ideal = np.array(chem.ideal_length)[e[i, j]]
    return bool(np.all(np.abs(d - ideal) <= tol * ideal))


def embed(x, e, chem: ToyChemistry, rng: np.random.Generator, tries: int = 50) -> Optional[Graph]:
    """Attach relaxed coordinates, retrying from fresh starts; ``None`` if none converge."""
    for _ in range(tries):
        r = relax_coordinates(e, chem, rng)
        if np.all(np.isfinite(r)) and bonds_within_tolerance(e, r, chem):
            return Graph(x, e, r)
    return None


# -- molecules ----------------------------------------------------------------

def _stub_match(x: np.ndarray, chem: ToyChemistry, rng: np.random.Generator) -> Optional[np.ndarray]:
    """Pair valence stubs at random; ``None`` on a self-pair or an unsupported bond order."""
    n = x.size
    stubs = np.repeat(np.arange(n), np.array(chem.valence)[x])
    if stubs.size % 2:
        return None
    rng.shuffle(stubs)
    order = np.zeros((n, n), dtype=np.int64)
    for u, w in stubs.reshape(-1, 2):
        if u == w:
            return None
        order[u, w] += 1
        order[w, u] += 1
    lookup = {o: k for k, o in enumerate(chem.bond_order)}
    e = np.full((n, n), chem.a, dtype=np.int64)
    for (u, w), o in np.ndenumerate(order):
        if o:
            if o not in lookup:
                return None
            e[u, w] = lookup[o]
    return e


def random_stable_molecule(n: int, chem: ToyChemistry, rng: np.random.Generator,
                           max_attempts: int = MAX_ATTEMPTS) -> Graph:
    for _ in range(max_attempts):
        x = rng.integers(0, chem.b, size=n)
        e = _stub_match(x, chem, rng)
        if e is None:
            continue
        g = Graph(x, e, np.zeros((n, 3)))
        if not (molecule_stability(g, chem) and is_connected(g, chem.a)):
            continue
        out = embed(x, e, chem, rng)
        if out is not None:
            return validate(out, chem.b, chem.a)
    raise Unsatisfiable(n)


def generate_toy_molecules(spec: DatasetSpec, rng: Optional[np.random.Generator] = None) -> list[Graph]:
    """Connected, valence-saturated molecules with bonds within 5% of their ideal length.

    Node counts are uniform over ``[n_min, n_max]``; graph ``k`` uses its own
    stream ``(seed, k)`` unless ``rng`` is given.
    """
    chem = spec.chemistry()
    sizes_rng = np.random.default_rng([spec.seed, 2 ** 32]) if rng is None else rng
    sizes = sizes_rng.integers(spec.n_min, spec.n_max + 1, size=spec.size)
    out = []
    for k, n in enumerate(sizes):
        g_rng = rng if rng is not None else np.random.default_rng([spec.seed, k])
        if n == 1:
            # only a valence-0 type can be stable on its own
            zero = [t for t, v in enumerate(chem.valence) if v == 0]
            if not zero:
                raise Unsatisfiable(1)
            out.append(Graph([zero[int(g_rng.integers(len(zero)))]], [[chem.a]], np.zeros((1, 3))))
            continue
        out.append(random_stable_molecule(int(n), chem, g_rng))
    return out


# -- tiny exact ---------------------------------------------------------------

def exact_space(spec: DatasetSpec) -> ExactSpace:
    if space_size(spec.n_min, spec.b, spec.a) > MAX_EXACT_STATES:
        raise TooLarge("state space is not enumerable")
    return enumerate_exact(spec.n_min, spec.b, spec.a, "uniform_stable", spec.chemistry())


def generate_tiny_exact(spec: DatasetSpec, chunk: int = 4096) -> tuple[list[Graph], ExactSpace]:
    """I.i.d. draws from the uniform-over-stable oracle, coordinates attached by relaxation.

    Graph ``k`` starts its relaxation from stream ``[seed, 1, k]``; the first
    attempt runs batched, retries (rare) continue on the same stream.
    """
    space = exact_space(spec)
    chem = spec.chemistry()
    n = spec.n_min
    rng = np.random.default_rng([spec.seed, 0])
    picks = rng.choice(len(space), size=spec.size, p=space.probs)
    bases = {int(i): graph_from_key(space.states[i], n, spec.a) for i in np.unique(picks)}
    out = []
    for lo in range(0, spec.size, chunk):
        ks = range(lo, min(lo + chunk, spec.size))
        rngs = [np.random.default_rng([spec.seed, 1, k]) for k in ks]
        e = np.stack([bases[int(picks[k])].e for k in ks])
        p0 = np.stack([g.standard_normal((n, 3)) for g in rngs])
        relaxed = _relax(p0, e, chem, RELAX_STEPS, 0.05, 40.0, 4.0)
        for k, g_rng, r in zip(ks, rngs, relaxed):
            base = bases[int(picks[k])]
            if np.all(np.isfinite(r)) and bonds_within_tolerance(base.e, r, chem):
                g = Graph(base.x, base.e, r)
            else:
                g = embed(base.x, base.e, chem, g_rng)
                if g is None:
                    raise Unsatisfiable(n, f"could not relax state {space.states[picks[k]]}")
            out.append(validate(g, spec.b, spec.a))
    return out, space


def generate(spec: DatasetSpec) -> list[Graph]:
    if spec.name == "tiny-exact":
        return generate_tiny_exact(spec)[0]
    return generate_toy_molecules(spec)


# -- persistence ----------------------------------------------------------------

def save_dataset(graphs, spec: DatasetSpec, directory) -> Path:
    """Write ``dataset.jsonl`` plus ``manifest.json`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_jsonl(graphs, directory / "dataset.jsonl")
    manifest = {"spec": spec.to_dict(), "size": len(graphs), "seed": spec.seed}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return directory


def load_dataset(directory) -> tuple[list[Graph], DatasetSpec]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    spec = DatasetSpec(**manifest["spec"])
    graphs = load_jsonl(directory / "dataset.jsonl")
    for g in graphs:
        validate(g, spec.b, spec.a)
    return graphs, spec
