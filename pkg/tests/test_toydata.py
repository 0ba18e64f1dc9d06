import json

import numpy as np
import pytest

from equimf.errors import BadConfig, Unsatisfiable
from equimf.evalkit import ToyChemistry, is_connected, molecule_stability, tv_distance
from equimf.graph import validate
from equimf.toydata import (DatasetSpec, bonds_within_tolerance, generate_tiny_exact,
                            generate_toy_molecules, load_dataset, save_dataset)


def test_two_node_molecules_are_the_stable_pairs():
    graphs = generate_toy_molecules(DatasetSpec(size=60, n_min=2, n_max=2, seed=1))
    chem = ToyChemistry()
    seen = set()
    for g in graphs:
        assert g.x[0] == g.x[1] and g.e[0, 1] == g.x[0]
        d = np.linalg.norm(g.r[0] - g.r[1])
        assert abs(d - chem.ideal_length[g.e[0, 1]]) <= 0.05 * chem.ideal_length[g.e[0, 1]]
        seen.add(int(g.x[0]))
    # single, double and triple bonded pairs all occur
    assert seen == {0, 1, 2}


def test_two_node_restricted_chemistry_is_unique():
    graphs = generate_toy_molecules(DatasetSpec(size=20, n_min=2, n_max=2, b=1, a=1))
    assert all(g.discrete_key() == ((0, 0), (0,)) for g in graphs)
    assert all(abs(np.linalg.norm(g.r[0] - g.r[1]) - 1.0) < 0.05 for g in graphs)


def test_toy_molecules_are_stable_connected_relaxed():
    spec = DatasetSpec(size=300, n_min=2, n_max=6, seed=3)
    chem = spec.chemistry()
    for g in generate_toy_molecules(spec):
        validate(g, 3, 3)
        assert molecule_stability(g, chem) == 1
        assert is_connected(g, 3)
        assert bonds_within_tolerance(g.e, g.r, chem)
        assert np.abs(g.r.sum(0)).max() < 1e-9


def test_toy_molecules_deterministic():
    spec = DatasetSpec(size=30, seed=9)
    assert generate_toy_molecules(spec) == generate_toy_molecules(spec)


def test_single_node_unsatisfiable():
    with pytest.raises(Unsatisfiable) as info:
        generate_toy_molecules(DatasetSpec(size=3, n_min=1, n_max=1))
    assert info.value.n == 1


def test_tiny_exact_samples_and_concentration():
    spec = DatasetSpec("tiny-exact", size=100_000, n_min=2, n_max=2, b=2, a=1)
    graphs, space = generate_tiny_exact(spec)
    assert abs(space.probs.sum() - 1.0) < 1e-12
    support = set(space.support())
    assert all(g.discrete_key() in support for g in graphs[:1000])
    assert tv_distance(graphs, space) < 0.02


def test_tiny_exact_richer_space_concentration():
    spec = DatasetSpec("tiny-exact", size=3000, n_min=3, n_max=3, b=2, a=2, seed=4)
    graphs, space = generate_tiny_exact(spec)
    assert len(space.support()) > 1
    assert tv_distance(graphs, space) < 3 * np.sqrt(len(space) / spec.size)


def test_spec_validation():
    with pytest.raises(BadConfig, match="name"):
        DatasetSpec(name="qm9")
    with pytest.raises(BadConfig):
        DatasetSpec(n_min=4, n_max=2)
    with pytest.raises(BadConfig):
        DatasetSpec("tiny-exact", n_min=2, n_max=3)
    with pytest.raises(BadConfig):
        DatasetSpec("tiny-exact", n_min=6, n_max=6)


def test_persistence_round_trip(tmp_path):
    spec = DatasetSpec(size=10, n_min=2, n_max=4, seed=2)
    graphs = generate_toy_molecules(spec)
    save_dataset(graphs, spec, tmp_path / "d")
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["size"] == 10 and manifest["seed"] == 2
    back, spec2 = load_dataset(tmp_path / "d")
    assert back == graphs and spec2 == spec
