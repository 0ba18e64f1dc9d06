import numpy as np
import pytest
import torch

from equimf.backbone import DTYPE, EquiMF, ModelConfig
from equimf.graph import Batch, Graph, symmetric_from_upper, upper_pairs, zero_center


def random_graph(n, b, a, rng, edge_p=0.5):
    x = rng.integers(0, b, size=n)
    i, _ = upper_pairs(n)
    e_up = np.where(rng.random(i.size) < edge_p, rng.integers(0, a, size=i.size), a)
    return Graph(x, symmetric_from_upper(e_up, n, a), zero_center(rng.standard_normal((n, 3))))


def model_inputs(graphs, b, a, t=0.3, delta=0.2):
    batch = Batch.from_graphs(graphs, b, a)
    xoh, eoh = batch.one_hot()
    bs = len(graphs)
    tt = torch.full((bs,), t, dtype=DTYPE)
    dd = torch.full((bs,), delta, dtype=DTYPE)
    return xoh, eoh, batch.r.clone(), batch.mask, tt, dd


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    from equimf.evalkit import randomize_heads
    return randomize_heads(EquiMF(ModelConfig(3, 2, hidden_dim=16, layers=2, seed=3)), seed=3)


def pytest_configure(config):
    config.equimf_acceptance = []


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "equimf_acceptance", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
