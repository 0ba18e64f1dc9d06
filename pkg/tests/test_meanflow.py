import numpy as np
import pytest
import torch

from equimf.backbone import DTYPE
from equimf.diffkernel import Tangent, fd_directional, grad
from equimf.errors import BadConfig
from equimf.graph import zero_center
from equimf.meanflow import LossConfig, continuous_loss, coord_update, meanflow_target
from equimf.trainer import velocity_head

from conftest import model_inputs, random_graph


def _u(n=3, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return zero_center(torch.randn(1, n, 3, generator=gen, dtype=DTYPE))


def test_target_at_zero_delta_is_conditional_velocity(small_model, rng):
    g = random_graph(4, 3, 2, rng)
    xoh, eoh, r, mask, t, _ = model_inputs([g], 3, 2)
    head = velocity_head(small_model, dict(small_model.named_parameters()), xoh, eoh, mask)
    u = zero_center(torch.randn_like(r))
    target = meanflow_target(head, r, t, torch.zeros(1, dtype=DTYPE), u, mask)
    assert torch.equal(target, u)


def test_target_constant_head():
    u = _u()
    c = zero_center(torch.ones(1, 3, 3, dtype=DTYPE).cumsum(1))
    head = lambda r, t, d: c + 0.0 * r  # noqa: E731
    r = torch.zeros_like(u)
    for d in (0.1, 0.7):
        target = meanflow_target(head, r, torch.tensor([0.2], dtype=DTYPE),
                                 torch.tensor([d], dtype=DTYPE), u)
        assert torch.allclose(target, u, atol=0)


@pytest.mark.parametrize("mode, slope", [("fixed_s", 1.0), ("fixed_delta", 1.0)])
def test_target_linear_in_t(mode, slope):
    c = zero_center(torch.tensor([[[1.0, 0, 0], [-2, 1, 0], [1, -1, 0]]], dtype=DTYPE))
    head = lambda r, t, d: c * t[:, None, None]  # noqa: E731
    u = _u(seed=3)
    r = torch.zeros_like(u)
    t = torch.tensor([0.4], dtype=DTYPE)
    d = torch.tensor([0.3], dtype=DTYPE)
    target = meanflow_target(head, r, t, d, u, target_derivative=mode)
    fd = fd_directional(head, (r, t, d), Tangent(u, 1.0, -1.0 if mode == "fixed_s" else 0.0), h=1e-5)
    assert torch.allclose(target, u + 0.3 * slope * c, atol=1e-12)
    assert (target - (u + 0.3 * fd)).abs().max() < 1e-6


def test_fixed_s_and_fixed_delta_differ_when_head_reads_delta():
    c = zero_center(torch.tensor([[[1.0, 0, 0], [-1, 0, 0]]], dtype=DTYPE))
    head = lambda r, t, d: c * d[:, None, None]  # noqa: E731
    u = torch.zeros_like(c)
    t, d = torch.tensor([0.1], dtype=DTYPE), torch.tensor([0.5], dtype=DTYPE)
    a = meanflow_target(head, u, t, d, u, target_derivative="fixed_s")
    b = meanflow_target(head, u, t, d, u, target_derivative="fixed_delta")
    assert torch.allclose(a, -0.5 * c) and torch.count_nonzero(b) == 0


def test_target_is_detached(small_model, rng):
    g = random_graph(3, 3, 2, rng)
    xoh, eoh, r, mask, t, d = model_inputs([g], 3, 2)
    params = {k: v.detach().requires_grad_(True) for k, v in small_model.named_parameters()}
    head = velocity_head(small_model, params, xoh, eoh, mask)
    target = meanflow_target(head, r, t, d, zero_center(torch.randn_like(r)), mask)
    assert not target.requires_grad
    assert target.sum(1).abs().max() < 1e-12


def test_target_rejects_unknown_derivative():
    with pytest.raises(BadConfig):
        meanflow_target(lambda r, t, d: r, _u(), torch.zeros(1), torch.zeros(1), _u(),
                        target_derivative="sideways")


def test_continuous_loss_examples():
    u = _u(seed=1)
    t, s = torch.tensor([0.2]), torch.tensor([0.5])
    assert float(continuous_loss(u, u.clone(), t, s)) == 0.0
    assert float(continuous_loss(u + 1.0, u, t, s)) == 1.0


def test_continuous_loss_weight_linearity():
    params = {"w": torch.tensor([0.3, -0.2], dtype=DTYPE)}
    target = _u(seed=2)
    t, s = torch.tensor([0.2]), torch.tensor([0.5])
    base = _u(seed=4)

    def loss(p, scale):
        u_hat = base * p["w"][0] + p["w"][1]
        return continuous_loss(u_hat, target, t, s, weight=lambda t, s: scale * torch.ones_like(t))

    v1, g1 = grad(lambda p: loss(p, 1.0), params)
    v2, g2 = grad(lambda p: loss(p, 2.0), params)
    assert torch.allclose(v2, 2 * v1)
    assert torch.allclose(g2["w"], 2 * g1["w"])


def test_continuous_loss_mask_excludes_padding():
    u = torch.zeros(1, 3, 3, dtype=DTYPE)
    target = torch.zeros_like(u)
    target[0, 2] = 100.0
    mask = torch.tensor([[True, True, False]])
    assert float(continuous_loss(u, target, torch.zeros(1), torch.ones(1), mask)) == 0.0


def test_loss_config_validation():
    with pytest.raises(BadConfig, match="lambda_cont"):
        LossConfig(lambda_cont=-1.0)
    with pytest.raises(BadConfig, match="target_derivative"):
        LossConfig(target_derivative="nope")


def test_coord_update_examples():
    r = _u(seed=5)
    assert torch.equal(coord_update(r, torch.zeros_like(r), 0.4), r)
    u = torch.tensor([[1.0, 0, 0], [-1, 0, 0]], dtype=DTYPE)
    assert torch.equal(coord_update(torch.zeros_like(u), u, 1.0), u)
    v = _u(seed=6)
    two = coord_update(coord_update(r, v, 0.25), v, 0.25)
    assert torch.allclose(two, coord_update(r, v, 0.5), atol=1e-15)
    assert coord_update(r, v, 0.5).sum(1).abs().max() < 1e-9


def test_coord_update_rotation_equivariant():
    rng = np.random.default_rng(0)
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    Q = torch.as_tensor(q)
    r, u = _u(seed=7), _u(seed=8)
    lhs = coord_update(r @ Q.T, u @ Q.T, 0.3)
    rhs = coord_update(r, u, 0.3) @ Q.T
    assert (lhs - rhs).abs().max() < 1e-10
