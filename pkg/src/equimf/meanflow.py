"""Average-velocity target, regression loss and coordinate transport."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch

from .diffkernel import Tangent, jvp
from .errors import BadConfig
from .graph import zero_center

TARGET_DERIVATIVES = ("fixed_s", "fixed_delta")


def constant_weight(t, s):
    return torch.ones_like(torch.as_tensor(t, dtype=torch.float64))


@dataclass(frozen=True)
class LossConfig:
    lambda_cont: float = 0.2
    lambda_disc: float = 0.8
    lambda_edge: float = 1.0
    weight: Callable = constant_weight
    # "fixed_s": d/dt taken along (dt, d delta) = (1, -1); "fixed_delta": (1, 0)
    target_derivative: str = "fixed_s"

    def __post_init__(self):
        for key in ("lambda_cont", "lambda_disc", "lambda_edge"):
            if getattr(self, key) < 0:
                raise BadConfig("must be nonnegative", key=key)
        if self.target_derivative not in TARGET_DERIVATIVES:
            raise BadConfig(f"expected one of {TARGET_DERIVATIVES}", key="target_derivative")


def meanflow_target(head: Callable, r_t: torch.Tensor, t: torch.Tensor, delta: torch.Tensor,
                    u_cond: torch.Tensor, mask: Optional[torch.Tensor] = None,
                    target_derivative: str = "fixed_s") -> torch.Tensor:
    """``u_cond + delta * D`` with ``D`` the total time derivative of ``head`` along the path.

    ``D`` is the JVP of ``head(R, t, delta)`` along ``(u_cond, 1, -1)`` (or
    ``(u_cond, 1, 0)`` for ``fixed_delta``). The result carries no gradient.
    """
    if target_derivative not in TARGET_DERIVATIVES:
        raise BadConfig(f"expected one of {TARGET_DERIVATIVES}", key="target_derivative")
    dd = -1.0 if target_derivative == "fixed_s" else 0.0
    with torch.no_grad():
        _, deriv = jvp(head, (r_t, t, delta), Tangent(u_cond, 1.0, dd))
        scale = delta.reshape(-1, *([1] * (u_cond.dim() - 1)))
        # u_cond is already centered; projecting only the derivative keeps delta=0 exact
        return (u_cond + scale * zero_center(deriv, mask)).detach()


def continuous_loss(u_hat: torch.Tensor, target: torch.Tensor, t, s,
                    mask: Optional[torch.Tensor] = None, weight: Callable = constant_weight):
    """``w(t, s) * ||u_hat - sg(target)||^2`` as a per-entry mean, averaged over the batch."""
    if u_hat.dim() == 2:
        u_hat, target = u_hat[None], target[None]
        mask = None if mask is None else mask[None]
    target = target.detach()
    sq = (u_hat - target) ** 2
    if mask is None:
        per_graph = sq.mean(dim=(-1, -2))
    else:
        m = mask.to(sq.dtype)[..., None]
        per_graph = (sq * m).sum((-1, -2)) / (3.0 * m.sum((-1, -2)).clamp(min=1.0))
    w = torch.as_tensor(weight(t, s), dtype=sq.dtype).reshape(-1)
    return (w * per_graph).mean()


def coord_update(r_t, u_hat, delta):
    """Transport ``R_s = R_t + delta * u_hat``."""
    if isinstance(delta, torch.Tensor) and delta.dim() == 1 and r_t.dim() == 3:
        delta = delta[:, None, None]
    return r_t + delta * u_hat
