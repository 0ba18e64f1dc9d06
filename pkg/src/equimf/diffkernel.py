"""Differentiation contract used by training and the MeanFlow target.

Directional derivatives run through torch's forward-mode dual tensors;
parameter gradients through reverse mode. The finite-difference helpers are
test oracles and are never called on the training path.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import torch
import torch.autograd.forward_ad as fwAD

from .errors import NonFinite


@dataclass(frozen=True)
class Tangent:
    """Direction for ``(R, t, delta)``; discrete inputs never carry a tangent."""

    dR: torch.Tensor
    dt: float | torch.Tensor = 0.0
    ddelta: float | torch.Tensor = 0.0


def _like(v, ref: torch.Tensor) -> torch.Tensor:
    if isinstance(v, torch.Tensor):
        return v.to(ref.dtype).expand_as(ref).clone()
    return torch.full_like(ref, float(v))


def _check(name: str, *tensors):
    for x in tensors:
        if not torch.isfinite(x).all():
            raise NonFinite(name)


def jvp(f: Callable, point, tangent: Tangent):
    """Return ``(f(point), d/dh f(point + h * tangent) at h=0)``.

    ``f`` maps ``(R, t, delta)`` to a tensor; ``point`` is that triple.
    """
    R, t, delta = point
    with fwAD.dual_level():
        R_d = fwAD.make_dual(R, _like(tangent.dR, R))
        t_d = fwAD.make_dual(t, _like(tangent.dt, t))
        d_d = fwAD.make_dual(delta, _like(tangent.ddelta, delta))
        out = fwAD.unpack_dual(f(R_d, t_d, d_d))
        value = out.primal
        deriv = out.tangent if out.tangent is not None else torch.zeros_like(value)
    _check("jvp", value, deriv)
    return value, deriv


def fd_directional(f: Callable, point, tangent: Tangent, h: float = 1e-5) -> torch.Tensor:
    """Central finite difference of ``f`` along ``tangent``."""
    if h <= 0:
        raise ValueError("h must be positive")
    R, t, delta = point
    dR, dt, dd = _like(tangent.dR, R), _like(tangent.dt, t), _like(tangent.ddelta, delta)
    plus = f(R + h * dR, t + h * dt, delta + h * dd)
    minus = f(R - h * dR, t - h * dt, delta - h * dd)
    out = (plus - minus) / (2 * h)
    _check("fd_directional", out)
    return out


def grad(loss: Callable[[dict], torch.Tensor], params: Mapping[str, torch.Tensor]):
    """Gradient of a scalar ``loss(params)`` with respect to every entry of ``params``.

    Returns ``(value, {name: gradient})``; unused parameters get zeros.
    """
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    value = loss(leaves)
    _check("loss", value.detach())
    names = list(leaves)
    gs = torch.autograd.grad(value, [leaves[k] for k in names], allow_unused=True)
    out = {}
    for k, g in zip(names, gs):
        g = torch.zeros_like(leaves[k]) if g is None else g.detach()
        _check(f"grad:{k}", g)
        out[k] = g
    return value.detach(), out


def fd_partial(loss: Callable[[dict], torch.Tensor], params: Mapping[str, torch.Tensor],
               name: str, index: tuple, h: float = 1e-4) -> float:
    """Central finite difference of ``loss`` in a single parameter coordinate."""
    def at(shift):
        p = {k: v.detach().clone() for k, v in params.items()}
        p[name][index] += shift
        with torch.no_grad():
            return float(loss(p))

    return (at(h) - at(-h)) / (2 * h)


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    return x.detach()


def global_norm(grads: Mapping[str, torch.Tensor]) -> torch.Tensor:
    # fixed key order keeps the reduction reproducible
    total = torch.zeros((), dtype=torch.float64)
    for k in sorted(grads):
        total = total + (grads[k].to(torch.float64) ** 2).sum()
    return total.sqrt()
