"""E(3)-equivariant encoder with a discrete (posterior) head and a continuous (velocity) head.

Scalar features only ever see invariants (one-hot types, squared distances,
time features); vector outputs are sums of relative-position directions with
invariant coefficients. Every activation is smooth so forward-mode
derivatives exist everywhere.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .errors import BadConfig, NonFinite
from .graph import zero_center

DTYPE = torch.float64
MODES = ("P1", "P2", "P3", "P4")

# which encoder each head reads, and which modality that encoder never sees
_WIRING = {
    "P1": {"disc": ("shared", None), "cont": ("shared", None)},
    "P2": {"disc": ("enc_disc", "coords"), "cont": ("enc_cont", None)},
    "P3": {"disc": ("enc_disc", None), "cont": ("enc_cont", "types")},
    "P4": {"disc": ("enc_disc", "coords"), "cont": ("enc_cont", "types")},
}


@dataclass(frozen=True)
class ModelConfig:
    b: int
    a: int
    hidden_dim: int = 64
    layers: int = 4
    mode: str = "P1"
    time_frequencies: int = 4
    seed: int = 0
    encoder_dim: Optional[int] = None

    def __post_init__(self):
        if self.b < 1 or self.a < 1:
            raise BadConfig("b and a must be positive", key="model")
        if self.hidden_dim < 1 or self.layers < 1:
            raise BadConfig("hidden sizes must be positive", key="hidden_dimension")
        if self.mode not in MODES:
            raise BadConfig(f"unknown conditioning mode {self.mode!r}", key="mode")
        if self.encoder_dim is not None and self.encoder_dim < 1:
            raise BadConfig("must be positive", key="encoder_dim")

    @property
    def encoder_width(self) -> int:
        """Internal encoder width.

        One shared encoder uses ``hidden_dim``. The split modes run two
        encoders of width ``hidden_dim / sqrt(2)`` so the total encoder size
        stays close to the shared one.
        """
        if self.encoder_dim is not None:
            return self.encoder_dim
        if self.mode == "P1":
            return self.hidden_dim
        return max(1, round(self.hidden_dim / math.sqrt(2.0)))

    def to_dict(self):
        return asdict(self)


def conditioning_mode_wiring(mode: str) -> dict:
    """Map each head to ``(encoder name, severed modality or None)``."""
    if mode not in _WIRING:
        raise BadConfig(f"unknown conditioning mode {mode!r}", key="mode")
    return dict(_WIRING[mode])


def mlp(sizes, final_zero=False):
    layers = []
    for k in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[k], sizes[k + 1], dtype=DTYPE))
        if k < len(sizes) - 2:
            layers.append(nn.SiLU())
    seq = nn.Sequential(*layers)
    seq.final_zero = final_zero
    return seq


def init_parameters(module: nn.Module, seed: int) -> None:
    """Truncated-normal weights with std 1/sqrt(fan_in), zero biases.

    The last linear layer of any ``mlp(..., final_zero=True)`` is zeroed.
    """
    gen = torch.Generator().manual_seed(seed)
    for sub in module.modules():
        if isinstance(sub, nn.Linear):
            std = 1.0 / math.sqrt(sub.in_features)
            with torch.no_grad():
                nn.init.trunc_normal_(sub.weight, 0.0, std, -2 * std, 2 * std, generator=gen)
                if sub.bias is not None:
                    sub.bias.zero_()
    for sub in module.modules():
        if getattr(sub, "final_zero", False):
            last = [m for m in sub if isinstance(m, nn.Linear)][-1]
            with torch.no_grad():
                last.weight.zero_()
                last.bias.zero_()


def pair_mask(mask: torch.Tensor) -> torch.Tensor:
    m = mask.to(DTYPE)
    eye = torch.eye(mask.shape[-1], dtype=DTYPE)
    return m[:, :, None] * m[:, None, :] * (1.0 - eye)


def neighbor_norm(mask: torch.Tensor) -> torch.Tensor:
    """``1 / max(n - 1, 1)`` per graph, shaped ``[B, 1, 1]``."""
    n = mask.to(DTYPE).sum(-1)
    return (1.0 / (n - 1.0).clamp(min=1.0))[:, None, None]


def relative(r: torch.Tensor):
    diff = r[:, :, None, :] - r[:, None, :, :]
    return diff, (diff * diff).sum(-1, keepdim=True)


def pair_mlp(seq: nn.Sequential, h_i: torch.Tensor, h_j: torch.Tensor, pair: torch.Tensor):
    """Apply ``seq`` to ``cat([h_i, h_j, pair])`` for every ordered node pair.

    The first linear layer is split into its node and pair blocks so the
    node blocks are applied once per node rather than once per pair.
    """
    first = seq[0]
    d_i, d_j = h_i.shape[-1], h_j.shape[-1]
    w = first.weight
    out = (
        F.linear(h_i, w[:, :d_i])[:, :, None, :]
        + F.linear(h_j, w[:, d_i:d_i + d_j])[:, None, :, :]
        + F.linear(pair, w[:, d_i + d_j:], first.bias)
    )
    for layer in list(seq)[1:]:
        out = layer(out)
    return out


class TimeEmbedding(nn.Module):
    """Smooth embedding of the pair ``(t, delta)``."""

    def __init__(self, dim: int, frequencies: int = 4):
        super().__init__()
        self.register_buffer("freqs", math.pi * torch.arange(1, frequencies + 1, dtype=DTYPE))
        self.net = mlp([2 + 4 * frequencies, dim, dim])

    def forward(self, t: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
        tf = t[:, None] * self.freqs
        df = delta[:, None] * self.freqs
        feats = torch.cat(
            [t[:, None], delta[:, None], tf.sin(), tf.cos(), df.sin(), df.cos()], dim=-1
        )
        return self.net(feats)


class EGNNLayer(nn.Module):
    def __init__(self, dim: int, edge_dim: int):
        super().__init__()
        self.edge_mlp = mlp([2 * dim + 1 + edge_dim, dim, dim])
        self.node_mlp = mlp([2 * dim, dim, dim])
        self.coord_mlp = mlp([dim, dim, 1])

    def forward(self, h, r, eoh, mask):
        """Return ``(h', r', messages)``.

        ``r'`` moves each node along relative directions with coefficients
        bounded by ``tanh`` and scaled by ``1 / (n - 1)``, then recentered.
        """
        pm = pair_mask(mask)[..., None]
        diff, d2 = relative(r)
        msg = F.silu(pair_mlp(self.edge_mlp, h, h, torch.cat([d2, eoh], dim=-1))) * pm
        norm = neighbor_norm(mask)
        agg = msg.sum(2) * norm
        m = mask.to(DTYPE)[..., None]
        h_new = (h + self.node_mlp(torch.cat([h, agg], dim=-1))) * m
        gate = torch.tanh(self.coord_mlp(msg)) * pm
        r_new = r + (diff * gate).sum(2) * norm
        return h_new, zero_center(r_new, mask), msg


@dataclass
class EncodedState:
    h_disc: torch.Tensor  # [B, N, d] per-node invariant structure features
    graph: torch.Tensor  # [B, w] pooled graph feature (encoder width w)
    h_cont: torch.Tensor  # [B, N, d] per-node invariant context for the velocity head
    pair: torch.Tensor  # [B, N, N, w] last-layer messages (invariant)
    r_ctx: torch.Tensor  # [B, N, 3] coordinates after the message-passing stack
    mask: torch.Tensor


class Encoder(nn.Module):
    def __init__(self, b: int, a: int, dim: int, layers: int, frequencies: int = 4,
                 out_dim: Optional[int] = None):
        super().__init__()
        out_dim = dim if out_dim is None else out_dim
        self.time = TimeEmbedding(dim, frequencies)
        self.node_in = nn.Linear(b, dim, dtype=DTYPE)
        self.layers = nn.ModuleList(EGNNLayer(dim, a + 1) for _ in range(layers))
        self.disc_branch = mlp([2 * dim, dim, out_dim])
        self.cont_branch = mlp([dim, dim, out_dim])

    def embed_nodes(self, xoh, r, tau):
        return self.node_in(xoh) + tau[:, None, :]

    def forward(self, xoh, eoh, r, mask, t, delta) -> EncodedState:
        m = mask.to(DTYPE)[..., None]
        tau = self.time(t, delta)
        h = self.embed_nodes(xoh, r, tau) * m
        msg = None
        for layer in self.layers:
            h, r, msg = layer(h, r, eoh, mask)
        graph = (h * m).sum(1) / m.sum(1).clamp(min=1.0)
        g = graph[:, None, :].expand_as(h)
        h_disc = self.disc_branch(torch.cat([h, g], dim=-1)) * m
        h_cont = self.cont_branch(h) * m
        return EncodedState(h_disc, graph, h_cont, msg, r, mask)


class DiscreteHead(nn.Module):
    def __init__(self, b: int, a: int, dim: int, pair_dim: Optional[int] = None):
        super().__init__()
        pair_dim = dim if pair_dim is None else pair_dim
        self.node = mlp([dim, dim, b], final_zero=True)
        self.edge = mlp([2 * dim + pair_dim + 1, dim, a + 1], final_zero=True)

    def forward(self, state: EncodedState):
        node_logp = F.log_softmax(self.node(state.h_disc), dim=-1)
        _, d2 = relative(state.r_ctx)
        f = pair_mlp(self.edge, state.h_disc, state.h_disc, torch.cat([state.pair, d2], dim=-1))
        f = 0.5 * (f + f.transpose(1, 2))
        return node_logp, F.log_softmax(f, dim=-1)


class ContinuousHead(nn.Module):
    def __init__(self, dim: int, pair_dim: Optional[int] = None):
        super().__init__()
        pair_dim = dim if pair_dim is None else pair_dim
        self.gate = mlp([2 * dim + pair_dim + 1, dim, dim, 1], final_zero=True)

    def forward(self, state: EncodedState, r_t: torch.Tensor) -> torch.Tensor:
        diff, d2 = relative(r_t)
        coef = pair_mlp(self.gate, state.h_cont, state.h_cont, torch.cat([state.pair, d2], dim=-1))
        coef = coef * pair_mask(state.mask)[..., None]
        v = (diff * coef).sum(2) * neighbor_norm(state.mask)
        return zero_center(v, state.mask)


class EquiMF(nn.Module):
    """Shared encoder(s) plus both heads, wired per conditioning mode.

    Parameter names starting with ``shared``/``enc_`` form the encoder group,
    ``cont_head`` the continuous group and ``disc_head`` the discrete group.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.wiring = conditioning_mode_wiring(c.mode)
        names = sorted({enc for enc, _ in self.wiring.values()})
        w = c.encoder_width
        self.encoders = nn.ModuleDict(
            {k: Encoder(c.b, c.a, w, c.layers, c.time_frequencies, c.hidden_dim) for k in names}
        )
        self.disc_head = DiscreteHead(c.b, c.a, c.hidden_dim, w)
        self.cont_head = ContinuousHead(c.hidden_dim, w)
        init_parameters(self, c.seed)

    @staticmethod
    def param_group(name: str) -> str:
        if name.startswith("encoders."):
            return "theta1"
        if name.startswith("cont_head."):
            return "theta2"
        return "theta3"

    def _encode(self, head, xoh, eoh, r, mask, t, delta):
        name, severed = self.wiring[head]
        if severed == "coords":
            r = torch.zeros_like(r)
        elif severed == "types":
            xoh, eoh = torch.zeros_like(xoh), torch.zeros_like(eoh)
        return self.encoders[name](xoh, eoh, r, mask, t, delta)

    def encode(self, xoh, eoh, r, mask, t, delta, head="disc") -> EncodedState:
        return self._encode(head, xoh, eoh, r, mask, t, delta)

    def forward(self, xoh, eoh, r, mask, t, delta, part: str = "all"):
        """Run the network.

        ``part="all"`` returns ``(node_logp, edge_logp, velocity)`` with one
        pass per distinct encoder; ``"posterior"`` and ``"velocity"`` run only
        the path feeding that head.
        """
        if part == "velocity":
            return self.cont_head(self._encode("cont", xoh, eoh, r, mask, t, delta), r)
        s_disc = self._encode("disc", xoh, eoh, r, mask, t, delta)
        node_logp, edge_logp = self.disc_head(s_disc)
        if part == "posterior":
            return node_logp, edge_logp
        if self.wiring["cont"] == self.wiring["disc"]:
            s_cont = s_disc
        else:
            s_cont = self._encode("cont", xoh, eoh, r, mask, t, delta)
        return node_logp, edge_logp, self.cont_head(s_cont, r)

    def posterior(self, xoh, eoh, r, mask, t, delta):
        return self(xoh, eoh, r, mask, t, delta, part="posterior")

    def velocity(self, xoh, eoh, r, mask, t, delta):
        return self(xoh, eoh, r, mask, t, delta, part="velocity")

    def velocity_fn(self, xoh, eoh, mask):
        """Velocity as a function of ``(R, t, delta)`` with the discrete context frozen."""
        def f(r, t, delta):
            return self.velocity(xoh, eoh, r, mask, t, delta)
        return f


def check_finite(*tensors, where="model"):
    for x in tensors:
        if not torch.isfinite(x).all():
            raise NonFinite(where)
