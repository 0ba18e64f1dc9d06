"""Joint training loop: noising, both losses, Adam, checkpoints, metrics stream."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch.func import functional_call

from .backbone import EquiMF, ModelConfig
from .bridge import NoisedBatch, noise_batch, sample_time_pair
from .diffkernel import global_norm, grad
from .discrete import discrete_loss
from .errors import BadConfig, CorruptCheckpoint, NonFinite
from .graph import Batch, Graph
from .meanflow import LossConfig, continuous_loss, meanflow_target

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-4
    iterations: int = 1000
    delta_min: float = 0.01
    lambda_cont: float = 0.2
    lambda_disc: float = 0.8
    lambda_edge: float = 1.0
    target_derivative: str = "fixed_s"
    mode: str = "P1"
    hidden_layer: int = 9
    hidden_dimension: int = 256
    seed: int = 0
    checkpoint_interval: int = 0
    grad_clip: float = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for key in ("batch_size", "iterations", "hidden_layer", "hidden_dimension"):
            if getattr(self, key) < 1:
                raise BadConfig("must be a positive integer", key=key)
        if self.learning_rate <= 0:
            raise BadConfig("must be positive", key="learning_rate")
        if not 0.0 < self.delta_min < 1.0:
            raise BadConfig("must lie in (0, 1)", key="delta_min")
        if self.checkpoint_interval < 0:
            raise BadConfig("must be nonnegative", key="checkpoint_interval")
        if self.grad_clip <= 0:
            raise BadConfig("must be positive", key="grad_clip")
        self.loss_config()  # validates lambdas and target_derivative
        ModelConfig(1, 1, mode=self.mode)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Small profile for CPU runs: 4 layers of width 64, lr 1e-3."""
        base = dict(hidden_layer=4, hidden_dimension=64, batch_size=32, learning_rate=1e-3)
        base.update(overrides)
        return cls(**base)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.lambda_cont, self.lambda_disc, self.lambda_edge,
                          target_derivative=self.target_derivative)

    def model_config(self, b: int, a: int) -> ModelConfig:
        return ModelConfig(b, a, self.hidden_dimension, self.hidden_layer, self.mode, seed=self.seed)

    def to_dict(self):
        return asdict(self)


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "OptimizerState":
        return cls({k: torch.zeros_like(p) for k, p in params.items()},
                   {k: torch.zeros_like(p) for k, p in params.items()}, 0)


def adam_update(params: dict, grads: dict, state: OptimizerState, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam step. Inputs are left untouched."""
    step = state.step + 1
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    new_p, new_m, new_v = {}, {}, {}
    for k in params:
        g = grads[k]
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        new_p[k] = params[k] - lr * (m / c1) / ((v / c2).sqrt() + eps)
        new_m[k], new_v[k] = m, v
    return new_p, OptimizerState(new_m, new_v, step)


def model_params(model: torch.nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in model.named_parameters()}


def load_params_into(model: torch.nn.Module, params: dict) -> None:
    with torch.no_grad():
        for k, p in model.named_parameters():
            p.copy_(params[k])


def velocity_head(model: EquiMF, params: dict, xoh, eoh, mask) -> Callable:
    """The continuous head as a map ``(R, t, delta) -> velocity`` with ``params`` bound."""
    def head(r, t, delta):
        return functional_call(model, params, (xoh, eoh, r, mask, t, delta),
                               {"part": "velocity"})
    return head


def joint_losses(model: EquiMF, params: dict, batch: Batch, noised: NoisedBatch,
                 loss_cfg: LossConfig, target: Optional[torch.Tensor] = None) -> dict:
    """All loss terms from a single forward pass over ``params``.

    ``target`` is computed from ``params`` when omitted; passing a tensor
    holds it fixed, which is what the stop-gradient means.
    """
    xoh = torch.nn.functional.one_hot(noised.x_t, batch.b).to(torch.float64)
    eoh = torch.nn.functional.one_hot(noised.e_t, batch.a + 1).to(torch.float64)
    mask = batch.mask
    t, delta = noised.t, noised.delta
    if target is None:
        target = meanflow_target(velocity_head(model, params, xoh, eoh, mask), noised.r_t,
                                 t, delta, noised.u_cond, mask, loss_cfg.target_derivative)
    node_logp, edge_logp, u_hat = functional_call(
        model, params, (xoh, eoh, noised.r_t, mask, t, delta))
    l_disc, l_node, l_edge = discrete_loss(node_logp, edge_logp, batch.x, batch.e, mask,
                                           loss_cfg.lambda_edge)
    l_cont = continuous_loss(u_hat, target, t, t + delta, mask, loss_cfg.weight)
    joint = loss_cfg.lambda_disc * l_disc + loss_cfg.lambda_cont * l_cont
    return {"joint": joint, "disc": l_disc, "cont": l_cont, "node": l_node,
            "edge": l_edge, "target": target}


def draw_batch(dataset: Sequence[Graph], cfg: TrainConfig, rng: np.random.Generator,
               b: int, a: int):
    idx = rng.integers(0, len(dataset), size=cfg.batch_size)
    batch = Batch.from_graphs([dataset[i] for i in idx], b, a)
    times = sample_time_pair(cfg.delta_min, rng, size=cfg.batch_size)
    return batch, noise_batch(batch, times, rng)


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Independent stream per (seed, step) so resumed runs replay exactly."""
    return np.random.default_rng([seed, step])


def train_step(model: EquiMF, params: dict, opt_state: OptimizerState, batch: Batch,
               noised: NoisedBatch, cfg: TrainConfig):
    """One optimization step on an already-noised batch.

    Returns ``(params', opt_state', metrics)``; raises :class:`NonFinite`
    naming the offending loss term.
    """
    loss_cfg = cfg.loss_config()
    parts = {}

    def objective(p):
        out = joint_losses(model, p, batch, noised, loss_cfg)
        parts.update(out)
        return out["joint"]

    try:
        _, grads = grad(objective, params)
    except NonFinite as exc:
        if not parts:
            raise NonFinite("loss_cont: meanflow target") from exc
        for name in ("disc", "cont", "joint"):
            if not torch.isfinite(parts[name]).all():
                raise NonFinite(f"loss_{name}") from exc
        raise
    for name in ("disc", "cont", "joint"):
        if not torch.isfinite(parts[name]).all():
            raise NonFinite(f"loss_{name}")
    norm = global_norm(grads)
    if norm > cfg.grad_clip:
        grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
    new_params, new_state = adam_update(params, grads, opt_state, cfg.learning_rate,
                                        cfg.beta1, cfg.beta2, cfg.adam_eps)
    metrics = {
        "step": new_state.step,
        "loss_joint": float(parts["joint"].detach()),
        "loss_disc": float(parts["disc"].detach()),
        "loss_cont": float(parts["cont"].detach()),
        "grad_norm": float(norm),
        "t_mean": float(noised.t.mean()),
    }
    return new_params, new_state, metrics


# -- checkpoints --------------------------------------------------------------

def node_count_histogram(dataset: Sequence[Graph]) -> dict:
    counts: dict[int, int] = {}
    for g in dataset:
        counts[g.n] = counts.get(g.n, 0) + 1
    return {int(k): int(v) for k, v in sorted(counts.items())}


def save_checkpoint(path, params: dict, opt_state: OptimizerState, cfg: TrainConfig,
                    step: int, model_config: ModelConfig, node_counts: Optional[dict] = None,
                    extra: Optional[dict] = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "train_config": cfg.to_dict(),
        "model_config": model_config.to_dict(),
        "step": int(step),
        "params": {k: v.detach().clone() for k, v in params.items()},
        "adam_m": {k: v.detach().clone() for k, v in opt_state.m.items()},
        "adam_v": {k: v.detach().clone() for k, v in opt_state.v.items()},
        "adam_step": int(opt_state.step),
        "node_counts": {str(k): int(v) for k, v in (node_counts or {}).items()},
        "extra": dict(extra or {}),
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    params: dict
    opt_state: OptimizerState
    train_config: TrainConfig
    model_config: ModelConfig
    step: int
    node_counts: dict
    extra: dict = field(default_factory=dict)

    def build_model(self) -> EquiMF:
        model = EquiMF(self.model_config)
        load_params_into(model, self.params)
        return model


def load_checkpoint(path, expected: Optional[ModelConfig] = None) -> Checkpoint:
    """Load and validate a checkpoint; every failure is a :class:`CorruptCheckpoint`."""
    try:
        raw = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:  # truncated or not a checkpoint at all
        raise CorruptCheckpoint(f"unreadable: {exc.__class__.__name__}") from exc
    if not isinstance(raw, dict):
        raise CorruptCheckpoint("root: not a mapping")
    for key in ("version", "train_config", "model_config", "step", "params",
                "adam_m", "adam_v", "adam_step"):
        if key not in raw:
            raise CorruptCheckpoint(f"missing field: {key}")
    try:
        model_config = ModelConfig(**raw["model_config"])
        train_config = TrainConfig(**raw["train_config"])
    except (TypeError, BadConfig) as exc:
        raise CorruptCheckpoint(f"config: {exc}") from exc
    if expected is not None and expected != model_config:
        ref = EquiMF(expected)
        _check_shapes(raw, ref)
        raise CorruptCheckpoint("config: stored model config differs from the expected one")
    _check_shapes(raw, EquiMF(model_config))
    opt = OptimizerState(dict(raw["adam_m"]), dict(raw["adam_v"]), int(raw["adam_step"]))
    node_counts = {int(k): int(v) for k, v in raw.get("node_counts", {}).items()}
    return Checkpoint(dict(raw["params"]), opt, train_config, model_config,
                      int(raw["step"]), node_counts, dict(raw.get("extra", {})))


def _check_shapes(raw: dict, model: EquiMF) -> None:
    for group in ("params", "adam_m", "adam_v"):
        stored = raw[group]
        for name, p in model.named_parameters():
            if name not in stored:
                raise CorruptCheckpoint(f"shape: {group}.{name} missing")
            if tuple(stored[name].shape) != tuple(p.shape):
                raise CorruptCheckpoint(f"shape: {group}.{name}")
            if not torch.isfinite(stored[name]).all():
                raise CorruptCheckpoint(f"non-finite: {group}.{name}")
        extra = set(stored) - {n for n, _ in model.named_parameters()}
        if extra:
            raise CorruptCheckpoint(f"shape: {group}.{sorted(extra)[0]} unexpected")


# -- driver -------------------------------------------------------------------

class Trainer:
    """Owns the parameters and optimizer state for one training run."""

    def __init__(self, dataset: Sequence[Graph], b: int, a: int, cfg: TrainConfig,
                 checkpoint: Optional[Checkpoint] = None, extra: Optional[dict] = None):
        if not dataset:
            raise BadConfig("dataset is empty", key="data")
        self.dataset = list(dataset)
        self.b, self.a, self.cfg = b, a, cfg
        self.model_config = cfg.model_config(b, a)
        self.model = EquiMF(self.model_config)
        self.node_counts = node_count_histogram(self.dataset)
        self.extra = dict(extra or {})
        if checkpoint is None:
            self.params = model_params(self.model)
            self.opt_state = OptimizerState.zeros_like(self.params)
            self.step = 0
        else:
            if checkpoint.model_config != self.model_config:
                raise CorruptCheckpoint("shape: checkpoint model config does not match the run")
            self.params = {k: v.clone() for k, v in checkpoint.params.items()}
            self.opt_state = checkpoint.opt_state
            self.step = checkpoint.step

    def run(self, iterations: Optional[int] = None, on_metrics: Optional[Callable] = None,
            checkpoint_path=None) -> list:
        """Train until ``iterations`` total steps; returns the metrics of this call."""
        target = self.cfg.iterations if iterations is None else iterations
        history = []
        while self.step < target:
            rng = step_rng(self.cfg.seed, self.step)
            batch, noised = draw_batch(self.dataset, self.cfg, rng, self.b, self.a)
            self.params, self.opt_state, metrics = train_step(
                self.model, self.params, self.opt_state, batch, noised, self.cfg)
            self.step = self.opt_state.step
            history.append(metrics)
            if on_metrics is not None:
                on_metrics(metrics)
            interval = self.cfg.checkpoint_interval
            if checkpoint_path is not None and interval and self.step % interval == 0:
                self.save(checkpoint_path)
        if checkpoint_path is not None:
            self.save(checkpoint_path)
        return history

    def save(self, path) -> None:
        save_checkpoint(path, self.params, self.opt_state, self.cfg, self.step,
                        self.model_config, self.node_counts, self.extra)

    def trained_model(self) -> EquiMF:
        model = EquiMF(self.model_config)
        load_params_into(model, self.params)
        return model


def metrics_line(metrics: dict) -> str:
    return json.dumps(metrics, sort_keys=False)
