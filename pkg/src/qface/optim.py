"""Optimization machinery: decoupled-weight-decay Adam, cosine warmup
schedule, layer-wise learning-rate decay, and stochastic depth decisions."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import RngStream

# embedding-like tables excluded from weight decay, alongside all 1-d params
NO_DECAY_TABLES = ("decoder.q", "decoder.q_pos", "mff.se", "encoder.cls", "mim.mask_token")


@dataclass(frozen=True)
class OptimConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05


@dataclass(frozen=True)
class ScheduleConfig:
    peak_lr: float = 3e-3
    warmup_steps: int = 150
    total_steps: int = 3000
    floor_lr: float = 1e-6
    layer_decay: float = 0.85
    eval_every: int = 0  # 0 = final evaluation only

    def __post_init__(self):
        if not (0 <= self.warmup_steps < self.total_steps):
            raise ValueError("need 0 <= warmup_steps < total_steps")
        if not (0.0 < self.layer_decay <= 1.0):
            raise ValueError("layer_decay must be in (0, 1]")


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Linear warmup 0 -> peak over warmup_steps, cosine decay peak -> floor."""
    if step < 0 or step > cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    t = (step - cfg.warmup_steps) / span
    return cfg.floor_lr + 0.5 * (cfg.peak_lr - cfg.floor_lr) * (1.0 + math.cos(math.pi * t))


def layer_lr_scale(group_index: int, depth: int, decay: float) -> float:
    """decay^(depth - index); the head group sits at index == depth."""
    if not (0 <= group_index <= depth):
        raise ValueError(f"group index {group_index} outside [0, {depth}]")
    return decay ** (depth - group_index)


def param_group_index(name: str, depth: int) -> int:
    """Embedding/patch group is 0, encoder block i is i, everything above
    the encoder (fusion, decoder, heads) is the top group at index depth."""
    if name.startswith("encoder.block"):
        return int(name.split(".")[1][len("block"):])
    if name.startswith("encoder."):
        return 0
    return depth


def drop_path_mask(rate: float, depth: int, rng: RngStream | None):
    """Per-layer keep decisions for one forward pass.

    Layer l (0-indexed) is dropped with probability rate*l/(depth-1); kept
    branches are rescaled by 1/keep_prob so expectations match eval mode.
    Returns (keep: bool array, scales: float array).
    """
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"drop path rate must be in [0, 1), got {rate}")
    keep = np.ones(depth, dtype=bool)
    scales = np.ones(depth, dtype=np.float64)
    if rate == 0.0 or depth == 1:
        return keep, scales
    if rng is None:
        raise ValueError("drop_path_mask with rate > 0 needs an rng stream")
    draws = rng.uniform(shape=depth)
    for l in range(depth):
        p_drop = rate * l / (depth - 1)
        if draws[l] < p_drop:
            keep[l] = False
            scales[l] = 0.0
        else:
            scales[l] = 1.0 / (1.0 - p_drop)
    return keep, scales


class AdamW:
    """Bias-corrected Adam with decoupled weight decay and per-parameter
    learning-rate scales (layer decay)."""

    def __init__(self, params: dict, cfg: OptimConfig, encoder_depth: int,
                 layer_decay: float = 1.0):
        self.params = params
        self.cfg = cfg
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.scales = {
            name: layer_lr_scale(param_group_index(name, encoder_depth), encoder_depth, layer_decay)
            for name in params
        }

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def _decayed(self, name: str, tensor) -> bool:
        return tensor.data.ndim >= 2 and name not in NO_DECAY_TABLES

    def step(self, lr: float):
        self.step_count += 1
        t = self.step_count
        c = self.cfg
        bc1 = 1.0 - c.beta1 ** t
        bc2 = 1.0 - c.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            lr_eff = lr * self.scales[name]
            update = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            p.data = p.data - (lr_eff * update).astype(p.data.dtype)
            if c.weight_decay > 0.0 and self._decayed(name, p):
                p.data = p.data - np.asarray(lr_eff * c.weight_decay * p.data, dtype=p.data.dtype)

    def state_arrays(self) -> dict:
        out = {}
        for name in self.params:
            out[f"optim.m.{name}"] = self.m[name]
            out[f"optim.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict, step_count: int):
        for name in self.params:
            for slot, store in (("m", self.m), ("v", self.v)):
                key = f"optim.{slot}.{name}"
                if key not in arrays:
                    raise ValueError(f"optimizer state missing '{key}'")
                if arrays[key].shape != store[name].shape:
                    raise ValueError(f"optimizer state '{key}': shape mismatch")
                store[name] = arrays[key].astype(store[name].dtype, copy=True)
        self.step_count = int(step_count)
