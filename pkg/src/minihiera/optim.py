"""AdamW with decoupled weight decay, warmup + cosine schedule, layer-wise lr decay."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .nn import Module


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class Schedule:
    base_lr: float
    warmup_steps: int
    total_steps: int


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 8e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    warmup_epochs: float = 40
    layer_decay: float = 1.0
    clip_grad: float | None = None

    @classmethod
    def pretrain(cls, **kw) -> OptimConfig:
        return cls(**kw)

    @classmethod
    def finetune(cls, **kw) -> OptimConfig:
        base = dict(lr=2e-3, beta2=0.999, warmup_epochs=5, layer_decay=0.7)
        base.update(kw)
        return cls(**base)


def lr_at(step: int, schedule: Schedule) -> float:
    """Linear warmup from 0, then half-cosine down to 0 at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < schedule.warmup_steps:
        return schedule.base_lr * step / schedule.warmup_steps
    if step >= schedule.total_steps:
        return 0.0
    span = schedule.total_steps - schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / span
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


_BLOCK = re.compile(r"(?:^|\.)blocks\.(\d+)\.")


def layer_id(name: str, num_blocks: int) -> int:
    """0 for the stem (patch and position embeddings), i + 1 for encoder block i,
    ``num_blocks`` for everything after the last block."""
    if "patch_embed" in name or ("pos_embed" in name and not name.startswith("decoder")):
        return 0
    m = _BLOCK.search(name)
    if m and not name.startswith("decoder"):
        return min(int(m.group(1)) + 1, num_blocks)
    return num_blocks


def layerwise_lr_scale(name: str, decay: float, num_blocks: int) -> float:
    if not 0.0 < decay <= 1.0:
        raise ValueError(f"layer decay {decay} outside (0, 1]")
    return decay ** (num_blocks - layer_id(name, num_blocks))


def decays(name: str, array: np.ndarray) -> bool:
    """Weight decay applies to matrices only: never norms, biases, position tables, mask token."""
    return array.ndim > 1 and "pos_embed" not in name and "mask_token" not in name


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    exp_avg: dict[str, np.ndarray]
    exp_avg_sq: dict[str, np.ndarray]
    schedule: Schedule
    optim: OptimConfig
    seed: int = 0
    step: int = 0
    lr_scales: dict[str, float] = field(default_factory=dict)

    @classmethod
    def create(cls, model: Module, optim: OptimConfig, schedule: Schedule, seed: int = 0,
               num_blocks: int | None = None) -> TrainState:
        """State sharing parameter arrays with ``model`` so updates land in place."""
        params = {name: p.data for name, p in model.named_parameters()}
        if num_blocks is None:
            num_blocks = sum(1 for n in params if n.endswith("norm1.weight") and not n.startswith("decoder"))
        scales = {n: layerwise_lr_scale(n, optim.layer_decay, num_blocks) for n in params}
        return cls(
            params=params,
            exp_avg={n: np.zeros_like(a) for n, a in params.items()},
            exp_avg_sq={n: np.zeros_like(a) for n, a in params.items()},
            schedule=schedule,
            optim=optim,
            seed=seed,
            lr_scales=scales,
        )

    @property
    def lr(self) -> float:
        return lr_at(self.step, self.schedule)


def adamw_step(state: TrainState, grads: dict[str, np.ndarray | None]) -> TrainState:
    """One in-place AdamW update with bias-corrected moments.

    Raises before touching any parameter if a gradient is non-finite.
    """
    bad = [n for n, g in grads.items() if g is not None and not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(f"non-finite gradients at step {state.step}: {', '.join(bad)}")
    opt = state.optim
    clip = 1.0
    if opt.clip_grad is not None:
        total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values() if g is not None))
        if total > opt.clip_grad:
            clip = opt.clip_grad / (total + 1e-6)
    lr = lr_at(state.step, state.schedule)
    t = state.step + 1
    c1 = 1.0 - opt.beta1**t
    c2 = 1.0 - opt.beta2**t
    for name, p in state.params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif clip != 1.0:
            g = g * clip
        m, v = state.exp_avg[name], state.exp_avg_sq[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        step_lr = lr * state.lr_scales.get(name, 1.0)
        if step_lr == 0.0:
            continue
        if opt.weight_decay and decays(name, p):
            p -= (step_lr * opt.weight_decay) * p
        p -= step_lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    state.step += 1
    return state
