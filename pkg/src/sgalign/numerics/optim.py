"""AdamW with decoupled weight decay and a cosine-annealed learning rate."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    base_lr: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    total_epochs: int = 50
    min_lr: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def cosine_lr(epoch: float, total_epochs: int, base_lr: float, min_lr: float = 0.0) -> float:
    """Cosine annealing from ``base_lr`` at epoch 0 to ``min_lr`` at ``total_epochs``."""
    if total_epochs <= 0:
        raise ValueError("total_epochs must be positive")
    t = min(max(epoch / total_epochs, 0.0), 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * t))


def adamw_step(params: dict[str, Tensor], state: OptimizerState, lr: float | None = None) -> None:
    """One AdamW update of every parameter in ``params`` (in place).

    Parameters without a gradient are treated as having zero gradient, so
    their moments still decay and weight decay still applies.
    """
    lr = state.base_lr if lr is None else lr
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    if all(p.grad is None or not np.any(p.grad) for p in params.values()):
        log.warning("adamw_step at step %d with all-zero gradients", state.step)
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.data.shape:
            raise ValueError(f"optimizer moment for {name!r} has shape {m.shape}, parameter {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data * (1.0 - lr * state.weight_decay) - lr * update).astype(p.data.dtype)
