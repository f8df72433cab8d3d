from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import EmbedderParams


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: EmbedderParams, grads: dict[str, np.ndarray] | None,
             state: OptimizerState, prefix: str = "") -> None:
    """Momentum SGD with coupled weight decay, updating ``params`` in place.

    g' = g + wd * p;  v <- momentum * v + g';  p <- p - lr * v

    ``grads`` defaults to each tensor's ``.grad`` (missing gradients count as
    zero).  ``prefix`` keeps velocity buffers of several towers apart when
    they share one state.
    """
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.data.dtype)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {prefix}{name}")
        key = prefix + name
        v = state.velocity.get(key)
        if v is None:
            v = np.zeros_like(p.data)
        v = state.momentum * v + (g + state.weight_decay * p.data)
        state.velocity[key] = v.astype(p.data.dtype, copy=False)
        p.data = (p.data - state.lr * v).astype(p.data.dtype, copy=False)
