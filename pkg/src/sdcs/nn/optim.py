"""Momentum SGD over named parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, ShapeMismatchError, Tensor


@dataclass
class SgdState:
    """Learning rate, momentum, and per-parameter velocity buffers.

    Velocities are keyed by parameter name, allocated lazily with the
    parameter's shape and dtype.
    """

    learning_rate: float
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


def sgd_step(params: list[Tensor], state: SgdState) -> None:
    """v <- momentum * v - lr * g;  w <- w + v  (in place, per parameter)."""
    for p in params:
        if p.grad is None:
            continue
        g = p.grad
        if g.shape != p.data.shape:
            raise ShapeMismatchError(
                f"sgd_step({p.name}): grad shape {g.shape} != param shape {p.data.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"sgd_step({p.name}): NaN/Inf gradient (training diverged)")
        v = state.velocity.get(p.name)
        if v is None:
            v = np.zeros_like(p.data)
            state.velocity[p.name] = v
        v *= state.momentum
        v -= state.learning_rate * g
        p.data += v
