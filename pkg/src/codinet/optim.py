"""SGD with classic momentum and L2 weight decay folded into the gradient."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from codinet.tensor import Tensor


@dataclass
class SgdState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")


def sgd_update(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: SgdState) -> Sequence[Tensor]:
    """One in-place step.

    ``g' = grad + wd * param``; ``velocity = momentum * velocity + g'``;
    ``param -= lr * velocity``.  A ``None`` gradient counts as zero.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} gradients")
    if not state.velocity:
        state.velocity = [np.zeros_like(p.data) for p in params]
    if len(state.velocity) != len(params):
        raise ValueError("velocity buffers do not match the parameter list")
    for p, g, v in zip(params, grads, state.velocity):
        if v.shape != p.shape:
            raise ValueError(f"velocity shape {v.shape} != parameter shape {p.shape}")
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        step = g + state.weight_decay * p.data if state.weight_decay else g
        v *= state.momentum
        v += step
        p.data -= state.lr * v
    return params


class SGD:
    """Thin owner of a parameter list and its :class:`SgdState`."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = list(params)
        self.state = SgdState(lr=lr, momentum=momentum, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        sgd_update(self.params, [p.grad for p in self.params], self.state)

    def set_lr(self, lr: float) -> None:
        if not lr > 0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.state.lr = lr
