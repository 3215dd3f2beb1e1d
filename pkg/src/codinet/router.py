"""Per-block run/skip routers and their Gumbel-Softmax relaxation.

A router pools its block's input over space, applies FC-ReLU-FC to get two
logits ``(skip, run)``, and turns them into a relaxed gate ``v`` in (0, 1)
and a hard decision ``u`` in {0, 1}.  The raw FC outputs are treated as
logits: ``log_softmax(logits)`` supplies the log-probabilities that the
Gumbel perturbation is added to.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from codinet import ops
from codinet.rng import Rng
from codinet.tensor import DimensionError, Tensor

VARIANTS = ("reparameterized", "straight-through")


@dataclass(frozen=True)
class GumbelConfig:
    temperature: float = 1.0
    variant: str = "reparameterized"
    inference_noise: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"gumbel.temperature must be positive, got {self.temperature}")
        if self.variant not in VARIANTS:
            raise ValueError(f"gumbel.variant must be one of {VARIANTS}, got {self.variant!r}")


class RouterParams:
    """Weights of one router: ``W1`` is ``(d, C)``, ``W2`` is ``(2, d)``."""

    def __init__(self, channels: int, hidden: int = 16, rng: Optional[Rng] = None, dtype=np.float64):
        if rng is None:
            w1 = np.zeros((hidden, channels), dtype)
            w2 = np.zeros((2, hidden), dtype)
        else:
            w1 = (rng.child("w1").normal((hidden, channels)) * np.sqrt(2.0 / channels)).astype(dtype)
            w2 = (rng.child("w2").normal((2, hidden)) * np.sqrt(1.0 / hidden)).astype(dtype)
        self.w1 = Tensor(w1, requires_grad=True, name="w1")
        self.b1 = Tensor(np.zeros(hidden, dtype), requires_grad=True, name="b1")
        self.w2 = Tensor(w2, requires_grad=True, name="w2")
        self.b2 = Tensor(np.zeros(2, dtype), requires_grad=True, name="b2")

    @property
    def channels(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def named_parameters(self) -> Dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def macc(self) -> int:
        return self.hidden * self.channels + 2 * self.hidden


@dataclass
class RouterTrace:
    """Intermediate values of one router evaluation (batched along axis 0 when the input is)."""

    z: Tensor
    logits: Tensor
    probs: Tensor
    v: Optional[Tensor] = None
    u: Optional[np.ndarray] = None
    noise: Optional[np.ndarray] = None


def router_forward(params: RouterParams, a: Tensor) -> RouterTrace:
    """Pool, FC-ReLU-FC, softmax.  Dense (vector) activations skip the pooling."""
    if a.ndim in (3, 4):
        z = ops.global_avg_pool(a)
    elif a.ndim in (1, 2):
        z = a
    else:
        raise DimensionError(f"router input must be 1-4 dimensional, got {a.shape}")
    if z.shape[-1] != params.channels:
        raise DimensionError(f"router expects {params.channels} channels, got {z.shape[-1]}")
    hidden = ops.relu(ops.linear(z, params.w1, params.b1))
    logits = ops.linear(hidden, params.w2, params.b2)
    return RouterTrace(z=z, logits=logits, probs=ops.softmax(logits))


def gumbel_relax(
    trace: RouterTrace,
    cfg: GumbelConfig,
    rng: Optional[Rng] = None,
    noise: Optional[np.ndarray] = None,
) -> Tensor:
    """Relaxed gate ``v = softmax((log probs + g) / T)[1]``.

    Noise is taken from ``noise`` if given (shape ``logits.shape``), else drawn
    from ``rng``; with neither, the relaxation is noiseless.  The
    straight-through variant outputs ``1[v >= 0.5]`` forward and routes the
    relaxed gradient backward.
    """
    logp = ops.log_softmax(trace.logits)
    if noise is None and rng is not None:
        noise = rng.gumbel(trace.logits.shape)
    if noise is not None:
        noise = np.asarray(noise, dtype=logp.dtype)
        if noise.shape != trace.logits.shape:
            raise DimensionError(f"noise shape {noise.shape} != logits shape {trace.logits.shape}")
        perturbed = logp + Tensor(noise)
    else:
        noise = np.zeros(trace.logits.shape, dtype=logp.dtype)
        perturbed = logp
    if cfg.temperature != 1.0:
        perturbed = perturbed * (1.0 / cfg.temperature)
    v = ops.softmax(perturbed)[..., 1]
    if cfg.variant == "straight-through":
        v = ops.straight_through(v.data >= 0.5, v)
    trace.v = v
    trace.noise = noise
    return v


def hard_decision(trace: RouterTrace) -> np.ndarray:
    """``argmax`` over the two logits; an exact tie runs the block."""
    logits = trace.logits.data
    u = (logits[..., 1] >= logits[..., 0]).astype(np.int8)
    trace.u = u
    return u
