"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from codinet.rng import Rng
from codinet.tensor import Tensor, backward, no_grad


def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return np.abs(a - b) / denom


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_entries: Optional[int] = None,
    rng: Optional[Rng] = None,
) -> float:
    """Maximum elementwise relative error between backprop and central differences.

    ``f`` must rebuild its graph on every call and be deterministic (fix any
    random draws outside of it).  With ``max_entries`` set, that many entries
    per parameter are probed, chosen by ``rng``.
    """
    for p in params:
        p.grad = None
    backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    sampler = rng or Rng(0, 0)
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(sampler.generator.choice(flat.size, size=max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            worst = max(worst, float(relative_error(ga.reshape(-1)[i], numeric)))
    for p in params:
        p.grad = None
    return worst
