"""Training objectives: classification, path consistency, path diversity, cost."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from codinet import ops
from codinet.network import group_center
from codinet.tensor import DimensionError, Tensor


@dataclass(frozen=True)
class RegularizerConfig:
    alpha: float = 0.2
    beta: float = 0.2
    gamma: float = 0.0
    m_c: float = 0.2
    m_d: float = 0.5

    def __post_init__(self):
        for key in ("alpha", "beta", "gamma", "m_c", "m_d"):
            if getattr(self, key) < 0:
                raise ValueError(f"loss.{key} must be non-negative, got {getattr(self, key)}")


@dataclass
class LossBreakdown:
    cls: float
    con: float
    div: float
    cost: float
    total: float
    centers: Optional[np.ndarray] = None
    total_tensor: Optional[Tensor] = None

    def as_dict(self) -> dict:
        return {"cls": self.cls, "con": self.con, "div": self.div, "cost": self.cost, "total": self.total}


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def consistency_loss(paths, m_c: float) -> Tensor:
    """Squared hinge on each member's distance to its group center.

    Args:
        paths: ``(L, M, n)`` relaxed paths, group-major.
        m_c: consistency margin.
    """
    paths = _as_tensor(paths)
    if paths.ndim != 3:
        raise DimensionError(f"consistency_loss expects (L, M, n) paths, got {paths.shape}")
    n_groups, n_members = paths.shape[:2]
    if n_groups < 1 or n_members < 1:
        raise ValueError("need at least one group with at least one member")
    centers = group_center(paths)
    dist = ops.l2_norm(paths - centers.reshape(n_groups, 1, -1), axis=-1)
    hinge = ops.relu(dist - m_c)
    return (hinge * hinge).sum() * (1.0 / (n_groups * n_members))


def diversity_loss(centers, m_d: float) -> Tensor:
    """Squared hinge pushing every ordered pair of group centers at least ``m_d`` apart.

    Fewer than two groups gives no pairs; the loss is then 0 with a warning.
    """
    centers = _as_tensor(centers)
    if centers.ndim != 2:
        raise DimensionError(f"diversity_loss expects (L, n) centers, got {centers.shape}")
    n_groups = centers.shape[0]
    if n_groups < 2:
        warnings.warn("diversity_loss needs at least two groups; returning 0", RuntimeWarning, stacklevel=2)
        return centers.sum() * 0.0
    diff = centers.reshape(n_groups, 1, -1) - centers.reshape(1, n_groups, -1)
    dist = ops.l2_norm(diff, axis=-1)
    hinge = ops.relu(m_d - dist) * Tensor(1.0 - np.eye(n_groups, dtype=centers.dtype))
    return (hinge * hinge).sum() * (1.0 / (n_groups * (n_groups - 1)))


def cost_loss(path, costs) -> Tensor:
    """``sum_k c_k v_k`` averaged over the batch.

    ``path`` is ``(n,)`` or ``(N, n)``; ``costs`` is a length-``n`` sequence.
    """
    path = _as_tensor(path)
    c = np.asarray(costs, dtype=path.dtype)
    if path.shape[-1] != c.shape[0]:
        raise DimensionError(f"path length {path.shape[-1]} != cost table length {c.shape[0]}")
    per_item = (path * Tensor(c)).sum(axis=-1)
    return per_item.mean() if path.ndim == 2 else per_item


def total_loss(cls, con, div, cost, cfg: RegularizerConfig, centers=None) -> LossBreakdown:
    """Weighted sum ``cls + alpha con + beta div + gamma cost``."""
    cls, con, div, cost = (_as_tensor(t) for t in (cls, con, div, cost))
    parts = [float(t.data) for t in (cls, con, div, cost)]
    if not all(np.isfinite(parts)):
        raise FloatingPointError(f"non-finite loss component: cls={parts[0]}, con={parts[1]}, div={parts[2]}, cost={parts[3]}")
    total = cls
    for weight, term in ((cfg.alpha, con), (cfg.beta, div), (cfg.gamma, cost)):
        if weight:
            total = total + term * weight
    centers_arr = None
    if centers is not None:
        centers_arr = np.array(centers.data if isinstance(centers, Tensor) else centers)
    return LossBreakdown(
        cls=parts[0],
        con=parts[1],
        div=parts[2],
        cost=parts[3],
        total=float(total.data),
        centers=centers_arr,
        total_tensor=total,
    )


def codinet_objective(logits: Tensor, labels, path: Tensor, n_groups: int, n_members: int, costs, cfg: RegularizerConfig) -> LossBreakdown:
    """Full training objective for a group-major batch of ``n_groups * n_members`` items."""
    cls = ops.cross_entropy(logits, labels)
    grouped = path.reshape(n_groups, n_members, path.shape[-1])
    centers = group_center(grouped)
    con = consistency_loss(grouped, cfg.m_c)
    if n_groups >= 2:
        div = diversity_loss(centers, cfg.m_d)
    else:
        div = Tensor(0.0)
    cost = cost_loss(path, costs)
    return total_loss(cls, con, div, cost, cfg, centers=centers)
