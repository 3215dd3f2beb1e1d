"""Two-stage optimisation.

Stage 1 trains blocks, routers, stem and head end to end on the relaxed
network with the full regularised objective.  Stage 2 freezes the routers
and finetunes the rest under hard run/skip gating with cross entropy only.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from codinet import ops
from codinet.data import BatchSpec, Sample, epoch_batches, normalize, prefetch
from codinet.losses import RegularizerConfig, codinet_objective
from codinet.network import DynamicNet
from codinet.optim import SGD
from codinet.rng import Rng
from codinet.tensor import backward

logger = logging.getLogger(__name__)

COST_UNITS = ("fraction", "gmacc", "macc")


class TrainingDivergence(FloatingPointError):
    """A loss component became NaN or infinite."""


@dataclass
class TrainConfig:
    epochs_stage1: int = 30
    epochs_stage2: Optional[int] = None  # None: 20% of stage 1, rounded
    lr: float = 0.1
    milestones: Tuple[int, ...] = (150, 200)
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    L: int = 8
    M: int = 4
    seed: int = 0
    reg: RegularizerConfig = field(default_factory=RegularizerConfig)
    cost_unit: str = "fraction"
    hflip: bool = True
    mean: Tuple[float, ...] = (0.0,)
    std: Tuple[float, ...] = (1.0,)
    prefetch: int = 0

    def __post_init__(self):
        if self.epochs_stage1 < 0 or (self.epochs_stage2 is not None and self.epochs_stage2 < 0):
            raise ValueError("train.epochs_stage1 / train.epochs_stage2 must be non-negative")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"train.milestones must be strictly increasing, got {self.milestones}")
        if not 0.0 <= self.momentum < 1.0 or self.weight_decay < 0:
            raise ValueError("train.momentum must lie in [0, 1) and train.weight_decay must be non-negative")
        if not self.lr > 0:
            raise ValueError("train.lr must be positive")
        if self.cost_unit not in COST_UNITS:
            raise ValueError(f"loss.cost_unit must be one of {COST_UNITS}")
        if self.L < 1 or self.M < 1:
            raise ValueError(f"train.L and train.M must be >= 1, got {self.L}, {self.M}")

    @property
    def batch(self) -> BatchSpec:
        return BatchSpec(self.L, self.M)

    @property
    def stage2_epochs(self) -> int:
        if self.epochs_stage2 is not None:
            return self.epochs_stage2
        return int(round(0.2 * self.epochs_stage1))


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Multi-step schedule: ``lr * decay ** (#milestones <= epoch)``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    passed = sum(1 for m in cfg.milestones if m <= epoch)
    return cfg.lr * cfg.lr_decay**passed


@dataclass
class EpochRecord:
    stage: int
    epoch: int
    lr: float
    loss: dict
    train_acc: float
    val_acc: Optional[float]
    mean_gate: List[float]
    mean_cost_gmacc: Optional[float]
    wall_time: float = 0.0

    def to_json(self, include_time: bool = False) -> dict:
        out = asdict(self)
        if not include_time:
            out.pop("wall_time")
        return out


@dataclass
class TrainReport:
    records: List[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def wall_time(self) -> float:
        return sum(r.wall_time for r in self.records)


@dataclass
class Evaluation:
    accuracy: float
    mean_cost_maccs: float
    paths: np.ndarray
    relaxed: np.ndarray
    probs: np.ndarray
    costs: np.ndarray
    predictions: np.ndarray


def evaluate(net: DynamicNet, samples: Sequence[Sample], mean=(0.0,), std=(1.0,), batch_size: int = 256) -> Evaluation:
    """Hard-gated inference over ``samples`` in order."""
    paths, relaxed, probs, costs = [], [], [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        x = normalize(np.stack([s.image for s in chunk]), mean, std).astype(net.dtype)
        out = net.forward_binary(x)
        paths.append(out.paths)
        relaxed.append(out.relaxed)
        probs.append(ops.softmax(out.logits).data.astype(np.float64))
        costs.append(out.costs)
    n = net.depth
    if not samples:
        k = net.spec.num_classes
        return Evaluation(0.0, 0.0, np.zeros((0, n), np.int8), np.zeros((0, n)), np.zeros((0, k)), np.zeros(0, np.int64), np.zeros(0, np.int64))
    probs_arr = np.concatenate(probs)
    preds = probs_arr.argmax(axis=1)
    labels = np.array([s.label for s in samples])
    costs_arr = np.concatenate(costs)
    return Evaluation(
        accuracy=float((preds == labels).mean()),
        mean_cost_maccs=float(costs_arr.mean()),
        paths=np.concatenate(paths),
        relaxed=np.concatenate(relaxed),
        probs=probs_arr,
        costs=costs_arr,
        predictions=preds,
    )


def _check_finite(values: dict, stage: int, epoch: int, step: int) -> None:
    bad = {k: v for k, v in values.items() if not np.isfinite(v)}
    if bad:
        raise TrainingDivergence(f"stage {stage} epoch {epoch} step {step}: non-finite loss {bad}")


def _batches(train: Sequence[Sample], cfg: TrainConfig, rng: Rng):
    it = epoch_batches(train, cfg.batch, rng, hflip=cfg.hflip)
    return prefetch(it, cfg.prefetch) if cfg.prefetch else it


def train_stage1(
    net: DynamicNet,
    train: Sequence[Sample],
    cfg: TrainConfig,
    val: Optional[Sequence[Sample]] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> Tuple[DynamicNet, TrainReport]:
    """End-to-end relaxed training of all parameters under the full objective."""
    report = TrainReport()
    if cfg.epochs_stage1 == 0:
        return net, report
    opt = SGD(net.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    costs = net.cost_table.as_array(cfg.cost_unit)
    root = Rng(cfg.seed).child("stage1")
    L, M = cfg.L, cfg.M
    for epoch in range(cfg.epochs_stage1):
        t0 = time.perf_counter()
        opt.set_lr(lr_at(epoch, cfg))
        erng = root.child("epoch", epoch)
        sums = dict(cls=0.0, con=0.0, div=0.0, cost=0.0, total=0.0)
        gate_sum = np.zeros(net.depth)
        correct = seen = steps = 0
        for step, batch in enumerate(_batches(train, cfg, erng)):
            x = batch.images(cfg.mean, cfg.std).astype(net.dtype)
            y = batch.labels()
            logits, path = net.forward_relaxed(x, rng=erng.child("gumbel", step))
            try:
                breakdown = codinet_objective(logits, y, path, L, M, costs, cfg.reg)
            except FloatingPointError as exc:
                raise TrainingDivergence(f"stage 1 epoch {epoch} step {step}: {exc}") from exc
            opt.zero_grad()
            backward(breakdown.total_tensor)
            opt.step()
            values = breakdown.as_dict()
            _check_finite(values, 1, epoch, step)
            for k in sums:
                sums[k] += values[k]
            gate_sum += path.data.mean(axis=0) if net.depth else 0.0
            correct += int((logits.data.argmax(axis=1) == y).sum())
            seen += len(y)
            steps += 1
        record = _finish_epoch(net, 1, epoch, opt.state.lr, sums, gate_sum, steps, correct, seen, val, cfg, t0)
        report.records.append(record)
        if on_epoch:
            on_epoch(record)
    return net, report


def finetune_stage2(
    net: DynamicNet,
    train: Sequence[Sample],
    cfg: TrainConfig,
    val: Optional[Sequence[Sample]] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
    epoch_offset: Optional[int] = None,
) -> Tuple[DynamicNet, TrainReport]:
    """Router-frozen finetuning under deterministic hard gating (cross entropy only).

    The learning rate follows the schedule at the global epoch
    ``epoch_offset + e`` (``epoch_offset`` defaults to ``cfg.epochs_stage1``).
    """
    report = TrainReport()
    epochs = cfg.stage2_epochs
    if epochs == 0:
        return net, report
    offset = cfg.epochs_stage1 if epoch_offset is None else epoch_offset
    opt = SGD(net.backbone_parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    root = Rng(cfg.seed).child("stage2")
    for e in range(epochs):
        t0 = time.perf_counter()
        epoch = offset + e
        opt.set_lr(lr_at(epoch, cfg))
        erng = root.child("epoch", e)
        sums = dict(cls=0.0, con=0.0, div=0.0, cost=0.0, total=0.0)
        gate_sum = np.zeros(net.depth)
        correct = seen = steps = 0
        for step, batch in enumerate(_batches(train, cfg, erng)):
            x = batch.images(cfg.mean, cfg.std).astype(net.dtype)
            y = batch.labels()
            out = net.forward_binary(x, track_grad=True)
            loss = ops.cross_entropy(out.logits, y)
            value = float(loss.data)
            _check_finite({"cls": value}, 2, epoch, step)
            opt.zero_grad()
            backward(loss)
            opt.step()
            sums["cls"] += value
            sums["total"] += value
            gate_sum += out.paths.mean(axis=0)
            correct += int((out.logits.data.argmax(axis=1) == y).sum())
            seen += len(y)
            steps += 1
        record = _finish_epoch(net, 2, epoch, opt.state.lr, sums, gate_sum, steps, correct, seen, val, cfg, t0)
        report.records.append(record)
        if on_epoch:
            on_epoch(record)
    return net, report


def _finish_epoch(net, stage, epoch, lr, sums, gate_sum, steps, correct, seen, val, cfg, t0) -> EpochRecord:
    steps = max(steps, 1)
    val_acc = cost = None
    if val:
        ev = evaluate(net, val, cfg.mean, cfg.std)
        val_acc, cost = ev.accuracy, ev.mean_cost_maccs / 1e9
    record = EpochRecord(
        stage=stage,
        epoch=epoch,
        lr=lr,
        loss={k: v / steps for k, v in sums.items()},
        train_acc=correct / max(seen, 1),
        val_acc=val_acc,
        mean_gate=[float(g) for g in gate_sum / steps],
        mean_cost_gmacc=cost,
        wall_time=time.perf_counter() - t0,
    )
    logger.info(
        "stage %d epoch %d lr %.4g loss %.4f train_acc %.3f val_acc %s",
        stage, epoch, lr, record.loss["total"], record.train_acc,
        "-" if val_acc is None else f"{val_acc:.3f}",
    )
    return record


def train_two_stage(net: DynamicNet, train, cfg: TrainConfig, val=None, on_epoch=None) -> Tuple[DynamicNet, TrainReport, TrainReport]:
    net, r1 = train_stage1(net, train, cfg, val, on_epoch)
    net, r2 = finetune_stage2(net, train, cfg, val, on_epoch)
    return net, r1, r2
