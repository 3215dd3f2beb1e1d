"""Experiment orchestration shared by the CLI and the acceptance suite."""

from __future__ import annotations

import glob
import json
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from codinet.analytics import (
    PathLog,
    cost_report,
    mean_prediction_kl,
    path_distribution_kl,
    path_match_rate,
    run_count_histogram,
    similarity_report,
    unique_path_count,
)
from codinet.checkpoint import Checkpoint, CheckpointError, load_checkpoint, net_arrays, restore_parameters, save_checkpoint
from codinet.config import Config, parse_config
from codinet.data import DataError, Sample, eval_augment, load_cifar10_binary, split, synthetic_dataset
from codinet.network import DynamicNet
from codinet.rng import Rng
from codinet.training import EpochRecord, Evaluation, evaluate, finetune_stage2, train_stage1


@dataclass
class Splits:
    train: List[Sample]
    val: List[Sample]
    eval: List[Sample]


def load_data(cfg: Config) -> Splits:
    """Build train/val/eval splits from the ``data.*`` section."""
    v = cfg.values
    net = cfg.net
    if v["data.source"] == "synthetic":
        if net.kind != "conv":
            raise DataError("the synthetic image generator needs a conv network")
        samples = synthetic_dataset(net.num_classes, v["data.per_class"], tuple(net.input_shape), Rng(v["data.seed"]).child("data"), noise=v["data.noise"])
        train, val = split(samples, v["data.val_fraction"], Rng(v["data.seed"]).child("split"))
        return Splits(train, val, val)
    root = v["data.root"]
    if not root or not os.path.isdir(root):
        raise DataError(f"data.root {root!r} is not a directory")
    train_files = sorted(glob.glob(os.path.join(root, "data_batch_*.bin")))
    if not train_files:
        raise DataError(f"no data_batch_*.bin files under {root}")
    samples: List[Sample] = []
    for path in train_files:
        for s in load_cifar10_binary(path):
            samples.append(Sample(id=len(samples), image=s.image, label=s.label))
    train, val = split(samples, v["data.val_fraction"], Rng(v["data.seed"]).child("split"))
    test_path = os.path.join(root, "test_batch.bin")
    test = load_cifar10_binary(test_path) if os.path.exists(test_path) else val
    return Splits(train, val, test)


def build_net(cfg: Config) -> DynamicNet:
    return DynamicNet(cfg.net, seed=cfg["train.seed"], gumbel=cfg.gumbel, dtype=cfg.dtype)


def save_net(path: str, net: DynamicNet, cfg: Config, epoch: int) -> None:
    save_checkpoint(path, net_arrays(net), cfg.to_text(), epoch=epoch, rng_seed=cfg["train.seed"], rng_stream=0)


def load_net(checkpoint_path: str, cfg: Optional[Config] = None) -> Tuple[DynamicNet, Config, Checkpoint]:
    """Rebuild the network stored in a checkpoint.

    With ``cfg`` given, its ``net``/``router``/``train.precision`` settings must
    agree with the checkpoint's config snapshot.
    """
    ckpt = load_checkpoint(checkpoint_path)
    stored = parse_config(text=ckpt.config_text)
    if cfg is not None:
        keys = [k for k in stored.values if k.startswith(("net.", "router.")) or k == "train.precision"]
        diff = [k for k in keys if stored[k] != cfg[k]]
        if diff:
            raise CheckpointError(f"config does not match checkpoint for {diff}")
    use = cfg or stored
    net = DynamicNet(use.net, seed=use["train.seed"], gumbel=use.gumbel, dtype=use.dtype)
    restore_parameters(net, ckpt)
    return net, use, ckpt


def path_log_from_eval(ev: Evaluation, samples: Sequence[Sample]) -> PathLog:
    return PathLog.from_arrays(
        ids=[s.id for s in samples],
        labels=[s.label for s in samples],
        paths=ev.paths,
        relaxed=ev.relaxed,
        costs=ev.costs,
        probs=ev.probs,
    )


def eval_summary(net: DynamicNet, ev: Evaluation, log: PathLog) -> dict:
    rep = cost_report(log, net.cost_table)
    expected = [float(np.sum(r.relaxed)) for r in log.records]
    return {
        "samples": len(log),
        "accuracy": ev.accuracy,
        "mean_gmacc": rep.mean_gmacc,
        "full_gmacc": rep.full_gmacc,
        "speedup": rep.speedup if np.isfinite(rep.speedup) else None,
        "num_paths": unique_path_count(log) if len(log) else 0,
        "mean_expected_runs": float(np.mean(expected)) if expected else None,
        "expected_run_histogram": run_count_histogram(log),
    }


@dataclass
class RunResult:
    net: DynamicNet
    cfg: Config
    splits: Splits
    records: List[EpochRecord]
    stage1_eval: Optional[Evaluation]
    final_eval: Evaluation
    summary: dict


def run_training(cfg: Config, out_dir: Optional[str] = None, splits: Optional[Splits] = None) -> RunResult:
    """Stage 1, stage 2, final evaluation; writes artifacts when ``out_dir`` is set.

    Artifacts: ``metrics.jsonl`` (one line per epoch, no timings),
    ``checkpoint.ckpt``, ``summary.json``, ``config.txt``.
    """
    splits = splits or load_data(cfg)
    net = build_net(cfg)
    tcfg = cfg.train
    records: List[EpochRecord] = []
    metrics_fh = None
    every = cfg["train.checkpoint_every"]
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
            fh.write(cfg.to_text())
        metrics_fh = open(os.path.join(out_dir, "metrics.jsonl"), "w", encoding="utf-8")

    def on_epoch(record: EpochRecord) -> None:
        records.append(record)
        if metrics_fh:
            metrics_fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")
            metrics_fh.flush()
        if out_dir and every and (record.epoch + 1) % every == 0:
            save_net(os.path.join(out_dir, f"checkpoint_epoch{record.epoch + 1:04d}.ckpt"), net, cfg, record.epoch + 1)

    try:
        train_stage1(net, splits.train, tcfg, splits.val, on_epoch)
        stage1_eval = evaluate(net, splits.eval, tcfg.mean, tcfg.std) if tcfg.stage2_epochs else None
        routers_before = [p.data.copy() for p in net.router_parameters()]
        finetune_stage2(net, splits.train, tcfg, splits.val, on_epoch)
        routers_frozen = all(np.array_equal(a, p.data) for a, p in zip(routers_before, net.router_parameters()))
    finally:
        if metrics_fh:
            metrics_fh.close()
    final = evaluate(net, splits.eval, tcfg.mean, tcfg.std)
    log = path_log_from_eval(final, splits.eval)
    summary = eval_summary(net, final, log)
    summary.update(
        {
            "epochs_stage1": tcfg.epochs_stage1,
            "epochs_stage2": tcfg.stage2_epochs,
            "gamma": tcfg.reg.gamma,
            "seed": tcfg.seed,
            "stage1_accuracy": None if stage1_eval is None else stage1_eval.accuracy,
            "routers_frozen_in_stage2": routers_frozen,
            "wall_time_s": sum(r.wall_time for r in records),
        }
    )
    if out_dir:
        save_net(os.path.join(out_dir, "checkpoint.ckpt"), net, cfg, tcfg.epochs_stage1 + tcfg.stage2_epochs)
        with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
    return RunResult(net, cfg, splits, records, stage1_eval, final, summary)


def augmented_split(samples: Sequence[Sample], kind: str, seed: int) -> List[Sample]:
    rng = Rng(seed).child("eval-augment", kind)
    return [eval_augment(s, kind, rng.child(s.id)) for s in samples]


@dataclass
class AugmentationProbe:
    consistency_rate: float
    prediction_kl: float
    path_distribution_kl: float
    pcc: Optional[float]
    pcc_notice: str


def augmentation_probe(net: DynamicNet, samples: Sequence[Sample], cfg: Config, kind: str = "mixed", seed: Optional[int] = None) -> AugmentationProbe:
    """Compare hard routing on ``samples`` against one augmented copy of each.

    PCC relates raw-pixel cosine similarity to path cosine similarity over
    the original samples.
    """
    seed = cfg["train.seed"] if seed is None else seed
    mean, std = tuple(cfg["data.mean"]), tuple(cfg["data.std"])
    original = path_log_from_eval(evaluate(net, samples, mean, std), samples)
    augmented_samples = augmented_split(samples, kind, seed)
    augmented = path_log_from_eval(evaluate(net, augmented_samples, mean, std), augmented_samples)
    features = np.stack([s.image.ravel() for s in samples])
    sim = similarity_report(features, original.paths(), Rng(seed).child("pcc"))
    return AugmentationProbe(
        consistency_rate=path_match_rate(original, augmented),
        prediction_kl=mean_prediction_kl(original, augmented),
        path_distribution_kl=path_distribution_kl(original, augmented),
        pcc=sim.pcc,
        pcc_notice=sim.notice,
    )


def sweep_rows(results: Dict[float, List[dict]]) -> List[dict]:
    """One row per gamma (ascending): seed-averaged cost, speedup and accuracy."""
    rows = []
    for gamma in sorted(results):
        runs = results[gamma]
        mean_cost = float(np.mean([r["mean_gmacc"] for r in runs]))
        full = runs[0]["full_gmacc"]
        rows.append(
            {
                "gamma": gamma,
                "seeds": [r["seed"] for r in runs],
                "mean_gmacc": mean_cost,
                "speedup": full / mean_cost if mean_cost > 0 else None,
                "accuracy": float(np.mean([r["accuracy"] for r in runs])),
                "num_paths": float(np.mean([r["num_paths"] for r in runs])),
                "per_seed": [{k: r[k] for k in ("seed", "mean_gmacc", "accuracy", "num_paths")} for r in runs],
            }
        )
    return rows
