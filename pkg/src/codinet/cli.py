"""Command line entry point: ``codinet {train,eval,analyze,sweep}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
divergence, 5 checkpoint error, 6 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Dict, List, Optional, Sequence

import numpy as np

from codinet import analytics
from codinet.analytics import PathLogError
from codinet.checkpoint import CheckpointError
from codinet.config import ConfigError, parse_config, parse_overrides
from codinet.data import EVAL_AUGMENTATIONS, DataError
from codinet.rng import Rng
from codinet.runner import (
    augmented_split,
    eval_summary,
    load_data,
    load_net,
    path_log_from_eval,
    run_training,
    sweep_rows,
)
from codinet.training import TrainingDivergence, evaluate

logger = logging.getLogger("codinet")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4
EXIT_CHECKPOINT = 5
EXIT_IO = 6


def output_dir(flag: Optional[str]) -> str:
    """``--out`` if given, else ``$CODINET_OUT``, else ``./codinet_out``."""
    return flag or os.environ.get("CODINET_OUT") or "codinet_out"


def _write_json(path: str, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_config(args):
    return parse_config(args.config, parse_overrides(args.set or []))


# -- train -----------------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = output_dir(args.out)
    result = run_training(cfg, out)
    s = result.summary
    print(
        f"accuracy {s['accuracy']:.4f}  mean GMACCs {s['mean_gmacc']:.6g}  "
        f"speedup {s['speedup'] or float('inf'):.2f}x  #Path {s['num_paths']}"
    )
    print(f"artifacts written to {out}")
    return EXIT_OK


# -- eval --------------------------------------------------------------------------------------


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    net, cfg, _ = load_net(args.checkpoint, cfg)
    splits = load_data(cfg)
    samples = {"eval": splits.eval, "val": splits.val, "train": splits.train}[args.split]
    suffix = ""
    if args.augment != "identity":
        samples = augmented_split(samples, args.augment, cfg["train.seed"])
        suffix = f"_{args.augment}"
    ev = evaluate(net, samples, cfg.train.mean, cfg.train.std)
    log = path_log_from_eval(ev, samples)
    out = output_dir(args.out)
    os.makedirs(out, exist_ok=True)
    analytics.export_path_log(log, os.path.join(out, f"path_log{suffix}.tsv"))
    summary = eval_summary(net, ev, log)
    summary["augment"] = args.augment
    summary["split"] = args.split
    _write_json(os.path.join(out, f"eval_summary{suffix}.json"), summary)
    if args.features:
        write_features(os.path.join(out, f"features{suffix}.csv"), samples)
    print(f"accuracy {summary['accuracy']:.4f}  mean GMACCs {summary['mean_gmacc']:.6g}  #Path {summary['num_paths']}")
    return EXIT_OK


def write_features(path: str, samples) -> None:
    """One comma-separated row of raw pixel values per sample, in path-log order."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(",".join(f"{v:.6g}" for v in s.image.ravel()) + "\n")


def read_features(path: str) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([float(v) for v in line.split(",")])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    if rows and len({len(r) for r in rows}) != 1:
        raise DataError(f"{path}: rows have different lengths")
    return np.array(rows, dtype=np.float64)


# -- analyze ---------------------------------------------------------------------------------


def analyze_log(log, features: Optional[np.ndarray] = None, augmented=None, seed: int = 0, max_pairs: int = 100_000) -> dict:
    """Analytics report for one path log (optionally paired with an augmented log)."""
    report: dict = {"records": len(log), "n": log.n, "num_classes": log.num_classes, "notices": []}
    if len(log) == 0:
        report["notices"].append("empty log")
        return report
    report["num_paths"] = analytics.unique_path_count(log)
    report["path_histogram"] = analytics.path_histogram(log)
    runs = [analytics.expected_run_count(r.relaxed) for r in log.records]
    report["mean_expected_runs"] = float(np.mean(runs))
    report["expected_run_histogram"] = analytics.run_count_histogram(log)
    labels = np.array([r.label for r in log.records])
    preds = log.probs().argmax(axis=1)
    report["accuracy"] = float((labels == preds).mean())
    report["mean_cost_macc"] = float(np.mean([r.cost for r in log.records]))
    if features is not None:
        if len(features) != len(log):
            raise DataError(f"feature file has {len(features)} rows for {len(log)} log records")
        sim = analytics.similarity_report(features, log.paths(), Rng(seed).child("pcc"), max_pairs)
        report["pcc"] = sim.pcc
        report["pcc_pairs"] = sim.pairs
        if sim.notice:
            report["notices"].append(sim.notice)
        report["_scatter"] = (sim.feature_cos, sim.path_cos)
    elif len(log) < 2:
        report["notices"].append("PCC skipped: fewer than two records")
    if augmented is not None:
        report["prediction_kl_nats"] = analytics.mean_prediction_kl(log, augmented)
        report["path_distribution_kl_nats"] = analytics.path_distribution_kl(log, augmented)
        report["path_consistency_rate"] = analytics.path_match_rate(log, augmented)
    return report


def _write_rows(path: str, header: Sequence[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


COMPARE_KEYS = ("accuracy", "num_paths", "mean_expected_runs", "mean_cost_macc", "pcc", "prediction_kl_nats", "path_distribution_kl_nats", "path_consistency_rate")


def cmd_analyze(args) -> int:
    log = analytics.parse_path_log(args.log)
    features = read_features(args.features) if args.features else None
    augmented = analytics.parse_path_log(args.augmented_log) if args.augmented_log else None
    out = output_dir(args.out)
    os.makedirs(out, exist_ok=True)
    report = analyze_log(log, features, augmented)
    scatter = report.pop("_scatter", None)
    if args.compare:
        other = analytics.parse_path_log(args.compare)
        other_aug = analytics.parse_path_log(args.compare_augmented) if args.compare_augmented else None
        other_report = analyze_log(other, features if features is not None and len(features) == len(other) else None, other_aug)
        other_report.pop("_scatter", None)
        report["comparison"] = {
            "columns": ["metric", "log", "compare"],
            "rows": [[k, report.get(k), other_report.get(k)] for k in COMPARE_KEYS],
        }
        _write_rows(os.path.join(out, "comparison.csv"), ["metric", "log", "compare"], report["comparison"]["rows"])
    _write_json(os.path.join(out, "analysis.json"), report)
    if len(log):
        _write_rows(os.path.join(out, "path_histogram.csv"), ["path", "count"], report["path_histogram"].items())
        hist = report["expected_run_histogram"]
        _write_rows(os.path.join(out, "run_count_histogram.csv"), ["bin_lo", "bin_hi", "count"],
                    zip(hist["edges"][:-1], hist["edges"][1:], hist["counts"]))
        analytics.export_projection(log, os.path.join(out, "projection.csv"))
    if scatter is not None:
        _write_rows(os.path.join(out, "pcc_scatter.csv"), ["feature_cos", "path_cos"], zip(*scatter))
    for note in report["notices"]:
        print(f"notice: {note}")
    print(f"#Path {report.get('num_paths', 0)}  PCC {report.get('pcc')}  report in {out}")
    return EXIT_OK


# -- sweep ---------------------------------------------------------------------------------


def _sweep_one(job) -> dict:
    config_text, overrides, out = job
    cfg = parse_config(text=config_text, overrides=overrides)
    return run_training(cfg, out).summary


def cmd_sweep(args) -> int:
    gammas = [float(g) for g in args.gammas.split(",") if g.strip()]
    if len(gammas) < 2:
        raise ConfigError("sweep needs at least two gamma values")
    base = _load_config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base["train.seed"]]
    out = output_dir(args.out)
    os.makedirs(out, exist_ok=True)
    jobs = []
    for gamma in gammas:
        for seed in seeds:
            overrides = {"loss.gamma": repr(gamma), "train.seed": str(seed)}
            jobs.append((base.to_text(), overrides, os.path.join(out, f"gamma{gamma:g}_seed{seed}")))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            summaries = list(pool.map(_sweep_one, jobs))
    else:
        summaries = [_sweep_one(job) for job in jobs]
    results: Dict[float, List[dict]] = {}
    for (_, overrides, _), summary in zip(jobs, summaries):
        results.setdefault(float(overrides["loss.gamma"]), []).append(summary)
    rows = sweep_rows(results)
    costs = [r["mean_gmacc"] for r in rows]
    report = {
        "rows": rows,
        "cost_non_increasing": all(b <= a for a, b in zip(costs, costs[1:])),
    }
    _write_json(os.path.join(out, "sweep.json"), report)
    _write_rows(os.path.join(out, "sweep.csv"), ["gamma", "mean_gmacc", "speedup", "accuracy", "num_paths"],
                [[r["gamma"], r["mean_gmacc"], r["speedup"], r["accuracy"], r["num_paths"]] for r in rows])
    for r in rows:
        speed = "-" if r["speedup"] is None else f"{r['speedup']:.2f}x"
        print(f"gamma {r['gamma']:<6g} GMACCs {r['mean_gmacc']:.6g}  speedup {speed}  acc {r['accuracy']:.4f}")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="codinet", description="Dynamic routing with path consistency and diversity.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("--out", help="output directory (default: $CODINET_OUT or ./codinet_out)")

    p = sub.add_parser("train", help="two-stage training")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="hard-gated evaluation and path log export")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("eval", "val", "train"), default="eval")
    p.add_argument("--augment", choices=EVAL_AUGMENTATIONS, default="identity")
    p.add_argument("--features", action="store_true", help="also write raw-pixel feature rows")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="path-distribution analytics for a path log")
    p.add_argument("--log", required=True)
    p.add_argument("--features", help="feature rows aligned with the log records")
    p.add_argument("--augmented-log", help="path log of augmented copies of the same samples")
    p.add_argument("--compare", help="second path log for a paired comparison")
    p.add_argument("--compare-augmented", help="augmented path log matching --compare")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="train one model per gamma and tabulate cost/accuracy")
    common(p)
    p.add_argument("--gammas", required=True, help="comma-separated gamma values")
    p.add_argument("--seeds", help="comma-separated seeds (default: train.seed)")
    p.add_argument("--jobs", type=int, default=1, help="parallel training processes")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, PathLogError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
