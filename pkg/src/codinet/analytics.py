"""Diagnostics of the routing-path distribution.

Everything here is a pure function of a :class:`PathLog` (or of feature and
path arrays), except :func:`consistency_match_rate`, which runs a network.
"""

from __future__ import annotations

import math
import os
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from codinet.blocks import CostTable
from codinet.data import Sample, eval_augment
from codinet.rng import Rng

RELAXED_DECIMALS = 6
KL_EPS = 1e-12


class UndefinedCorrelation(ValueError):
    """Pearson correlation requested for a constant sequence."""


class PathLogError(ValueError):
    """Malformed path-log content."""


@dataclass
class PathRecord:
    id: int
    label: int
    bits: str
    relaxed: Tuple[float, ...]
    cost: int
    probs: Tuple[float, ...]

    @property
    def path(self) -> np.ndarray:
        return np.frombuffer(self.bits.encode("ascii"), dtype=np.uint8) - ord("0")


@dataclass
class PathLog:
    n: int
    num_classes: int
    records: List[PathRecord]

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise PathLogError("duplicate sample ids in path log")
        for r in self.records:
            if len(r.bits) != self.n or len(r.relaxed) != self.n:
                raise PathLogError(f"record {r.id}: path length differs from n={self.n}")
            if set(r.bits) - {"0", "1"}:
                raise PathLogError(f"record {r.id}: bitstring {r.bits!r} is not binary")
            if len(r.probs) != self.num_classes or abs(sum(r.probs) - 1.0) > 1e-9:
                raise PathLogError(f"record {r.id}: prediction distribution invalid")

    def __len__(self) -> int:
        return len(self.records)

    def paths(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, self.n), dtype=np.int8)
        return np.stack([r.path for r in self.records]).astype(np.int8)

    def relaxed(self) -> np.ndarray:
        return np.array([r.relaxed for r in self.records], dtype=np.float64).reshape(-1, self.n)

    def probs(self) -> np.ndarray:
        return np.array([r.probs for r in self.records], dtype=np.float64).reshape(-1, self.num_classes)

    def by_id(self) -> Dict[int, PathRecord]:
        return {r.id: r for r in self.records}

    @classmethod
    def from_arrays(cls, ids, labels, paths, relaxed, costs, probs) -> "PathLog":
        """Build a log, rounding relaxed values to the exported precision."""
        paths = np.asarray(paths)
        n = paths.shape[1] if paths.ndim == 2 else 0
        probs = np.asarray(probs, dtype=np.float64)
        k = probs.shape[1] if probs.ndim == 2 else 0
        records = []
        for i in range(len(ids)):
            p = probs[i] / probs[i].sum()
            records.append(
                PathRecord(
                    id=int(ids[i]),
                    label=int(labels[i]),
                    bits="".join(str(int(b)) for b in paths[i]),
                    relaxed=tuple(round(float(v), RELAXED_DECIMALS) for v in relaxed[i]),
                    cost=int(costs[i]),
                    probs=tuple(float(v) for v in p),
                )
            )
        return cls(n=n, num_classes=k, records=records)


# -- counts -----------------------------------------------------------------------------


def unique_path_count(log: PathLog) -> int:
    """Number of distinct binary routing paths used."""
    return len({r.bits for r in log.records})


def path_histogram(log: PathLog) -> Dict[str, int]:
    return dict(Counter(r.bits for r in log.records).most_common())


def expected_run_count(path: Sequence[float]) -> float:
    """Expected number of executed blocks under a relaxed path."""
    return float(np.sum(np.asarray(path, dtype=np.float64)))


def run_count_histogram(log: PathLog, bins: int = 0) -> Dict[str, list]:
    """Histogram of expected run counts; ``bins=0`` uses one unit-width bin per block count."""
    values = np.array([expected_run_count(r.relaxed) for r in log.records])
    edges = np.arange(log.n + 2) - 0.5 if bins <= 0 else np.linspace(0, log.n, bins + 1)
    counts, edges = np.histogram(values, bins=edges)
    return {"edges": edges.tolist(), "counts": counts.tolist()}


# -- divergences and correlations ----------------------------------------------------------


def kl_divergence(p: Sequence[float], q: Sequence[float], eps: float = KL_EPS) -> float:
    """``sum p_i ln((p_i + eps) / (q_i + eps))`` in nats."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"distribution lengths differ: {p.shape} vs {q.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("distributions must be non-negative")
    return float(np.sum(p * np.log((p + eps) / (q + eps))))


def mean_prediction_kl(original: PathLog, augmented: PathLog) -> float:
    """Mean KL(original || augmented) of prediction distributions over shared ids."""
    aug = augmented.by_id()
    vals = [kl_divergence(r.probs, aug[r.id].probs) for r in original.records if r.id in aug]
    if not vals:
        raise PathLogError("logs share no sample ids")
    return float(np.mean(vals))


def path_distribution_kl(original: PathLog, augmented: PathLog) -> float:
    """KL between the path-frequency histograms of two logs (over the union of paths)."""
    ha, hb = path_histogram(original), path_histogram(augmented)
    keys = sorted(set(ha) | set(hb))
    p = np.array([ha.get(k, 0) for k in keys], dtype=np.float64)
    q = np.array([hb.get(k, 0) for k in keys], dtype=np.float64)
    return kl_divergence(p / p.sum(), q / q.sum())


def path_match_rate(original: PathLog, augmented: PathLog) -> float:
    """Fraction of shared ids whose binary paths are identical."""
    aug = augmented.by_id()
    pairs = [(r.bits, aug[r.id].bits) for r in original.records if r.id in aug]
    if not pairs:
        raise PathLogError("logs share no sample ids")
    return sum(a == b for a, b in pairs) / len(pairs)


def consistency_match_rate(net, samples: Sequence[Sample], aug: str, rng: Rng, mean=(0.0,), std=(1.0,)) -> float:
    """Fraction of samples whose hard routing path survives one augmentation unchanged."""
    from codinet.training import evaluate

    if not samples:
        return 1.0
    augmented = [eval_augment(s, aug, rng.child("probe", s.id)) for s in samples]
    a = evaluate(net, samples, mean, std).paths
    b = evaluate(net, augmented, mean, std).paths
    return float(np.mean(np.all(a == b, axis=1)))


def pcc(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Pearson correlation coefficient."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pcc needs two 1-d sequences of equal length")
    if x.size < 2:
        raise ValueError("pcc needs at least two points")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(float(dx @ dx))
    sy = math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelation("zero variance: correlation undefined")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


def cosine_rows(a: np.ndarray, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    """Cosine similarity between rows ``a[i]`` and ``a[j]``."""
    a = np.asarray(a, dtype=np.float64)
    norms = np.linalg.norm(a, axis=1)
    return np.einsum("ij,ij->i", a[i], a[j]) / (norms[i] * norms[j])


@dataclass
class SimilarityReport:
    pairs: int
    pcc: Optional[float]
    feature_cos: np.ndarray
    path_cos: np.ndarray
    notice: str = ""


def similarity_report(features: np.ndarray, paths: np.ndarray, rng: Rng, max_pairs: int = 100_000) -> SimilarityReport:
    """Correlation between feature cosine similarity and path cosine similarity over sample pairs.

    All-zero paths (no direction) and zero feature vectors are excluded.  If
    more than ``max_pairs`` pairs exist, that many distinct pairs are sampled.
    """
    features = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    paths = np.asarray(paths, dtype=np.float64)
    if len(features) != len(paths):
        raise ValueError(f"{len(features)} feature rows for {len(paths)} paths")
    keep = np.flatnonzero((paths.sum(axis=1) > 0) & (np.linalg.norm(features, axis=1) > 0))
    m = keep.size
    total = m * (m - 1) // 2
    empty = np.zeros(0)
    if total == 0:
        return SimilarityReport(0, None, empty, empty, notice="fewer than two usable samples; PCC skipped")
    if total <= max_pairs:
        ii, jj = np.triu_indices(m, k=1)
    else:
        flat = np.sort(rng.generator.choice(total, size=max_pairs, replace=False))
        ii, jj = _unrank_pairs(flat, m)
    i, j = keep[ii], keep[jj]
    fc = cosine_rows(features, i, j)
    pc = cosine_rows(paths, i, j)
    try:
        value = pcc(fc, pc)
        notice = ""
    except (UndefinedCorrelation, ValueError) as exc:
        value, notice = None, f"PCC skipped: {exc}"
    return SimilarityReport(len(i), value, fc, pc, notice)


def _unrank_pairs(ranks: np.ndarray, m: int) -> Tuple[np.ndarray, np.ndarray]:
    """Map ranks in ``[0, m(m-1)/2)`` to row-major upper-triangle pairs ``i < j``."""
    starts = np.cumsum(np.r_[0, np.arange(m - 1, 0, -1)])
    i = np.searchsorted(starts, ranks, side="right") - 1
    j = ranks - starts[i] + i + 1
    return i, j


# -- cost --------------------------------------------------------------------------------


@dataclass
class CostReport:
    mean_gmacc: float
    full_gmacc: float
    speedup: float


def cost_report(log: PathLog, table: CostTable) -> CostReport:
    """Mean executed cost and speedup relative to running every gated block."""
    if len(table) != log.n:
        raise ValueError(f"cost table has {len(table)} entries for paths of length {log.n}")
    c = np.asarray(table.entries, dtype=np.float64)
    full = float(c.sum()) / 1e9
    if not log.records:
        return CostReport(0.0, full, float("nan"))
    mean = float((log.paths().astype(np.float64) @ c).mean()) / 1e9
    speedup = full / mean if mean > 0 else float("inf")
    return CostReport(mean, full, speedup)


# -- export --------------------------------------------------------------------------------

_COLUMNS = "id\tlabel\tpath\trelaxed\tcost_macc\tprobs"


def _fmt_float(v: float) -> str:
    return repr(float(v))


def export_path_log(log: PathLog, path: "str | os.PathLike") -> None:
    """Write the tab-separated path log (header line first)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# n={log.n}\tnum_classes={log.num_classes}\tcolumns={_COLUMNS.replace(chr(9), ',')}\n")
        for r in log.records:
            relaxed = ",".join(f"{v:.{RELAXED_DECIMALS}f}" for v in r.relaxed)
            probs = ",".join(_fmt_float(v) for v in r.probs)
            fh.write(f"{r.id}\t{r.label}\t{r.bits}\t{relaxed}\t{r.cost}\t{probs}\n")


def parse_path_log(path: "str | os.PathLike") -> PathLog:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise PathLogError(f"{path}: missing header line")
    header = dict(part.split("=", 1) for part in lines[0][1:].strip().split("\t") if "=" in part)
    try:
        n, k = int(header["n"]), int(header["num_classes"])
    except (KeyError, ValueError) as exc:
        raise PathLogError(f"{path}: header must name n and num_classes") from exc
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != 6:
            raise PathLogError(f"{path}:{lineno}: expected 6 tab-separated fields, got {len(fields)}")
        try:
            rid, label, bits, relaxed, cost, probs = fields
            records.append(
                PathRecord(
                    id=int(rid),
                    label=int(label),
                    bits=bits,
                    relaxed=tuple(float(v) for v in relaxed.split(",")) if relaxed else (),
                    cost=int(cost),
                    probs=tuple(float(v) for v in probs.split(",")) if probs else (),
                )
            )
        except ValueError as exc:
            raise PathLogError(f"{path}:{lineno}: {exc}") from exc
    return PathLog(n=n, num_classes=k, records=records)


def pca_2d(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Project onto the top two principal components.

    Returns:
        ``(projection (N, 2), variances (2,))`` where ``variances`` are the
        sample variances along the two components.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        return np.zeros((len(x), 2)), np.zeros(2)
    centered = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    comps = np.zeros((2, x.shape[1]))
    comps[: min(2, len(vt))] = vt[:2]
    var = np.zeros(2)
    denom = max(len(x) - 1, 1)
    var[: min(2, len(s))] = (s[:2] ** 2) / denom
    return centered @ comps.T, var


def export_projection(log: PathLog, path: "str | os.PathLike") -> np.ndarray:
    """CSV of relaxed paths plus a 2-component PCA projection; returns the component variances."""
    relaxed = log.relaxed()
    proj, var = pca_2d(relaxed)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        cols = ["id", "label", "expected_runs"] + [f"v{k + 1}" for k in range(log.n)] + ["pc1", "pc2"]
        fh.write(",".join(cols) + "\n")
        for r, row, p in zip(log.records, relaxed, proj):
            vals = [str(r.id), str(r.label), f"{expected_run_count(row):.6f}"]
            vals += [f"{v:.6f}" for v in row] + [f"{p[0]:.6f}", f"{p[1]:.6f}"]
            fh.write(",".join(vals) + "\n")
    return var
