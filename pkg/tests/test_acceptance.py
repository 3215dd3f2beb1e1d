"""Acceptance criteria 1-11.

Each test prints (and records for the terminal summary) one line of the form
``criterion N PASS|FAIL: detail`` and then asserts.  Criteria 5-9 share one
set of desk-scale training runs, cached for the session.
"""

import itertools
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from codinet import analytics, ops
from codinet.analytics import PathLog
from codinet.blocks import NetSpec
from codinet.checkpoint import load_checkpoint, net_arrays, restore_parameters, save_checkpoint
from codinet.cli import main
from codinet.config import parse_config
from codinet.gradcheck import finite_diff_check
from codinet.losses import RegularizerConfig, codinet_objective, consistency_loss, cost_loss, diversity_loss, total_loss
from codinet.network import DynamicNet
from codinet.rng import Rng
from codinet.router import GumbelConfig, RouterParams, RouterTrace, gumbel_relax, hard_decision, router_forward
from codinet.runner import augmentation_probe, run_training, sweep_rows
from codinet.tensor import Tensor

from conftest import ACCEPTANCE_LINES

REFERENCE_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "desk.cfg"
SEEDS = (0, 1, 2)
GAMMAS = (0.0, 0.05, 0.1, 0.2)
VANILLA = {"loss.alpha": "0", "loss.beta": "0", "loss.gamma": "0"}


def report(criterion, passed, detail):
    line = f"criterion {criterion} {'PASS' if passed else 'FAIL'}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert passed, line


def reference(seed, **overrides):
    values = {"train.seed": str(seed), "data.seed": str(seed)}
    values.update({k: str(v) for k, v in overrides.items()})
    return parse_config(REFERENCE_CONFIG, values)


# -- shared training runs ----------------------------------------------------------------


class RunCache:
    """Trains each (seed, overrides) configuration at most once per session."""

    def __init__(self):
        self.runs = {}
        self.seconds = {}

    def get(self, seed, **overrides):
        key = (seed, tuple(sorted((k, str(v)) for k, v in overrides.items())))
        if key not in self.runs:
            cfg = reference(seed, **overrides)
            start = time.process_time()
            result = run_training(cfg)
            probe = augmentation_probe(result.net, result.splits.eval, cfg, kind="mixed")
            self.seconds[key] = time.process_time() - start
            self.runs[key] = (result, probe)
        return self.runs[key]

    def cpu_seconds(self, keys):
        return sum(self.seconds[k] for k in keys if k in self.seconds)


@pytest.fixture(scope="session")
def runs():
    return RunCache()


def paired(runs, seed):
    codinet = runs.get(seed)
    vanilla = runs.get(seed, **VANILLA)
    return codinet, vanilla


# -- 1: gradients ---------------------------------------------------------------------------


def _leaf(shape, seed):
    return Tensor(np.random.default_rng(seed).normal(size=shape), requires_grad=True)


def _op_cases():
    weights = Tensor(np.arange(12.0).reshape(3, 4))
    return {
        "add/mul/sub/div": (lambda p: ((p[0] * p[1] - p[0]) / (p[1] * p[1] + 1.0)).sum(), [(3, 4), (3, 4)]),
        "pow/exp/log": (lambda p: ((p[0] ** 2 + 1.0).log() + (p[0] * 0.3).exp()).sum(), [(3, 4)]),
        "sum/mean/reshape/transpose/index": (lambda p: p[0].reshape(4, 3).T[1:, :2].sum() * p[0].mean(axis=0).sum(), [(3, 4)]),
        "matmul": (lambda p: ops.matmul(p[0], p[1]).sum(), [(3, 4), (4, 2)]),
        "linear": (lambda p: (ops.linear(p[0], p[1], p[2]) ** 2).sum(), [(3, 4), (2, 4), (2,)]),
        "conv2d": (lambda p: (ops.conv2d(p[0], p[1], p[2]) ** 2).sum(), [(2, 2, 4, 4), (3, 2, 3, 3), (3,)]),
        "relu": (lambda p: (ops.relu(p[0]) * p[0]).sum(), [(3, 4)]),
        "global_avg_pool": (lambda p: (ops.global_avg_pool(p[0]) ** 2).sum(), [(2, 3, 4, 4)]),
        "avg_pool2d": (lambda p: (ops.avg_pool2d(p[0], 2) ** 2).sum(), [(2, 2, 4, 4)]),
        "softmax": (lambda p: (ops.softmax(p[0]) * weights).sum(), [(3, 4)]),
        "log_softmax": (lambda p: (ops.log_softmax(p[0]) * weights).sum(), [(3, 4)]),
        "cross_entropy": (lambda p: ops.cross_entropy(p[0], [1, 0, 3]), [(3, 4)]),
        "l2_norm": (lambda p: ops.l2_norm(p[0]).sum(), [(3, 4)]),
        "stack": (lambda p: (ops.stack([p[0], p[1]], axis=1) ** 2).sum(), [(3, 2), (3, 2)]),
        "take_rows/scatter_rows": (lambda p: (ops.scatter_rows(p[0], np.array([0, 2]), ops.take_rows(p[1], np.array([1, 1]))) ** 2 * weights).sum(), [(3, 4), (2, 4)]),
        "gumbel_relax": (lambda p: (gumbel_relax(RouterTrace(p[0], p[0], ops.softmax(p[0])), GumbelConfig(temperature=0.7), noise=Rng(1).gumbel((3, 2))) * Tensor(np.array([1.0, -2.0, 0.5]))).sum(), [(3, 2)]),
    }


def _toy_objective():
    """The full regularised objective on a 2-block net with every parameter randomised."""
    spec = NetSpec(depth=2, channels=3, input_shape=(1, 4, 4), num_classes=3, downsample=1, router_hidden=4)
    net = DynamicNet(spec, seed=11)
    gen = np.random.default_rng(11)
    for p in net.parameters():
        p.data[...] = gen.normal(size=p.shape) * 0.5
    x = gen.normal(size=(6, 1, 4, 4))
    labels = [0, 1, 2, 0, 1, 2]
    noise = Rng(12).gumbel((2, 6, 2))
    costs = net.cost_table.as_array("fraction")
    cfg = RegularizerConfig(alpha=0.2, beta=0.2, gamma=0.05, m_c=0.05, m_d=1.5)

    def objective():
        logits, path = net.forward_relaxed(x, noise=noise)
        return codinet_objective(logits, labels, path, 3, 2, costs, cfg).total_tensor

    return net, objective


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    worst = {}
    for i, (name, (fn, shapes)) in enumerate(_op_cases().items()):
        params = [_leaf(s, 10 * i + j) for j, s in enumerate(shapes)]
        worst[name] = finite_diff_check(lambda: fn(params), params, h=1e-5)
    net, objective = _toy_objective()
    worst["full objective, 2-block net"] = finite_diff_check(objective, net.parameters(), h=1e-5)
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    report(1, ok, f"max relative error {worst[top]:.2e} ({top}) over {len(worst)} checks, {elapsed:.1f}s")


# -- 2: loss oracles -------------------------------------------------------------------------


def _brute_con(paths, m_c):
    total = 0.0
    for group in paths:
        center = [sum(col) / len(group) for col in zip(*group)]
        for member in group:
            d = math.sqrt(sum((a - b) ** 2 for a, b in zip(member, center)))
            total += max(0.0, d - m_c) ** 2
    return total / (len(paths) * len(paths[0]))


def _brute_div(centers, m_d):
    total = 0.0
    for i, a in enumerate(centers):
        for j, b in enumerate(centers):
            if i != j:
                total += max(0.0, m_d - math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))) ** 2
    return total / (len(centers) * (len(centers) - 1))


def test_criterion_2_loss_oracles():
    gen = np.random.default_rng(2024)
    errors = []
    for trial in range(20):
        L, M, n = 2 + trial % 4, 1 + trial % 3, 1 + trial % 6
        paths = gen.uniform(size=(L, M, n))
        costs = gen.uniform(0, 5, size=n)
        m_c, m_d = gen.uniform(0, 0.5), gen.uniform(0, 1.5)
        alpha, beta, gamma = gen.uniform(0, 1, size=3)
        centers = paths.mean(axis=1)
        con = consistency_loss(paths, m_c).item()
        div = diversity_loss(centers, m_d).item()
        cost = cost_loss(paths.reshape(-1, n), costs).item()
        b_con = _brute_con(paths.tolist(), m_c)
        b_div = _brute_div(centers.tolist(), m_d)
        b_cost = sum(sum(c * v for c, v in zip(costs, row)) for row in paths.reshape(-1, n).tolist()) / (L * M)
        total = total_loss(1.25, con, div, cost, RegularizerConfig(alpha, beta, gamma, m_c, m_d)).total
        b_total = 1.25 + alpha * b_con + beta * b_div + gamma * b_cost
        errors += [abs(con - b_con), abs(div - b_div), abs(cost - b_cost), abs(total - b_total)]
    report(2, max(errors) <= 1e-10, f"max abs deviation {max(errors):.1e} over {len(errors)} comparisons")


# -- 3: Gumbel statistics ------------------------------------------------------------------------


def test_criterion_3_gumbel_statistics():
    start = time.perf_counter()
    settings = [(0.0, 0.0), (1.0, -1.0), (-0.5, 1.5), (2.0, 0.0), (-3.0, -1.0)]
    gaps = []
    for i, (l0, l1) in enumerate(settings):
        logits = Tensor(np.tile([l0, l1], (10_000, 1)))
        trace = RouterTrace(logits, logits, ops.softmax(logits))
        v = gumbel_relax(trace, GumbelConfig(), rng=Rng(33).child("draws", i)).data
        gaps.append(abs((v > 0.5).mean() - trace.probs.data[0, 1]))
    agree = 0
    gen = np.random.default_rng(3)
    for i in range(1000):
        params = RouterParams(8, hidden=6, rng=Rng(300 + i))
        params.b2.data[...] = gen.normal(size=2)
        trace = router_forward(params, Tensor(gen.normal(size=(8, 3, 3))))
        v = gumbel_relax(trace, GumbelConfig(temperature=1.0)).item()
        agree += int((v >= 0.5) == bool(hard_decision(trace)))
    elapsed = time.perf_counter() - start
    ok = max(gaps) <= 0.02 and agree == 1000 and elapsed < 60
    report(3, ok, f"max |P(v>0.5) - p_run| = {max(gaps):.4f} over 5 settings; noiseless agreement {agree}/1000; {elapsed:.1f}s")


# -- 4: mode equivalence -------------------------------------------------------------------------


def test_criterion_4_mode_equivalence():
    gen = np.random.default_rng(4)
    worst, counter_ok, varied = 0.0, True, 0
    for i in range(100):
        depth = int(gen.integers(1, 7))
        if i % 2:
            spec = NetSpec(kind="dense", depth=depth, channels=int(gen.integers(2, 8)), input_shape=(5,), num_classes=4, router_hidden=4)
        else:
            spec = NetSpec(kind="conv", depth=depth, channels=int(gen.integers(2, 6)), input_shape=(1, 6, 6), num_classes=4, downsample=int(gen.choice([1, 2])), router_hidden=4)
        net = DynamicNet(spec, seed=i)
        gen_params = np.random.default_rng(1000 + i)
        for p in net.parameters():
            p.data[...] = gen_params.normal(size=p.shape) * 0.5
        x = gen.normal(size=(8,) + spec.input_shape)
        net.reset_counters()
        out = net.forward_binary(x)
        counter_ok &= net.block_evaluations() == int(out.paths.sum())
        varied += len({tuple(p) for p in out.paths}) > 1
        logits, _ = net.forward_relaxed(x, gates=out.paths.astype(np.float64))
        worst = max(worst, float(np.abs(logits.data - out.logits.data).max()))
    ok = worst <= 1e-12 and counter_ok
    report(4, ok, f"max |relaxed - binary| = {worst:.1e} on 100 nets ({varied} with mixed paths); execution counter == popcount: {counter_ok}")


# -- 5, 6, 8, 9: paired desk-scale runs ----------------------------------------------------------


def test_criterion_5_consistency_rate(runs):
    rows, wins = [], 0
    for seed in SEEDS:
        (_, cod), (_, van) = paired(runs, seed)
        wins += cod.consistency_rate > van.consistency_rate
        rows.append(f"seed {seed}: {cod.consistency_rate:.3f} vs {van.consistency_rate:.3f}")
    keys = [k for k in runs.seconds if k[0] in SEEDS and (k[1] == () or k[1] == tuple(sorted(VANILLA.items())))]
    minutes = runs.cpu_seconds(keys) / 60
    report(5, wins == 3 and minutes < 15, f"CoDiNet vs vanilla mixed-augmentation consistency, {'; '.join(rows)}; {wins}/3 strictly higher; {minutes:.1f} CPU min")


def _pcc_or_zero(probe):
    # identical paths everywhere leave path similarity constant: no correlation
    return 0.0 if probe.pcc is None else probe.pcc


def test_criterion_6_similarity_correlation(runs):
    rows, wins = [], 0
    for seed in SEEDS:
        (_, cod), (_, van) = paired(runs, seed)
        a, b = _pcc_or_zero(cod), _pcc_or_zero(van)
        wins += a > b
        rows.append(f"seed {seed}: {a:.3f} vs {b:.3f}" + (" (vanilla undefined)" if van.pcc is None else ""))
    report(6, wins == 3, f"PCC CoDiNet vs vanilla, {'; '.join(rows)}; {wins}/3 higher")


def test_criterion_8_prediction_kl(runs):
    rows, wins = [], 0
    for seed in SEEDS:
        (_, cod), (_, van) = paired(runs, seed)
        wins += cod.prediction_kl < van.prediction_kl
        rows.append(f"seed {seed}: {cod.prediction_kl:.4f} vs {van.prediction_kl:.4f}")
    report(8, wins >= 2, f"mean prediction KL (nats) CoDiNet vs vanilla, {'; '.join(rows)}; {wins}/3 lower")


def test_criterion_9_stage2_contract(runs):
    frozen, improved, rows = True, 0, []
    for seed in SEEDS:
        (result, _), _ = paired(runs, seed)
        s = result.summary
        frozen &= s["routers_frozen_in_stage2"]
        improved += s["accuracy"] >= s["stage1_accuracy"]
        rows.append(f"seed {seed}: {s['stage1_accuracy']:.3f} -> {s['accuracy']:.3f}")
    report(9, frozen and improved >= 2, f"routers bitwise frozen: {frozen}; binary accuracy before -> after stage 2, {'; '.join(rows)}; {improved}/3 not worse")


# -- 7: cost sweep -------------------------------------------------------------------------------


def test_criterion_7_gamma_sweep(runs):
    results = {}
    for gamma in GAMMAS:
        results[gamma] = [runs.get(seed, **({} if gamma == 0.05 else {"loss.gamma": gamma}))[0].summary for seed in SEEDS]
    rows = sweep_rows(results)
    costs = [r["mean_gmacc"] for r in rows]
    monotone = all(b <= a for a, b in zip(costs, costs[1:]))
    drop = 100 * (rows[0]["accuracy"] - rows[-1]["accuracy"])
    keys = [k for k in runs.seconds if k[0] in SEEDS and all(name in ("loss.gamma",) for name, _ in k[1])]
    minutes = runs.cpu_seconds(keys) / 60
    table = ", ".join(f"g={r['gamma']:g}: {r['mean_gmacc'] * 1e3:.3f} MMACC / {100 * r['accuracy']:.1f}%" for r in rows)
    report(7, monotone and drop <= 10 and minutes < 45, f"{table}; cost non-increasing: {monotone}; accuracy drop {drop:.1f} pts; {minutes:.1f} CPU min")


# -- 10: determinism and persistence --------------------------------------------------------------

TINY = """\
net.depth = 3
net.channels = 4
net.input_shape = 1,8,8
net.num_classes = 4
router.hidden_dim = 4
data.per_class = 8
train.epochs_stage1 = 2
train.epochs_stage2 = 1
train.milestones = 1
train.L = 4
train.M = 2
"""


def test_criterion_10_determinism_and_persistence(tmp_path):
    cfg_path = tmp_path / "tiny.cfg"
    cfg_path.write_text(TINY)
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "a")]) == 0
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "b")]) == 0
    metrics_same = (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()

    cfg = parse_config(cfg_path)
    ckpt_same = True
    for dtype in (np.float64, np.float32):
        net = DynamicNet(cfg.net, seed=5, dtype=dtype)
        x = np.random.default_rng(0).normal(size=(6, 1, 8, 8)).astype(dtype)
        save_checkpoint(tmp_path / "n.ckpt", net_arrays(net), cfg.to_text())
        other = DynamicNet(cfg.net, seed=6, dtype=dtype)
        restore_parameters(other, load_checkpoint(tmp_path / "n.ckpt"))
        ckpt_same &= np.array_equal(net.forward_binary(x).logits.data, other.forward_binary(x).logits.data)
        ckpt_same &= np.array_equal(net.forward_relaxed(x, rng=Rng(1))[0].data, other.forward_relaxed(x, rng=Rng(1))[0].data)

    assert main(["eval", "--config", str(cfg_path), "--checkpoint", str(tmp_path / "a" / "checkpoint.ckpt"), "--out", str(tmp_path / "e")]) == 0
    log_path = tmp_path / "e" / "path_log.tsv"
    log = analytics.parse_path_log(log_path)
    analytics.export_path_log(log, tmp_path / "again.tsv")
    log_same = (tmp_path / "again.tsv").read_bytes() == log_path.read_bytes() and analytics.parse_path_log(tmp_path / "again.tsv") == log
    report(10, metrics_same and ckpt_same and log_same, f"identical metrics files: {metrics_same}; checkpoint reload exact: {ckpt_same}; path log round trip exact: {log_same}")


# -- 11: analytics oracles ---------------------------------------------------------------------


def test_criterion_11_analytics_oracles():
    gen = np.random.default_rng(11)
    count_ok = True
    for trial in range(50):
        n = int(gen.integers(1, 8))
        bits = gen.integers(0, 2, size=(int(gen.integers(1, 60)), n))
        probs = np.full((len(bits), 2), 0.5)
        log = PathLog.from_arrays(range(len(bits)), [0] * len(bits), bits, bits.astype(float), [0] * len(bits), probs)
        brute = set()
        for row in bits:
            brute.add("".join(map(str, row)))
        count_ok &= analytics.unique_path_count(log) == len(brute)

    kl_err = 0.0
    for _ in range(50):
        p, q = gen.dirichlet(np.ones(5)), gen.dirichlet(np.ones(5))
        closed = sum(a * math.log((a + 1e-12) / (b + 1e-12)) for a, b in zip(p, q))
        kl_err = max(kl_err, abs(analytics.kl_divergence(p, q) - closed))
    pcc_err = 0.0
    for _ in range(50):
        x, y = gen.normal(size=30), gen.normal(size=30)
        mx, my = sum(x) / 30, sum(y) / 30
        num = sum((a - mx) * (b - my) for a, b in zip(x, y))
        den = math.sqrt(sum((a - mx) ** 2 for a in x) * sum((b - my) ** 2 for b in y))
        pcc_err = max(pcc_err, abs(analytics.pcc(x, y) - num / den))

    space_ok = True
    for n in range(1, 11):
        net = DynamicNet(NetSpec(kind="dense", depth=n, channels=3, input_shape=(2,), num_classes=2, router_hidden=2), seed=n)
        x = np.ones((1, 2))
        reached = set()
        for bits in itertools.product((0, 1), repeat=n):
            net.force_routes(bits)
            reached.add(tuple(net.forward_binary(x).paths[0]))
        space_ok &= len(reached) == 2**n
    ok = count_ok and kl_err <= 1e-9 and pcc_err <= 1e-9 and space_ok
    report(11, ok, f"unique paths == brute force: {count_ok}; KL err {kl_err:.1e}; PCC err {pcc_err:.1e}; 2^n reachable paths for n<=10: {space_ok}")
