import json

import numpy as np
import pytest

from codinet import analytics
from codinet.checkpoint import load_checkpoint, save_checkpoint
from codinet.cli import EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE, EXIT_OK, main
from codinet.config import parse_config
from codinet.runner import build_net, save_net

TINY = """\
net.depth = 2
net.channels = 4
net.input_shape = 1,8,8
net.num_classes = 4
router.hidden_dim = 4
data.per_class = 6
data.noise = 0.1
train.epochs_stage1 = 2
train.epochs_stage2 = 1
train.milestones = 1
train.L = 4
train.M = 2
train.lr = 0.05
"""

SUMMARY_KEYS = {"accuracy", "mean_gmacc", "full_gmacc", "speedup", "num_paths", "samples", "mean_expected_runs", "expected_run_histogram", "gamma", "seed", "epochs_stage1", "epochs_stage2", "stage1_accuracy", "wall_time_s"}


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    assert main(["train", "--config", str(cfg), "--out", str(root / "run")]) == EXIT_OK
    return cfg, root / "run"


def test_train_writes_artifacts(trained):
    _, out = trained
    summary = json.loads((out / "summary.json").read_text())
    assert SUMMARY_KEYS <= set(summary)
    lines = (out / "metrics.jsonl").read_text().splitlines()
    epochs = [json.loads(line)["epoch"] for line in lines]
    assert epochs == [0, 1, 2]
    assert load_checkpoint(out / "checkpoint.ckpt").epoch == 3


def test_train_is_reproducible(trained, tmp_path):
    cfg, out = trained
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "again")]) == EXIT_OK
    assert (tmp_path / "again" / "metrics.jsonl").read_bytes() == (out / "metrics.jsonl").read_bytes()


def test_zero_epochs_emits_initialised_checkpoint(cfg_path, tmp_path):
    out = tmp_path / "init"
    code = main(["train", "--config", str(cfg_path), "--set", "train.epochs_stage1=0", "--set", "train.epochs_stage2=0", "--out", str(out)])
    assert code == EXIT_OK
    assert (out / "metrics.jsonl").read_text() == ""
    cfg = parse_config(cfg_path)
    fresh = build_net(cfg)
    ckpt = load_checkpoint(out / "checkpoint.ckpt")
    assert all(np.array_equal(ckpt.arrays[k], p.data) for k, p in fresh.named_parameters().items())


def test_env_var_sets_output_directory(cfg_path, tmp_path, monkeypatch):
    monkeypatch.setenv("CODINET_OUT", str(tmp_path / "env"))
    assert main(["train", "--config", str(cfg_path), "--set", "train.epochs_stage1=0"]) == EXIT_OK
    assert (tmp_path / "env" / "summary.json").exists()


def test_eval_is_deterministic_and_writes_path_log(trained, tmp_path):
    cfg, out = trained
    args = ["eval", "--config", str(cfg), "--checkpoint", str(out / "checkpoint.ckpt")]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    assert (tmp_path / "a" / "path_log.tsv").read_bytes() == (tmp_path / "b" / "path_log.tsv").read_bytes()
    summary = json.loads((tmp_path / "a" / "eval_summary.json").read_text())
    assert {"accuracy", "mean_gmacc", "num_paths", "expected_run_histogram"} <= set(summary)


def test_eval_with_run_all_routes(cfg_path, tmp_path):
    cfg = parse_config(cfg_path)
    net = build_net(cfg)
    net.force_routes([1, 1])
    ckpt = tmp_path / "runall.ckpt"
    save_net(str(ckpt), net, cfg, 0)
    assert main(["eval", "--config", str(cfg_path), "--checkpoint", str(ckpt), "--out", str(tmp_path / "e")]) == EXIT_OK
    summary = json.loads((tmp_path / "e" / "eval_summary.json").read_text())
    assert summary["num_paths"] == 1
    assert summary["mean_gmacc"] == pytest.approx(summary["full_gmacc"])


def test_eval_of_empty_split_gives_header_only_log(cfg_path, tmp_path):
    ckpt = tmp_path / "c.ckpt"
    cfg = parse_config(cfg_path)
    save_net(str(ckpt), build_net(cfg), cfg, 0)
    code = main(["eval", "--config", str(cfg_path), "--set", "data.per_class=0", "--checkpoint", str(ckpt), "--out", str(tmp_path / "e")])
    assert code == EXIT_OK
    assert len((tmp_path / "e" / "path_log.tsv").read_text().splitlines()) == 1


def test_eval_rejects_mismatched_checkpoint(trained, tmp_path):
    cfg, out = trained
    code = main(["eval", "--config", str(cfg), "--set", "net.depth=3", "--checkpoint", str(out / "checkpoint.ckpt"), "--out", str(tmp_path)])
    assert code == EXIT_CHECKPOINT


def test_analyze_single_record_log(tmp_path):
    log = analytics.PathLog(3, 2, [analytics.PathRecord(0, 1, "101", (0.9, 0.1, 0.8), 10, (0.25, 0.75))])
    path = tmp_path / "one.tsv"
    analytics.export_path_log(log, path)
    assert main(["analyze", "--log", str(path), "--out", str(tmp_path / "r")]) == EXIT_OK
    report = json.loads((tmp_path / "r" / "analysis.json").read_text())
    assert report["num_paths"] == 1 and report["records"] == 1
    assert "pcc" not in report and report["notices"]


def test_analyze_with_features_augmented_log_and_comparison(trained, tmp_path):
    cfg, out = trained
    ckpt = str(out / "checkpoint.ckpt")
    for aug in ("identity", "hflip"):
        assert main(["eval", "--config", str(cfg), "--checkpoint", ckpt, "--augment", aug, "--features", "--out", str(tmp_path)]) == EXIT_OK
    args = ["analyze", "--log", str(tmp_path / "path_log.tsv"), "--features", str(tmp_path / "features.csv"), "--augmented-log", str(tmp_path / "path_log_hflip.tsv")]
    args += ["--compare", str(tmp_path / "path_log_hflip.tsv"), "--out", str(tmp_path / "r")]
    assert main(args) == EXIT_OK
    report = json.loads((tmp_path / "r" / "analysis.json").read_text())
    assert {"path_consistency_rate", "prediction_kl_nats", "path_distribution_kl_nats", "comparison"} <= set(report)
    assert report["comparison"]["columns"] == ["metric", "log", "compare"]
    for name in ("comparison.csv", "path_histogram.csv", "run_count_histogram.csv", "projection.csv"):
        assert (tmp_path / "r" / name).exists()


def test_analyze_feature_row_mismatch_is_a_data_error(tmp_path):
    log = analytics.PathLog(2, 2, [analytics.PathRecord(i, 0, "11", (1.0, 1.0), 5, (0.5, 0.5)) for i in range(3)])
    path = tmp_path / "log.tsv"
    analytics.export_path_log(log, path)
    (tmp_path / "f.csv").write_text("1,2\n3,4\n")
    assert main(["analyze", "--log", str(path), "--features", str(tmp_path / "f.csv"), "--out", str(tmp_path)]) == EXIT_DATA


def test_malformed_log_is_a_data_error(tmp_path):
    (tmp_path / "bad.tsv").write_text("no header\n")
    assert main(["analyze", "--log", str(tmp_path / "bad.tsv"), "--out", str(tmp_path)]) == EXIT_DATA


def test_config_errors_exit_with_config_code(cfg_path, tmp_path):
    assert main(["train", "--config", str(cfg_path), "--set", "loss.m_d=-1", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["train", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["sweep", "--config", str(cfg_path), "--gammas", "0.1", "--out", str(tmp_path)]) == EXIT_CONFIG


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(cfg_path, tmp_path):
    assert main(["train", "--config", str(cfg_path), "--set", "train.lr=1e6", "--out", str(tmp_path)]) == EXIT_DIVERGENCE


def test_corrupt_checkpoint_exit_code(cfg_path, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert main(["eval", "--config", str(cfg_path), "--checkpoint", str(bad), "--out", str(tmp_path)]) == EXIT_CHECKPOINT


def test_sweep_two_gammas(cfg_path, tmp_path):
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(cfg_path), "--gammas", "0.0,0.1", "--set", "train.epochs_stage1=1", "--out", str(out)]) == EXIT_OK
    report = json.loads((out / "sweep.json").read_text())
    assert [r["gamma"] for r in report["rows"]] == [0.0, 0.1]
    assert (out / "gamma0_seed0" / "summary.json").exists()
