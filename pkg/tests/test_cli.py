import csv
import subprocess
import sys

import numpy as np
import pytest

from pdprune import artifacts
from pdprune.cli import late_window, load_run, main, report_tables

TOY = ["--dataset", "synthetic", "--n-features", "16", "--n-classes", "4", "--separation", "4", "--noise", "1",
       "--n-train", "400", "--n-test", "200", "--epochs", "4", "--warmup-epochs", "1", "--ramp-step", "0.5",
       "--batch-size", "64", "--tau", "1e-3", "--sparsity", "0.7", "-q"]


def run(*argv):
    return main(list(argv))


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_train_writes_run_directory(tmp_path, capsys):
    out = tmp_path / "r"
    assert run("train", *TOY, "-o", str(out)) == 0
    for name in ("config.snapshot", "metrics.ndjson", "masks.bin", "weights.bin", "summary.txt"):
        assert (out / name).is_file()
    summary = artifacts.read_summary(out / "summary.txt")
    assert summary["pruned_weights"] == summary["target_pruned"]
    assert len(artifacts.read_metrics(out / "metrics.ndjson")) == 4
    assert "test accuracy" in capsys.readouterr().out


def test_exit_codes(tmp_path, capsys):
    assert run("train", *TOY, "--sparsity", "1.0", "-o", str(tmp_path / "a")) == 2
    assert run("train", "--no-such-flag") == 2
    assert run("frobnicate") == 2
    assert run("train", *TOY, "--mode", "nm", "2") == 2
    assert run("train", *TOY, "--layer-ratio", "fc1") == 2
    assert run("train", *TOY, "--lr", "1e12", "-o", str(tmp_path / "boom")) == 3
    assert (tmp_path / "boom" / "diagnostics.json").is_file()
    assert run("report", str(tmp_path / "missing")) == 4
    assert run("train", *TOY, "--config", str(tmp_path / "none.json")) == 4
    assert run("train", "--dataset", "mnist", "--data-dir", str(tmp_path), "-q", "-o", str(tmp_path / "m")) == 4
    capsys.readouterr()


def test_help_exits_zero(capsys):
    assert run("--help") == 0
    assert run("train", "--help") == 0
    capsys.readouterr()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "pdprune", "train", *TOY, "--sparsity", "2"],
                          capture_output=True, text=True)
    assert proc.returncode == 2


def test_config_file_with_flag_override(tmp_path, capsys):
    assert run("train", *TOY, "-o", str(tmp_path / "a")) == 0
    snap = tmp_path / "a" / "config.snapshot"
    assert run("train", "--config", str(snap), "--seed", "4", "-q", "-o", str(tmp_path / "b")) == 0
    a = artifacts.read_summary(tmp_path / "a" / "summary.txt")
    b = artifacts.read_summary(tmp_path / "b" / "summary.txt")
    assert a["epochs"] == b["epochs"] == 4 and b["seed"] == 4
    capsys.readouterr()


def test_nm_masks_exact(tmp_path, capsys):
    out = tmp_path / "nm"
    assert run("train", *TOY, "--mode", "nm", "2", "4", "-o", str(out)) == 0
    for m in artifacts.read_masks(out / "masks.bin").values():
        assert np.all(m.reshape(-1, 4).sum(axis=1) == 2)
    capsys.readouterr()


def test_manual_layer_ratios(tmp_path, capsys):
    out = tmp_path / "man"
    assert run("train", *TOY, "--layer-ratio", "fc1=0.5", "--layer-ratio", "fc2=0.25",
               "--layer-ratio", "fc3=0", "-o", str(out)) == 0
    masks = artifacts.read_masks(out / "masks.bin")
    assert np.mean(~masks["fc1"]) == 0.5 and np.mean(~masks["fc2"]) == 0.25 and masks["fc3"].all()
    assert run("train", *TOY, "--layer-ratio", "fc1=0.5", "-o", str(tmp_path / "x")) == 2
    capsys.readouterr()


def test_report_recomputes_totals(tmp_path, capsys):
    out = tmp_path / "r"
    assert run("train", *TOY, "-o", str(out)) == 0
    capsys.readouterr()
    assert run("report", str(out), "--no-plots") == 0
    text = capsys.readouterr().out
    total_line = [ln for ln in text.splitlines() if ln.startswith("total")][0]
    tables = report_tables(load_run(out))
    summary = artifacts.read_summary(out / "summary.txt")
    assert tables["mac_total"] == summary["mac"]
    assert str(tables["totals"]["mac"]) in total_line
    rows = read_csv(out / "report" / "mac.csv")
    assert sum(int(r["mac"]) for r in rows) == summary["mac"]
    assert len(read_csv(out / "report" / "flips.csv")) == 4
    for layer in ("fc1", "fc2", "fc3"):
        hist = read_csv(out / "report" / f"hist_{layer}.csv")
        assert sum(int(r["count"]) for r in hist) == summary["layers"][layer]["n"] - summary["layers"][layer]["zeros"]


def test_report_rejects_tampered_masks(tmp_path, capsys):
    out = tmp_path / "r"
    assert run("train", *TOY, "-o", str(out)) == 0
    masks = artifacts.read_masks(out / "masks.bin")
    masks["fc1"] = np.ones_like(masks["fc1"])
    artifacts.write_masks(out / "masks.bin", masks)
    assert run("report", str(out), "--no-plots") == 4
    (out / "weights.bin").write_bytes(b"PDPWGT01\x05")
    assert run("report", str(out), "--no-plots") == 4
    capsys.readouterr()


def test_report_on_dense_run(tmp_path, capsys):
    out = tmp_path / "d"
    assert run("train", *TOY, "--method", "dense", "-o", str(out)) == 0
    capsys.readouterr()
    assert run("report", str(out), "--no-plots") == 0
    tables = report_tables(load_run(out))
    assert tables["totals"]["sparsity"] == 0.0
    assert tables["totals"]["mac"] == tables["totals"]["dense_mac"]
    assert tables["totals"]["flips"] == 0


def test_report_renders_figures_when_matplotlib_present(tmp_path, capsys):
    pytest.importorskip("matplotlib")
    out = tmp_path / "r"
    assert run("train", *TOY, "-o", str(out)) == 0
    assert run("report", str(out)) == 0
    assert (out / "report" / "mac.png").is_file() and (out / "report" / "hist_fc1.png").is_file()
    capsys.readouterr()


def test_sweep_dedupes_and_flags_best(tmp_path, capsys):
    root = tmp_path / "sw"
    assert run("sweep-tau", *TOY, "--taus", "1e-2", "0.01", "1e-3", "1e-4", "--no-plots", "-o", str(root)) == 0
    rows = read_csv(root / "sweep.csv")
    assert [float(r["tau"]) for r in rows] == [1e-4, 1e-3, 1e-2]
    assert sum(int(r["best"]) for r in rows) == 1
    best = [r for r in rows if r["best"] == "1"][0]
    assert float(best["accuracy"]) == max(float(r["accuracy"]) for r in rows)
    text = (root / "sweep.txt").read_text()
    assert "<- best" in text and ("interior" in text or "boundary" in text)
    for r in rows:
        assert (root / f"tau_{float(r['tau']):.6g}" / "summary.txt").is_file()
    capsys.readouterr()


def test_sweep_needs_two_distinct_taus(tmp_path, capsys):
    assert run("sweep-tau", *TOY, "--taus", "1e-3", "0.001", "-o", str(tmp_path / "s")) == 2
    assert run("sweep-tau", *TOY, "--taus", "1e-3", "-1", "-o", str(tmp_path / "s")) == 2
    capsys.readouterr()


def test_sweep_at_zero_sparsity_gives_identical_accuracy(tmp_path, capsys):
    root = tmp_path / "sw0"
    assert run("sweep-tau", *TOY, "--sparsity", "0", "--taus", "1e-2", "1e-4", "--no-plots", "-o", str(root)) == 0
    rows = read_csv(root / "sweep.csv")
    assert rows[0]["accuracy"] == rows[1]["accuracy"]
    capsys.readouterr()


def test_sweep_refine_adds_midpoints(tmp_path, capsys):
    root = tmp_path / "swr"
    assert run("sweep-tau", *TOY, "--taus", "1e-2", "1e-4", "--refine", "1", "--no-plots", "-o", str(root)) == 0
    assert len(read_csv(root / "sweep.csv")) == 3
    capsys.readouterr()


def test_compare_baseline_outputs(tmp_path, capsys):
    root = tmp_path / "cmp"
    assert run("compare-baseline", *TOY, "--no-plots", "-o", str(root)) == 0
    rows = read_csv(root / "flips.csv")
    assert {r["method"] for r in rows} == {"pdp", "hard"} and len(rows) == 8
    assert (root / "pdp" / "masks.bin").is_file() and (root / "hard" / "masks.bin").is_file()
    assert "late window" in (root / "compare.txt").read_text()
    capsys.readouterr()


def test_compare_at_zero_sparsity_matches(tmp_path, capsys):
    root = tmp_path / "cmp0"
    assert run("compare-baseline", *TOY, "--sparsity", "0", "--no-plots", "-o", str(root)) == 0
    a = artifacts.read_weights(root / "pdp" / "weights.bin")
    b = artifacts.read_weights(root / "hard" / "weights.bin")
    # the soft mask at ratio 0 is not exactly 1, so weights differ slightly; accuracy should not
    assert set(a) == set(b)
    sa = artifacts.read_summary(root / "pdp" / "summary.txt")
    sb = artifacts.read_summary(root / "hard" / "summary.txt")
    assert sa["sparsity"] == sb["sparsity"] == 0.0
    assert abs(sa["test_acc"] - sb["test_acc"]) <= 0.02
    capsys.readouterr()


def test_late_window():
    assert list(late_window(40)) == list(range(30, 40))
    assert list(late_window(3)) == [2]


def test_same_seed_same_artifacts(tmp_path, capsys):
    for d in ("a", "b"):
        assert run("train", *TOY, "-o", str(tmp_path / d)) == 0
    assert (tmp_path / "a" / "weights.bin").read_bytes() == (tmp_path / "b" / "weights.bin").read_bytes()
    assert (tmp_path / "a" / "masks.bin").read_bytes() == (tmp_path / "b" / "masks.bin").read_bytes()
    capsys.readouterr()


def test_output_root_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("PDP_OUTPUT_ROOT", str(tmp_path))
    assert run("train", *TOY) == 0
    assert (tmp_path / "run" / "summary.txt").is_file()
    capsys.readouterr()
