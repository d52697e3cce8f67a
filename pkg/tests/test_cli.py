import csv
import json

import numpy as np
import pytest

from itfr.cli import aggregate_reports, expand_grid, run

FAST = ["--epochs", "3", "--batch-size", "64", "--d", "8"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(["synth", "--out", str(root / "raw"), "--seed", "3", "--users-per-group", "20",
                "--minority-per-group", "2", "--items-per-group", "12", "--pos-per-user", "6"]) == 0
    assert run(["prep", "--interactions", str(root / "raw/interactions.tsv"),
                "--user-groups", str(root / "raw/user_groups.tsv"),
                "--item-groups", str(root / "raw/item_groups.tsv"),
                "--ratios", "0.7,0.1,0.2", "--seed", "0", "--out", str(root / "data")]) == 0
    return root / "data"


def _train(data_dir, out, *extra):
    return run(["train", "--data", str(data_dir), "--out", str(out), *FAST, *extra])


def test_train_writes_run_directory(data_dir, tmp_path):
    assert _train(data_dir, tmp_path / "r", "--method", "itfr", "--seed", "1", "--diagnostics") == 0
    for name in ("manifest.json", "checkpoint.bin", "train_log.csv", "report.json", "report.csv",
                 "utility.csv", "diagnostics.jsonl"):
        assert (tmp_path / "r" / name).exists(), name
    manifest = json.loads((tmp_path / "r/manifest.json").read_text())
    assert manifest["config"]["method"] == "itfr" and manifest["seeds"] == [1]
    report = json.loads((tmp_path / "r/report.json").read_text())
    assert set(report["metrics"]) == {"precision", "recall", "ndcg", "min", "cv", "ucv", "icv"}
    assert len(report["cells"]) == 4


def test_train_twice_byte_identical(data_dir, tmp_path):
    for name in ("a", "b"):
        assert _train(data_dir, tmp_path / name, "--method", "itfr", "--seed", "1") == 0
    for f in ("report.csv", "utility.csv", "report.json", "train_log.csv", "checkpoint.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_eval_reproduces_train_metrics(data_dir, tmp_path):
    assert _train(data_dir, tmp_path / "r", "--method", "bpr", "--seed", "2") == 0
    assert run(["eval", "--data", str(data_dir), "--checkpoint", str(tmp_path / "r/checkpoint.bin"),
                "--out", str(tmp_path / "e")]) == 0
    assert (tmp_path / "r/report.csv").read_bytes() == (tmp_path / "e/report.csv").read_bytes()


def test_config_file_and_flag_precedence(data_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"method": "groupdro", "eta": 0.3, "epochs": 2}))
    assert run(["train", "--data", str(data_dir), "--out", str(tmp_path / "r"), "--config", str(cfg),
                "--eta", "0.7", "--d", "8"]) == 0
    got = json.loads((tmp_path / "r/manifest.json").read_text())["config"]
    assert (got["method"], got["eta"], got["epochs"]) == ("groupdro", 0.7, 2)


@pytest.mark.parametrize("argv", [
    ["--method", "bpr", "--no-sa"],
    ["--method", "groupdro", "--pn-only"],
    ["--method", "adamw"],
    ["--bogus-flag"],
])
def test_usage_errors(data_dir, tmp_path, argv, capsys):
    assert _train(data_dir, tmp_path / "r", *argv) == 1
    assert capsys.readouterr().err


def test_data_errors(tmp_path):
    assert run(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == 2
    bad = tmp_path / "i.tsv"
    bad.write_text("u1 i1\n")
    assert run(["prep", "--interactions", str(bad), "--user-groups", str(bad),
                "--item-groups", str(bad), "--out", str(tmp_path / "d")]) == 2


def test_numerical_failure_exit_code(data_dir, tmp_path):
    # zero-scale init leaves normalized scores undefined
    assert _train(data_dir, tmp_path / "r", "--method", "itfr", "--init-scale", "0") == 3


def test_report_aggregates(data_dir, tmp_path):
    runs = []
    for seed in ("0", "1"):
        out = tmp_path / f"bpr{seed}"
        assert _train(data_dir, out, "--method", "bpr", "--seed", seed) == 0
        runs.append(str(out))
    assert run(["report", "--runs", *runs, "--out", str(tmp_path / "agg.csv")]) == 0
    with open(tmp_path / "agg.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1 and rows[0]["runs"] == "2"
    vals = []
    for r in runs:
        with open(f"{r}/report.csv", newline="") as fh:
            vals.append(float(next(csv.DictReader(fh))["cv@20"]))
    assert float(rows[0]["cv@20_mean"]) == pytest.approx(np.mean(vals), abs=1e-15)
    assert float(rows[0]["cv@20_std"]) == pytest.approx(np.std(vals), abs=1e-15)


def test_aggregate_groups_by_config():
    rows = [{"method": "bpr", "seed": "0", "cv@20": "0.2"},
            {"method": "bpr", "seed": "1", "cv@20": "0.4"},
            {"method": "itfr", "seed": "0", "cv@20": "0.1"}]
    agg = {r["method"]: r for r in aggregate_reports(rows)}
    assert float(agg["bpr"]["cv@20_mean"]) == pytest.approx(0.3)
    assert float(agg["bpr"]["cv@20_std"]) == pytest.approx(0.1)
    assert agg["itfr"]["runs"] == 1


def test_expand_grid():
    combos = expand_grid({"base": {"method": "itfr"}, "grid": {"eta": [1, 2], "seed": [0, 1, 2]}})
    assert len(combos) == 6
    assert combos[0] == ("eta=1_seed=0", {"method": "itfr", "eta": 1, "seed": 0})


def test_sweep(data_dir, tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"base": {"method": "groupdro", "epochs": 2, "d": 8, "batch_size": 64},
                                "grid": {"eta": [0.1, 1.0], "seed": [0, 1]}}))
    assert run(["sweep", "--grid", str(grid), "--data", str(data_dir), "--out", str(tmp_path / "s")]) == 0
    with open(tmp_path / "s/summary.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert sorted(r["eta"] for r in rows) == ["0.1", "1.0"]
    assert all(r["runs"] == "2" for r in rows)
