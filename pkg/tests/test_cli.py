import json
import os
import shutil
import subprocess

import pytest

from dermfoundry.cli import EXIT_RUNTIME, EXIT_USAGE, EXIT_VALIDATION, main
from dermfoundry.core import read_csv

QUIET = ["--log-level", "ERROR"]


def _tree(root):
    return {p: os.stat(p).st_mtime_ns for p in sorted(str(x) for x in __import__("pathlib").Path(root).rglob("*"))}


@pytest.fixture(scope="session")
def runs(fixture_data, tmp_path_factory):
    """Every subcommand once on the fixture data, chained where one consumes another."""
    d = fixture_data
    r = tmp_path_factory.mktemp("runs")
    plan = {
        "pretrain": ["--synthetic", "16", "--set", "steps=5"],
        "probe": ["--manifest", str(d["images"])],
        "finetune": ["--data", str(d["images"]), "--set", "epochs=2", "--set", "batch_size=16"],
        "oof": ["--manifest", str(d["images"]), "--set", "folds=3"],
        "seg-train": ["--manifest", str(d["seg"]), "--set", "epochs=2"],
        "seg-predict": ["--manifest", str(d["seg"]), "--checkpoint", str(r / "seg-train/outputs/checkpoint")],
        "seqprep": ["--pairs", str(d["pairs"])],
        "change-train": ["--pairs", str(d["pairs"]), "--set", "epochs=1"],
        "change-eval": ["--pairs", str(d["pairs"]), "--checkpoint", str(r / "change-train/outputs/checkpoint"), "--preproc", "all"],
        "tbp-screen": ["--lesions", str(d["lesions"]), "--set", "n_trees=20"],
        "mil-train": ["--bags", str(d["bags"]), "--set", "max_epochs=2"],
        "survival": ["--table", str(d["survival"])],
        "report": [
            "--predictions", str(r / "probe/outputs/predictions.csv"), str(r / "finetune/outputs/predictions.csv"),
            "--names", "probe", "finetune", "--run-dir", str(r / "mil-train"),
            "--set", "n_bootstrap=50", "--set", "n_permutations=50",
        ],
    }
    codes = {task: main([task, "--out", str(r / task), *args, *QUIET]) for task, args in plan.items()}
    return r, codes


EXPECTED = {
    "pretrain": ["loss_history.csv", "metrics.csv", "checkpoint/sidecar.json"],
    "probe": ["predictions.csv", "metrics.csv", "probe.json"],
    "finetune": ["checkpoint/weights.bin", "val_metrics.json", "predictions.csv", "metrics.csv"],
    "oof": ["oof_predictions.csv", "metrics.csv"],
    "seg-train": ["checkpoint/weights.bin", "seg_metrics.csv", "metrics.csv"],
    "seg-predict": ["masks", "seg_metrics.csv"],
    "seqprep": ["report.csv", "pairs"],
    "change-train": ["checkpoint/weights.bin", "metrics.csv"],
    "change-eval": ["arm_metrics.csv", "predictions.csv"],
    "tbp-screen": ["filter_log.csv", "decisions.csv", "report.json"],
    "mil-train": ["fold_metrics.csv", "oof_predictions.csv", "summary.json"],
    "survival": ["km_curve.csv", "km_groups.csv", "logrank.json", "cox_forest.csv", "tauc.csv", "report/report.json"],
    "report": ["comparison.csv", "comparison.json", "report.json", "folds.png"],
}


@pytest.mark.parametrize("task", list(EXPECTED))
def test_subcommand_smoke(runs, task):
    root, codes = runs
    assert codes[task] == 0
    run = root / task
    resolved = json.loads((run / "config.resolved.json").read_text())
    assert resolved["task"] == task and resolved["seed"] == 0 and len(resolved["config_hash"]) == 64
    assert (run / "logs" / "run.log").is_file()
    for name in EXPECTED[task]:
        assert (run / "outputs" / name).exists(), name


def test_output_contents(runs):
    root, _ = runs
    arms = [r["arm"] for r in read_csv(root / "change-eval/outputs/arm_metrics.csv")]
    assert arms == ["default", "warp", "mask", "whole"]
    assert [r["horizon"] for r in read_csv(root / "survival/outputs/tauc.csv")] == ["36.0", "60.0", "84.0"]
    metrics = {r["metric"] for r in read_csv(root / "probe/outputs/metrics.csv")}
    assert {"auroc", "w_f1", "bacc"} <= metrics
    models = {r["model"] for r in read_csv(root / "report/outputs/comparison.csv")}
    assert models == {"probe", "finetune"}
    assert "set --set" not in (root / "survival/logs/run.log").read_text()


def test_unknown_or_missing_subcommand(capsys):
    assert main(["bogus"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_console_script_exit_code():
    exe = shutil.which("derm-foundry")
    assert exe is not None
    res = subprocess.run([exe, "not-a-command"], capture_output=True, text=True)
    assert res.returncode == EXIT_USAGE and "usage" in res.stderr


def test_validation_exit_codes(fixture_data, tmp_path, capsys):
    man = str(fixture_data["images"])
    out = ["--out", str(tmp_path / "v")]
    assert main(["probe", *out, *QUIET]) == EXIT_VALIDATION
    assert "--manifest" in capsys.readouterr().err
    assert main(["probe", *out, "--manifest", str(tmp_path / "nope.csv"), *QUIET]) == EXIT_VALIDATION
    assert main(["probe", *out, "--manifest", man, "--set", "learning_rat=1", *QUIET]) == EXIT_VALIDATION
    assert "learning_rat" in capsys.readouterr().err
    assert main(["probe", *out, "--manifest", man, "--no-such-flag"]) == EXIT_VALIDATION
    assert main(["probe", *out, "--manifest", man, "--checkpoint", man, *QUIET]) == EXIT_VALIDATION
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["probe", *out, "--config", str(bad), *QUIET]) == EXIT_VALIDATION
    bad.write_text(json.dumps({"max_iterr": 5}))
    assert main(["probe", *out, "--manifest", man, "--config", str(bad), *QUIET]) == EXIT_VALIDATION
    assert "max_iterr" in capsys.readouterr().err


def test_report_on_empty_run_is_runtime_failure(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["report", "--run-dir", str(tmp_path / "empty"), "--out", str(tmp_path / "rep"), *QUIET]) == EXIT_RUNTIME
    err = capsys.readouterr().err
    assert "metrics.csv" in err and "tauc.csv" in err


def test_config_inputs_object(fixture_data, tmp_path):
    cfg = fixture_data["root"] / "survival_cfg.json"
    cfg.write_text(json.dumps({"inputs": {"table": "survival.csv"}, "horizons": "24"}))
    try:
        assert main(["survival", "--config", str(cfg), "--out", str(tmp_path / "s"), *QUIET]) == 0
    finally:
        cfg.unlink()
    resolved = json.loads((tmp_path / "s/config.resolved.json").read_text())
    assert resolved["inputs"]["table"] == str(fixture_data["survival"])
    assert [r["horizon"] for r in read_csv(tmp_path / "s/outputs/tauc.csv")] == ["24.0"]


def test_hyperparameter_layering(fixture_data, tmp_path, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"horizons": "12", "ipcw": False}))
    monkeypatch.setenv("DERMFOUNDRY_HP_HORIZONS", "18,30")
    args = ["survival", "--table", str(fixture_data["survival"]), "--config", str(cfg), *QUIET]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    hp = json.loads((tmp_path / "a/config.resolved.json").read_text())["hyperparameters"]
    assert hp["horizons"] == "18,30" and hp["ipcw"] is False
    assert main([*args, "--out", str(tmp_path / "b"), "--set", "horizons=40"]) == 0
    hp = json.loads((tmp_path / "b/config.resolved.json").read_text())["hyperparameters"]
    assert hp["horizons"] == "40"


def test_writes_stay_inside_run_dir(fixture_data, tmp_path, monkeypatch):
    work = tmp_path / "cwd"
    work.mkdir()
    monkeypatch.chdir(work)
    before = _tree(fixture_data["root"])
    assert main(["survival", "--table", str(fixture_data["survival"]), *QUIET]) == 0
    assert main(["tbp-screen", "--lesions", str(fixture_data["lesions"]), "--set", "n_trees=5", *QUIET]) == 0
    assert _tree(fixture_data["root"]) == before
    # without --out each run lands in runs/<subcommand> under the working directory
    assert sorted(p.name for p in work.iterdir()) == ["runs"]
    assert sorted(p.name for p in (work / "runs").iterdir()) == ["survival", "tbp-screen"]
