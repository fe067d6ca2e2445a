import json
import subprocess
import sys

import pytest

from oculogate.cli import main

GEN_CFG = {"n_patients": 90, "visits_min": 3, "visits_max": 5, "seed": 11}
TRAIN_CFG = {"max_epochs": 4, "seed": 5}
GATE_CFG = {"n_passes": 6, "seed": 23}


@pytest.fixture(scope="session")
def run_dir(tmp_path_factory):
    """One gen-data + train chain shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    (root / "gen.json").write_text(json.dumps(GEN_CFG))
    (root / "train.json").write_text(json.dumps(TRAIN_CFG))
    (root / "gate.json").write_text(json.dumps(GATE_CFG))
    assert main(["gen-data", "--config", str(root / "gen.json"),
                 "--out", str(root / "cohort")]) == 0
    assert main(["train", "--config", str(root / "train.json"),
                 "--cohort", str(root / "cohort"),
                 "--out", str(root / "model")]) == 0
    return root


def test_help_exits_zero(capsys):
    for cmd in ("gen-data", "train", "predict", "gate", "calibrate",
                "evaluate", "coverage", "warn", "report"):
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        assert "usage" in out.lower()


def test_unknown_config_key_exits_two(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"foo": 1}))
    code = main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "foo" in capsys.readouterr().err


def test_missing_subcommand_usage_error():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_console_script_entry():
    proc = subprocess.run([sys.executable, "-m", "oculogate.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "oculogate" in proc.stdout


def test_train_emits_history_jsonl(run_dir):
    lines = (run_dir / "model" / "history.jsonl").read_text().strip().splitlines()
    assert len(lines) == TRAIN_CFG["max_epochs"]
    for line in lines:
        rec = json.loads(line)
        assert set(rec) == {"epoch", "train_loss", "val_auc", "val_mae",
                            "grad_ratio"}


def test_gen_data_writes_config_echo_and_images(run_dir):
    cohort = run_dir / "cohort"
    assert (cohort / "cohort.csv").exists()
    assert (cohort / "gen-data-config.json").exists()
    echoed = json.loads((cohort / "gen-data-config.json").read_text())
    assert echoed["n_patients"] == 90
    assert echoed["prevalence"] == 0.35  # defaults get echoed too
    pgms = list((cohort / "images").glob("*.pgm"))
    assert len(pgms) > 0


def test_append_only_refuses_overwrite(run_dir, capsys):
    code = main(["gen-data", "--config", str(run_dir / "gen.json"),
                 "--out", str(run_dir / "cohort")])
    assert code == 2
    assert "exists" in capsys.readouterr().err
    # prior artifacts untouched
    assert (run_dir / "cohort" / "cohort.csv").exists()


def test_end_to_end_smoke(run_dir):
    out = run_dir / "eval"
    assert main(["evaluate", "--cohort", str(run_dir / "cohort"),
                 "--model", str(run_dir / "model"), "--out", str(out)]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert 0.5 < metrics["auc"] <= 1.0
    assert main(["report", str(out), str(run_dir / "model"),
                 "--out", str(run_dir / "final")]) == 0
    report = json.loads((run_dir / "final" / "report.json").read_text())
    assert report["metrics"]["auc"] == metrics["auc"]
    assert "train_report" in report


def test_gate_and_coverage_outputs(run_dir):
    gate_out = run_dir / "gate"
    assert main(["gate", "--config", str(run_dir / "gate.json"),
                 "--cohort", str(run_dir / "cohort"),
                 "--model", str(run_dir / "model"), "--out", str(gate_out)]) == 0
    summary = json.loads((gate_out / "gate-report.json").read_text())
    assert summary["n"] == summary["accepted"] + summary["rejected_blur"] \
        + summary["rejected_uncertain"]
    lines = (gate_out / "gate.jsonl").read_text().strip().splitlines()
    assert len(lines) == summary["n"]
    rec = json.loads(lines[0])
    assert set(rec) == {"sample_id", "lap_var", "mu", "u", "decision", "group"}

    cov_out = run_dir / "cov"
    assert main(["coverage", "--config", str(run_dir / "gate.json"),
                 "--cohort", str(run_dir / "cohort"),
                 "--model", str(run_dir / "model"), "--out", str(cov_out)]) == 0
    cov = json.loads((cov_out / "coverage.json").read_text())
    assert cov["points"][0][0] == 0.5 and cov["points"][-1][0] == 1.0
    csv_lines = (cov_out / "coverage.csv").read_text().splitlines()
    assert csv_lines[0] == "coverage,accuracy"
    assert len(csv_lines) == len(cov["points"]) + 1


def test_calibrate_output_shape(run_dir):
    out = run_dir / "cal"
    assert main(["calibrate", "--cohort", str(run_dir / "cohort"),
                 "--model", str(run_dir / "model"), "--out", str(out)]) == 0
    fairness = json.loads((out / "fairness.json").read_text())
    stages = {s["stage"]: s for s in fairness["stages"]}
    assert set(stages) == {"global", "calibrated"}
    assert stages["calibrated"]["gap"] <= stages["global"]["gap"] + 1e-12
    assert stages["global"]["auc"] == stages["calibrated"]["auc"]


def test_predict_csv(run_dir):
    out = run_dir / "pred"
    assert main(["predict", "--cohort", str(run_dir / "cohort"),
                 "--model", str(run_dir / "model"), "--out", str(out)]) == 0
    lines = (out / "predictions.csv").read_text().splitlines()
    assert lines[0].startswith("sample_id,group,label,p_final")
    assert len(lines) > 1
    cells = lines[1].split(",")
    p_final, p_vis, p_clin = float(cells[3]), float(cells[4]), float(cells[5])
    # CSV carries 9 significant digits; the exact identity is checked in-memory
    assert abs(p_final - (0.6 * p_vis + 0.4 * p_clin)) <= 5e-9


def test_byte_identical_reports(run_dir):
    args_template = ["evaluate", "--cohort", str(run_dir / "cohort"),
                     "--model", str(run_dir / "model")]
    assert main(args_template + ["--out", str(run_dir / "det1")]) == 0
    assert main(args_template + ["--out", str(run_dir / "det2")]) == 0
    a = (run_dir / "det1" / "metrics.json").read_bytes()
    b = (run_dir / "det2" / "metrics.json").read_bytes()
    assert a == b


def test_ablation_flags(run_dir):
    for i, flag in enumerate(["--no-clinical", "--no-tta", "--no-mc-dropout"]):
        out = run_dir / f"abl{i}"
        assert main(["evaluate", "--config", str(run_dir / "gate.json"),
                     "--cohort", str(run_dir / "cohort"),
                     "--model", str(run_dir / "model"),
                     "--out", str(out), flag]) == 0
        metrics = json.loads((out / "metrics.json").read_text())
        abl = metrics["ablation"]
        assert set(abl) >= {"auc", "sensitivity", "specificity", "fnr_gap",
                            "top_fraction"}
        assert abl["top_fraction"] == 0.3


def test_no_mc_dropout_identity_tta_accepts_all(run_dir):
    out = run_dir / "accept_all"
    assert main(["gate", "--config", str(run_dir / "gate.json"),
                 "--cohort", str(run_dir / "cohort"),
                 "--model", str(run_dir / "model"), "--out", str(out),
                 "--no-mc-dropout", "--no-tta"]) == 0
    summary = json.loads((out / "gate-report.json").read_text())
    assert summary["rejected_uncertain"] == 0
    assert summary["accepted"] + summary["rejected_blur"] == summary["n"]
    for line in (out / "gate.jsonl").read_text().strip().splitlines():
        rec = json.loads(line)
        if rec["decision"] != "reject_blur":
            assert rec["u"] == 0.0 and rec["decision"] == "accept"
