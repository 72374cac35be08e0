import json
import subprocess
import sys

import pytest

from mops.cli import main

SMALL = {"T": 12, "beta": 0.01, "metrics_every": 4, "n_pop_factor": 2,
         "task": {"modality": ["csi", "traffic"], "train_size": 40}}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return path


def test_run_writes_deterministic_outputs(tmp_path, config):
    assert main(["run", "--config", str(config), "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", str(config), "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a.count(b"\n") == 1 + 3
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["schema_version"] == 1 and summary["runs"][0]["final"]["gamma"] == [0.5, 0.5]
    assert main(["run", "--config", str(config), "--out", str(tmp_path / "c"),
                 "--harness", "threaded"]) == 0
    assert (tmp_path / "c" / "metrics.csv").read_bytes() == a


def test_seed_override_changes_output(tmp_path, config):
    main(["run", "--config", str(config), "--out", str(tmp_path / "a")])
    main(["run", "--config", str(config), "--out", str(tmp_path / "b"), "--seed", "5"])
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes()


def test_sweep_T_with_rate_schedule_and_rates(tmp_path, config):
    out = tmp_path / "sw"
    code = main(["sweep", "--config", str(config), "--out", str(out), "--axis", "T",
                 "--values", "8,12,16,20", "--rate-schedule", "0.1"])
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["runs"]) == 4 and len(list(out.glob("run_T_*.csv"))) == 4
    assert summary["runs"][0]["config"]["beta"] == pytest.approx(0.1 / 8**0.5)
    assert set(summary["slopes"]) == {"o_err", "g_err", "c_err"}
    assert "fit" in summary
    assert main(["rates", "--out", str(out)]) == 0
    rates = json.loads((out / "rates.json").read_text())
    assert isinstance(rates["slopes"]["o_err"], float)


def test_sweep_scheme_reports_flops(tmp_path, config):
    out = tmp_path / "sw"
    assert main(["sweep", "--config", str(config), "--out", str(out), "--axis", "scheme",
                 "--values", "none,share_top,share_deep"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    table = summary["flops_table"]
    assert set(table) == {"none", "share_top", "share_deep"}
    assert summary["runs"][0]["bytes"] == 0


def test_usage_errors_exit_2(tmp_path, config, capsys):
    out = str(tmp_path / "o")
    assert main(["run", "--config", str(tmp_path / "nope.json"), "--out", out]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["run", "--config", str(bad), "--out", out]) == 2
    assert main(["sweep", "--config", str(config), "--out", out, "--axis", "T", "--values", "x"]) == 2
    assert main(["sweep", "--config", str(config), "--out", out, "--axis", "beta",
                 "--values", "0.1", "--rate-schedule"]) == 2
    assert main(["verify", "--out", str(tmp_path / "empty")]) == 2
    assert main(["rates", "--out", str(tmp_path / "empty")]) == 2
    assert main(["frobnicate"]) == 2
    assert "error" in capsys.readouterr().err


def test_corrupted_csv_exit_2(tmp_path, config):
    out = tmp_path / "r"
    main(["run", "--config", str(config), "--out", str(out)])
    csv = out / "metrics.csv"
    csv.write_text(csv.read_text().replace("\n", ",x\n", 2))
    assert main(["verify", "--out", str(out), "--only", "2"]) == 2
    csv.unlink()
    assert main(["verify", "--out", str(out), "--only", "2"]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_3(tmp_path, capsys):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({**SMALL, "beta": 1e6, "T": 40}))
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == 3
    assert "at round" in capsys.readouterr().err


def test_verify_lists_each_check_once(tmp_path, config, capsys):
    out = tmp_path / "r"
    main(["run", "--config", str(config), "--out", str(out)])
    capsys.readouterr()
    assert main(["verify", "--out", str(out), "--only", "2,9"]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("[")]
    assert [l.split()[1] for l in lines] == ["2", "9"]
    assert all(l.startswith("[PASS]") for l in lines)


def test_console_entry_point(tmp_path, config):
    proc = subprocess.run([sys.executable, "-m", "mops.cli", "run", "--config", str(config),
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "o" / "metrics.csv").exists()


def test_minimal_toy_config_gives_one_row(tmp_path):
    path = tmp_path / "toy.json"
    path.write_text(json.dumps({"T": 1, "task": {"kind": "toy"}}))
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == 0
    lines = (tmp_path / "o" / "metrics.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].startswith("1,")


def test_two_value_sweep_counts(tmp_path, config):
    out = tmp_path / "sw"
    assert main(["sweep", "--config", str(config), "--out", str(out), "--axis", "T",
                 "--values", "4,8"]) == 0
    assert len(list(out.glob("*.csv"))) == 2 and (out / "summary.json").exists()
