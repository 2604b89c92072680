from __future__ import annotations

import json

import pytest

from rivals.cli import EXIT_CONFIG, EXIT_INTEGRITY, EXIT_OK, EXIT_REF, main


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("out")
    assert main(["scenario", "--out", str(out)]) == EXIT_OK
    return out / "financial-q1" / "main"


def test_scenario_writes_a_verified_run(run_dir, capsys):
    names = {p.name for p in run_dir.iterdir()}
    assert names == {"log.jsonl", "checkpoints", "result.json", "manifest.json"}
    res = json.loads((run_dir / "result.json").read_text())
    assert res["result"]["matched_total_cents"] == 467825
    assert res["iterations"] == {"1": 4, "2": 2, "3": 2, "4": 1, "5": 1, "6": 1, "7": 1, "8": 1}
    assert len(list((run_dir / "checkpoints").iterdir())) == 24


def test_scenario_refuses_to_overwrite(run_dir):
    assert main(["scenario", "--out", str(run_dir.parent.parent)]) == EXIT_INTEGRITY


def test_replay_forks_into_a_branch_directory(run_dir, capsys):
    assert main(["replay", str(run_dir), "--checkpoint", "5", "--branch", "again"]) == EXIT_OK
    assert "identical to the parent suffix" in capsys.readouterr().out
    res = json.loads((run_dir / "again" / "result.json").read_text())
    assert res["branch"] == "main/again" and res["checkpoint"] == 5
    assert main(["replay", str(run_dir), "--checkpoint", "0", "--policy", "deny"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "Declined" in out and "diverges" in out
    assert (run_dir / "branch-1").is_dir()
    # the parent run is untouched and still verifies
    assert main(["trace", str(run_dir), "result:match_rate_pct"]) == EXIT_OK


def test_replay_unknown_checkpoint(run_dir):
    assert main(["replay", str(run_dir), "--checkpoint", "999"]) == EXIT_REF


def test_trace_and_expose(run_dir, capsys):
    assert main(["trace", str(run_dir / "log.jsonl"), "result:discrepancy_cents"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "roots:" in out and "input:expenses.amount" in out
    assert main(["expose", str(run_dir), "input:telecom.provider"]) == EXIT_OK
    assert "result:match_rate_pct" in capsys.readouterr().out
    assert main(["expose", str(run_dir), "result:match_rate_pct"]) == EXIT_OK
    assert "(none)" in capsys.readouterr().out
    assert main(["trace", str(run_dir), "result:nope"]) == EXIT_REF


def test_integrity_errors(tmp_path, run_dir):
    assert main(["trace", str(tmp_path / "missing"), "x"]) == EXIT_INTEGRITY
    copy = tmp_path / "copy"
    copy.mkdir()
    for p in ("log.jsonl", "result.json", "manifest.json"):
        (copy / p).write_bytes((run_dir / p).read_bytes())
    (copy / "checkpoints").mkdir()
    for p in (run_dir / "checkpoints").iterdir():
        (copy / "checkpoints" / p.name).write_bytes(p.read_bytes())
    cp = copy / "checkpoints" / "cp-0003.json"
    cp.write_text(cp.read_text().replace('"seed":0', '"seed":9', 1))
    assert main(["replay", str(copy), "--checkpoint", "3"]) == EXIT_INTEGRITY


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("mode: [unclosed\n")
    assert main(["scenario", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    odd = tmp_path / "odd.yaml"
    odd.write_text("writers: {default: {error_rate: 3}}\n")
    assert main(["scenario", "--config", str(odd), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["scenario", "nowhere", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_simulate_reports_are_byte_identical(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["simulate", "--sessions", "60", "--seed", "3", "--out", str(out)]) == EXIT_OK
    for name in ("cohort-60-seed3.txt", "cohort-60-seed3.json"):
        assert (a / "simulate" / name).read_bytes() == (b / "simulate" / name).read_bytes()
    assert len(list((a / "simulate" / "logs-60-seed3").iterdir())) == 60


def test_report_ledger(tmp_path, capsys):
    assert main(["report", "ledger", "--out", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "20,325.9" in out and "7,842.1" in out and "52.7" in out
    assert (tmp_path / "report" / "ledger-fixture.json").is_file()


def test_out_defaults_to_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("RIVALS_OUT", str(tmp_path / "env"))
    assert main(["report", "ledger"]) == EXIT_OK
    assert (tmp_path / "env" / "report" / "ledger-fixture.txt").is_file()
