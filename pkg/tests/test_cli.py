import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from btms.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from btms.episode import LOG_COLUMNS
from btms.scenarios import build_obstacle_scenario, policy_for

OBS_THETA = np.array([0.3, 0.08, -0.2, 0.35, 0.15, 0.35])


@pytest.fixture
def obstacle_policy(tmp_path):
    return policy_for(build_obstacle_scenario(), OBS_THETA).save(tmp_path / "obstacle.json")


def test_learn_writes_policy_and_artifacts(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["learn", "peg", "--budget", "30", "--seed", "1", "--out", str(out)]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["evaluations"] <= 30
    for name in ("trace.csv", "evaluations.csv", "manifest.json", "policy.json"):
        assert (out / name).is_file()


def test_eval_inspect_combine_replay(tmp_path, obstacle_policy, capsys):
    assert main(["learn", "peg", "--budget", "20", "--out", str(tmp_path / "peg")]) == EXIT_OK
    capsys.readouterr()

    assert main(["eval", str(obstacle_policy), "--trials", "5", "--out", str(tmp_path / "trials.csv")]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["trials"] == 5 and report["success_rate"] == 1.0
    assert len((tmp_path / "trials.csv").read_text().splitlines()) == 6

    assert main(["inspect", str(obstacle_policy)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "p1 = 0.3 m" in text and "Selector 'root'" in text

    combined = tmp_path / "combined.json"
    assert main(["combine", str(obstacle_policy), str(tmp_path / "peg" / "policy.json"), "--out", str(combined)]) == EXIT_OK
    capsys.readouterr()
    assert main(["eval", str(combined), "--displace", "0.0", "--trials", "2"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["scenario"] == "combined"

    trace = tmp_path / "replay.csv"
    assert main(["replay", str(obstacle_policy), "--trace-csv", str(trace)]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["status"] == "SUCCESS"
    with open(trace) as fh:
        assert next(csv.reader(fh)) == LOG_COLUMNS


@pytest.mark.parametrize(
    "argv",
    [[], ["learn"], ["learn", "nowhere", "--out", "x"], ["eval"], ["learn", "peg", "--budget", "ten", "--out", "x"]],
)
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert capsys.readouterr().err


def test_bad_policy_file_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    assert main(["eval", str(bad)]) == EXIT_CONFIG
    assert main(["inspect", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    assert main(["learn", "peg", "--budget", "-1", "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert "error" in capsys.readouterr().err


def test_unwritable_output_exits_3(tmp_path, obstacle_policy, capsys):
    blocked = tmp_path / "dir"
    blocked.mkdir()
    assert main(["replay", str(obstacle_policy), "--trace-csv", str(blocked)]) == EXIT_RUNTIME
    assert "runtime fault" in capsys.readouterr().err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "btms", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "learn" in res.stdout
