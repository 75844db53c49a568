import csv

import pytest

from comesh.cli import main

SMALL = """\
name: tiny
experiment: CLIENT_DELAY
topology: GRID3D
horizon: 300
config: {N: 50, f: 1, epoch_length: 200}
workload: {routines: 3, devices_per_routine: 2}
seeds: [0, 1]
"""


@pytest.fixture
def scenario(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(SMALL)
    return p


def test_avail_prints_csv(capsys):
    assert main(["avail", "--S", "10", "--G", "1", "--f", "1", "--F-range", "0:3"]) == 0
    rows = list(csv.reader(capsys.readouterr().out.splitlines()))
    assert rows[0] == ["F", "availability [probability]"]
    assert [r[0] for r in rows[1:]] == ["0", "1", "2", "3"]
    assert float(rows[3][1]) == pytest.approx(14 / 15)


def test_avail_with_montecarlo(capsys):
    assert main(["avail", "--S", "40", "--G", "4", "--f", "2", "--F-range", "6", "--mc", "2000"]) == 0
    head = capsys.readouterr().out.splitlines()[0]
    assert head.endswith("mc_estimate [probability],mc_stderr [probability]")


def test_run_writes_csvs_and_traces(scenario, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", str(scenario), "--out", str(out), "--traces"]) == 0
    assert (out / "client_delay.csv").exists() and (out / "summary.csv").exists()
    assert list(out.rglob("*.jsonl"))
    assert "client_delay" in capsys.readouterr().out


def test_run_is_deterministic(scenario, tmp_path):
    for d in ("a", "b"):
        assert main(["run", str(scenario), "--out", str(tmp_path / d), "--seeds", "3"]) == 0
    for p in sorted((tmp_path / "a").glob("*.csv")):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_verify_reports_each_monitor(scenario, capsys):
    assert main(["verify", str(scenario), "--seeds", "0"]) == 0
    out = capsys.readouterr().out
    for name in ("safety", "fifo", "deadlock", "election", "inheritance", "progress"):
        assert f"{name}" in out and "FAIL" not in out


def test_bad_config_exits_two(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text(SMALL.replace("f: 1", "f: -1"))
    assert main(["run", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "error" in capsys.readouterr().err


def test_missing_file_exits_two(tmp_path):
    assert main(["verify", str(tmp_path / "nope.yaml")]) == 2


def test_usage_error_exits_two():
    with pytest.raises(SystemExit) as err:
        main(["avail", "--S", "10"])
    assert err.value.code == 2
