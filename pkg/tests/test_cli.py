import argparse
import json

import pytest
import yaml

from vmimon.bench import run_startup
from vmimon.cli import EXIT_FAILED, EXIT_OK, EXIT_USAGE, main, parse_files

from conftest import SCENARIOS, load

MINIMAL = str(SCENARIOS / "minimal.yaml")
ATTACKS = str(SCENARIOS / "attacks.yaml")
BENCH = str(SCENARIOS / "bench.yaml")


def _write(tmp_path, doc, name="s.yaml"):
    f = tmp_path / name
    f.write_text(yaml.safe_dump(doc))
    return str(f)


def test_validate_ok(capsys):
    assert main(["validate", "--scenario", MINIMAL]) == EXIT_OK
    assert capsys.readouterr().out.startswith("ok: scenario 'minimal'")


def test_validate_names_undefined_container(tmp_path, capsys):
    doc = yaml.safe_load(open(MINIMAL))
    doc["policies"].append({"scope": "container:ghost", "path": "/etc/app.conf"})
    assert main(["validate", "--scenario", _write(tmp_path, doc)]) == EXIT_USAGE
    assert "error: policies[1].scope: undefined container 'ghost'" in capsys.readouterr().err


def test_validate_names_bad_block_size(tmp_path, capsys):
    doc = yaml.safe_load(open(BENCH))
    doc["workloads"]["fileio"]["block_size"] = 65535
    assert main(["validate", "--scenario", _write(tmp_path, doc)]) == EXIT_USAGE
    assert "workloads.fileio.total_bytes" in capsys.readouterr().err


def test_missing_scenario_file(tmp_path, capsys):
    assert main(["validate", "--scenario", str(tmp_path / "nope.yaml")]) == EXIT_USAGE
    assert "cannot read" in capsys.readouterr().err


def test_simulate_minimal_logs_one_open(tmp_path):
    out = tmp_path / "events.log"
    assert main(["simulate", "--scenario", MINIMAL, "--out", str(out)]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert [json.loads(x)["kind"] for x in lines] == ["FileOpened"]
    assert list(json.loads(lines[0])) == ["seq", "kind", "pid", "process", "uid", "container", "path", "serial", "detail"]


def test_simulate_attack_bundle_passes_every_expectation(tmp_path):
    assert main(["simulate", "--scenario", ATTACKS, "--out", str(tmp_path / "e.log")]) == EXIT_OK


def test_simulate_twice_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.log", tmp_path / "b.log"
    for f in (a, b):
        assert main(["simulate", "--scenario", ATTACKS, "--out", str(f)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()


def test_simulate_reports_failed_expectation(tmp_path, capsys):
    doc = yaml.safe_load(open(MINIMAL))
    doc["trace"][0]["expect"] = "error"
    assert main(["simulate", "--scenario", _write(tmp_path, doc), "--out", str(tmp_path / "e")]) == EXIT_FAILED
    assert "trace step 0" in capsys.readouterr().err


def test_simulate_rejects_unmonitored_strategy():
    with pytest.raises(SystemExit):
        main(["simulate", "--scenario", MINIMAL, "--strategy", "none"])


def test_bench_all_strategies_table(capsys):
    assert main(["bench", "--scenario", BENCH, "--workload", "memcopy"]) == EXIT_OK
    body = capsys.readouterr().out.splitlines()[3:]
    assert [line.split()[0] for line in body] == ["NoMonitoring", "InterceptAllSyscalls", "SharedPageWatch", "IsolatedPageWatch"]


def test_bench_records_are_stable(tmp_path):
    outs = []
    for name in ("a", "b"):
        f = tmp_path / name
        assert main(["bench", "--scenario", BENCH, "--workload", "memcopy", "--format", "records", "--out", str(f)]) == EXIT_OK
        outs.append(f.read_text())
    assert outs[0] == outs[1]
    keys = [line.split(" ")[0] for line in outs[0].splitlines()]
    assert keys[:7] == sorted(keys[:7]) and keys[0] == "memcopy.none.breakpoints"


def test_bench_startup_rows_match_library(capsys):
    assert main(["bench", "--scenario", BENCH, "--workload", "startup", "--files", "100..500", "--format", "records"]) == EXIT_OK
    lines = dict(line.split(" ") for line in capsys.readouterr().out.splitlines())
    scn = load("bench")
    rows = run_startup(scn, scn.workloads["startup"])
    assert [r.n_files for r in rows] == [100, 200, 300, 400, 500]
    for r in rows:
        assert float(lines[f"startup.files{r.n_files}.overhead_pct"]) == pytest.approx(r.overhead_pct, abs=1e-4)


def test_bench_unknown_workload(capsys):
    assert main(["bench", "--scenario", BENCH, "--workload", "nope"]) == EXIT_USAGE
    assert "unknown workload 'nope'" in capsys.readouterr().err


def test_bench_block_size_must_divide(capsys):
    code = main(["bench", "--scenario", BENCH, "--workload", "fileio", "--strategy", "none", "--block-size", "65535"])
    assert code == EXIT_USAGE
    assert "--block-size" in capsys.readouterr().err


def test_attack_command_all_blocked(capsys):
    assert main(["attack", "--scenario", ATTACKS, "--format", "records"]) == EXIT_OK
    recs = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert len(recs) == 7 and {r["verdict"] for r in recs} == {"Blocked"}


def test_attack_subset(capsys):
    assert main(["attack", "--scenario", ATTACKS, "--name", "KillAgent", "--name", "KernelPatch"]) == EXIT_OK
    assert [line.split()[0] for line in capsys.readouterr().out.splitlines()] == ["KillAgent", "KernelPatch"]


@pytest.mark.parametrize(
    "text, expected",
    [("100..500", [100, 200, 300, 400, 500]), ("10..30:10", [10, 20, 30]), ("5,7", [5, 7])],
)
def test_parse_files(text, expected):
    assert parse_files(text) == expected


@pytest.mark.parametrize("text", ["0..5", "5..1", "a,b", "-1"])
def test_parse_files_rejects(text):
    with pytest.raises(argparse.ArgumentTypeError):
        parse_files(text)
