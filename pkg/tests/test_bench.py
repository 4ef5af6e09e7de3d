import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmimon.bench import compare_strategies, run_startup, run_workload
from vmimon.hypervisor import CostModel
from vmimon.sim import Simulation, Strategy


def _small(scn, name, **changes):
    spec = dataclasses.replace(scn.workloads[name], **changes)
    return dataclasses.replace(scn, workloads={**scn.workloads, name: spec})


@pytest.fixture(scope="module")
def small_io(bench_scenario):
    return _small(bench_scenario, "fileio", total_bytes=8 * 2**20, block_size=65536)


@pytest.fixture(scope="module")
def io_report(small_io):
    return compare_strategies(small_io, "fileio")


def _expected_file_syscalls(scn):
    spec = scn.workloads["fileio"]
    files = scn.filesets[spec.fileset].count
    per_phase = spec.total_bytes // spec.block_size + 2 * files
    return per_phase * len(spec.phases)


def test_intercept_traps_every_file_syscall(small_io, io_report):
    row = io_report.row(Strategy.INTERCEPT)
    assert row.breakpoints == row.syscalls == _expected_file_syscalls(small_io)


def test_isolated_takes_no_traps_on_unwatched_files(io_report):
    row = io_report.row(Strategy.ISOLATED)
    assert row.ept_violations == 0 and row.false_traps == 0
    assert row.overhead_pct == pytest.approx(0.0)


def test_unmonitored_run_is_the_baseline(io_report):
    none = io_report.row(Strategy.NONE)
    assert none.overhead_pct == 0.0 and none.breakpoints == none.ept_violations == 0


def test_shared_false_traps_are_ept_violations(io_report):
    row = io_report.row(Strategy.SHARED)
    assert row.false_traps > 0
    # every trap in the shared run is an unrelated write to a co-located object
    assert row.ept_violations == row.false_traps
    # false traps come from opens and closes, so their count does not scale with bytes
    assert row.false_traps <= 2 * io_report.row(Strategy.INTERCEPT).breakpoints


def test_cycles_follow_the_cost_model(io_report):
    cm = CostModel()
    for r in io_report.rows:
        assert r.cycles == pytest.approx(cm.cycles(r.counts))


def test_halving_block_size_doubles_block_traps(bench_scenario):
    a = _small(bench_scenario, "fileio", total_bytes=2**20, block_size=32768)
    b = _small(bench_scenario, "fileio", total_bytes=2**20, block_size=16384)
    ra = compare_strategies(a, "fileio", [Strategy.INTERCEPT]).row(Strategy.INTERCEPT)
    rb = compare_strategies(b, "fileio", [Strategy.INTERCEPT]).row(Strategy.INTERCEPT)
    io_calls = lambda r: r.breakpoints - 4 * 64  # noqa: E731  (open+close per file, two phases)
    assert io_calls(rb) == 2 * io_calls(ra)


def test_non_dividing_block_size_rejected(bench_scenario):
    scn = _small(bench_scenario, "fileio", total_bytes=1000, block_size=300)
    sim = Simulation.build(scn, Strategy.NONE)
    with pytest.raises(ValueError):
        run_workload(sim, scn.workloads["fileio"])


def test_startup_overhead_is_linear_in_files(bench_scenario):
    spec = dataclasses.replace(bench_scenario.workloads["startup"], files=[0, 100, 200])
    rows = run_startup(bench_scenario, spec)
    cm = CostModel()
    assert [r.cache_creations for r in rows] == [0, 100, 200]
    for r in rows:
        assert r.overhead_pct == pytest.approx(100 * r.n_files * cm.cache_creation_per_file / cm.base_startup_cycles)
        assert r.cfwatcher_pct == pytest.approx(100 * r.n_files * cm.cfwatcher_injection_per_file / cm.base_startup_cycles)
    assert rows[0].overhead_pct == 0.0


def test_startup_beyond_fileset_is_rejected(bench_scenario):
    spec = dataclasses.replace(bench_scenario.workloads["startup"], files=[501])
    with pytest.raises(ValueError):
        run_startup(bench_scenario, spec)


@pytest.fixture(scope="module")
def memcopy_reports(bench_scenario):
    out = {}
    for mode in ("MEMCPY", "DUMP", "MCBLOCK"):
        scn = _small(bench_scenario, "memcopy", mode=mode, bytes=2**20)
        out[mode] = compare_strategies(scn, "memcopy")
    return out


def test_memcopy_counts_identical_across_strategies(memcopy_reports):
    for rep in memcopy_reports.values():
        counts = {r.strategy: r.counts for r in rep.rows}
        assert len({tuple(sorted(c.items())) for c in counts.values()}) == 1
        assert all(r.overhead_pct == 0.0 for r in rep.rows)


def test_memcopy_modes_differ_only_by_per_byte_cost(memcopy_reports):
    cm = CostModel()
    base = memcopy_reports["MEMCPY"].row(Strategy.NONE).cycles
    for mode, per_byte in (("DUMP", cm.per_byte_dump), ("MCBLOCK", cm.per_byte_mcblock)):
        cycles = memcopy_reports[mode].row(Strategy.NONE).cycles
        assert cycles - base == pytest.approx(2**20 * (per_byte - cm.per_byte_memcopy))


def test_zero_byte_copy_costs_nothing(bench_scenario):
    scn = _small(bench_scenario, "memcopy", bytes=0)
    rep = compare_strategies(scn, "memcopy")
    assert all(r.cycles == 0 for r in rep.rows)


def test_reports_are_deterministic(small_io, io_report):
    again = compare_strategies(small_io, "fileio")
    assert again.records() == io_report.records()


def test_cells_share_nothing(small_io, io_report):
    alone = compare_strategies(small_io, "fileio", [Strategy.SHARED])
    assert alone.row(Strategy.SHARED).metrics() == io_report.row(Strategy.SHARED).metrics()


def test_records_are_name_value_lines(io_report):
    for line in io_report.records():
        key, value = line.split(" ")
        assert key.startswith("fileio.") and float(value) == float(value)


@settings(max_examples=4, deadline=None)
@given(st.integers(1, 2), st.sampled_from([16384, 32768, 65536]))
def test_intercept_count_formula(mib, block):
    from conftest import load

    scn = _small(load("bench"), "fileio", total_bytes=mib * 2**20, block_size=block)
    row = compare_strategies(scn, "fileio", [Strategy.INTERCEPT]).row(Strategy.INTERCEPT)
    assert row.breakpoints == _expected_file_syscalls(scn)
