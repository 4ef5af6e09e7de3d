import pytest

from vmimon import monitor as monitor_mod
from vmimon.oracle import first_failures, fuzz, fuzz_run, introspection_fidelity
from vmimon.policy import Policy
from vmimon.scenario import Scenario
from vmimon.sim import Simulation, Strategy

from conftest import CORPUS


def test_small_fuzz_campaign_is_clean(fuzz_scenario):
    report = fuzz(fuzz_scenario, runs=40)
    assert report.ok, list(first_failures(report))
    s = report.summary()
    assert s["ops"] == 40 * 30 and s["opens_checked"] > 0 and s["blocked"] > 0 and s["prunes"] > 0


def test_fuzz_runs_are_reproducible(fuzz_scenario):
    assert fuzz_run(fuzz_scenario, 11) == fuzz_run(fuzz_scenario, 11)


def test_oracle_catches_a_permissive_monitor(fuzz_scenario, monkeypatch):
    monkeypatch.setattr(Policy, "permits_all", lambda self, subject, ops: True)
    report = fuzz(fuzz_scenario, runs=10)
    assert any(r.missed_blocks for r in report.runs)


def test_oracle_catches_a_leaked_blocked_handle(fuzz_scenario, monkeypatch):
    # a monitor that patches the result but forgets to scrub leaves a usable fd behind
    monkeypatch.setattr(monitor_mod.Monitor, "_scrub", lambda self, ctx, fd, block: None)
    report = fuzz(fuzz_scenario, runs=10)
    assert report.equivalence_failures
    assert any(r.fd_leaks for r in report.runs)


@pytest.mark.parametrize("path", CORPUS, ids=lambda p: p.stem)
@pytest.mark.parametrize("strategy", [Strategy.SHARED, Strategy.ISOLATED])
def test_introspection_fidelity_on_corpus(path, strategy):
    sim = Simulation.build(Scenario.load(path), strategy)
    assert introspection_fidelity(sim) == []
    if strategy is Strategy.ISOLATED:
        sim.run_trace()
        assert introspection_fidelity(sim) == []
