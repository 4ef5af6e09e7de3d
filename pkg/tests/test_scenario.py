import copy

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmimon.introspection import HOST
from vmimon.scenario import Scenario, ScenarioError

from conftest import CORPUS, load

GOOD = {
    "name": "t",
    "seed": 1,
    "layers": [{"id": "host", "files": ["/etc/a"]}, {"id": "base", "files": ["/bin/sh"]}],
    "host_processes": [{"name": "bash", "uid": 0}],
    "containers": [{"id": "c", "layers": ["base"], "processes": ["sh"]}],
    "policies": [{"scope": "container:c", "path": "/bin/sh", "allow": [{"process": "sh"}]}],
}


def _problems(**changes):
    doc = copy.deepcopy(GOOD)
    for k, v in changes.items():
        if v is None:
            doc.pop(k)
        else:
            doc[k] = v
    with pytest.raises(ScenarioError) as e:
        Scenario.from_mapping(doc)
    return e.value.problems


@pytest.mark.parametrize("path", CORPUS, ids=lambda p: p.stem)
def test_shipped_scenarios_validate(path):
    scn = Scenario.load(path)
    assert scn.name == path.stem


def test_good_document_loads():
    scn = Scenario.from_mapping(GOOD)
    assert [p.target for p in scn.policies()] == [("c", "/bin/sh")]
    assert scn.process_refs() == {"host/init", "host/bash", "c/sh"}
    assert scn.container("c").upper == "c-upper"


def test_seed_is_required():
    assert _problems(seed=None) == [("seed", "is required (runs must be reproducible)")]


def test_unknown_top_level_key():
    assert ("colour", "unknown key") in _problems(colour=1)


def test_undefined_container_is_named_with_position():
    probs = _problems(policies=[{"scope": "container:nope", "path": "/x"}])
    assert probs == [("policies[0].scope", "undefined container 'nope'")]


def test_policy_for_missing_path():
    probs = _problems(policies=[{"scope": "host", "path": "/etc/missing"}])
    assert probs[0][0] == "policies[0].path" and "does not exist" in probs[0][1]


def test_duplicate_policy_target_reported():
    pol = {"scope": "host", "path": "/etc/a"}
    probs = _problems(policies=[pol, pol])
    assert probs[0][0] == "policies[1].path"


def test_trace_process_must_exist():
    probs = _problems(trace=[{"op": "open", "proc": "host/ghost", "path": "/etc/a"}])
    assert probs == [("trace[0].proc", "undefined process 'host/ghost'")]


def test_trace_op_must_be_known():
    probs = _problems(trace=[{"op": "chmod", "proc": "host/bash"}])
    assert probs[0][0] == "trace[0].op"


def test_fileio_block_size_must_divide_total():
    w = {"io": {"kind": "fileio", "process": "host/bash", "fileset": "f", "total_bytes": 1000, "block_size": 300}}
    fs = {"f": {"layer": "host", "dir": "/d", "count": 2}}
    probs = _problems(workloads=w, filesets=fs)
    assert probs == [("workloads.io.total_bytes", "total bytes must be a multiple of block_size")]


def test_memory_checks():
    probs = _problems(memory={"pages": 64, "isolated_pages": 64, "page_size": 1000})
    assert {p for p, _ in probs} == {"memory.page_size", "memory.isolated_pages"}


def test_reserved_and_duplicate_container_ids():
    cs = [{"id": "host", "layers": ["base"]}, {"id": "x", "layers": ["base"]}, {"id": "x", "layers": ["base"]}]
    positions = [p for p, _ in _problems(containers=cs, policies=[])]
    assert "containers[0].id" in positions and "containers[2].id" in positions


def test_bad_yaml_reports_line(tmp_path):
    f = tmp_path / "bad.yaml"
    f.write_text("seed: 1\nlayers: [\n")
    with pytest.raises(ScenarioError) as e:
        Scenario.load(f)
    assert e.value.problems[0][0].startswith(f"{f}:")


def test_generated_policies_expand_in_fileset_order(bench_scenario):
    pols = bench_scenario.policies()
    assert len(pols) == 500
    assert pols[0].path == "/data/watched/w000" and pols[0].scope == "app"


def test_policy_document_round_trips(attacks_scenario):
    from vmimon.policy import load_policies

    assert load_policies(attacks_scenario.policy_document()) == attacks_scenario.policies()
    assert attacks_scenario.policies()[0].scope == HOST


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_warmup_sample_is_a_seeded_function(seed):
    scn = load("bench")
    scn.seed = seed
    a, b = scn.warmup_paths(), scn.warmup_paths()
    assert a == b and len(a) == len(set(a)) == 25 + 450 + 64


def test_seed_override_reaches_the_warmup(bench_scenario):
    assert bench_scenario.warmup_paths() == bench_scenario.warmup_paths(bench_scenario.seed)
    assert bench_scenario.warmup_paths(1) != bench_scenario.warmup_paths(2)
