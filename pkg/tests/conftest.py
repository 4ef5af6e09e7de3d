from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import pytest

from vmimon.fs import Layer, Storage
from vmimon.hypervisor import CostModel, Hypervisor
from vmimon.kernel import Kernel, Process
from vmimon.memory import GuestMemory, LayoutProfile, SlabAllocator
from vmimon.scenario import Scenario

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"
CORPUS = sorted(SCENARIOS.glob("*.yaml"))


@dataclass
class Guest:
    """A booted bare kernel with no monitor attached."""

    memory: GuestMemory
    profile: LayoutProfile
    allocator: SlabAllocator
    hv: Hypervisor
    storage: Storage
    host: Layer
    kernel: Kernel
    init: Process
    extra: dict = field(default_factory=dict)


def make_guest(
    files: dict[str, bytes] | None = None,
    pages: int = 256,
    isolated_pages: int = 8,
    buckets: int = 64,
    cost: CostModel | None = None,
) -> Guest:
    memory = GuestMemory(pages)
    profile = LayoutProfile.default()
    allocator = SlabAllocator(memory, profile, isolated_pages)
    hv = Hypervisor(memory, cost)
    storage = Storage()
    host = storage.layer("host", writable=True)
    host.mkdirs("/tmp")
    for path, content in (files or {"/path1/target": b"t", "/etc/app.conf": b"conf"}).items():
        host.add_file(path, content)
    kernel = Kernel(memory, allocator, hv, profile, storage, buckets)
    init = kernel.boot(host)
    return Guest(memory, profile, allocator, hv, storage, host, kernel, init)


@pytest.fixture
def guest() -> Guest:
    return make_guest()


def load(name: str) -> Scenario:
    return Scenario.load(SCENARIOS / f"{name}.yaml")


@pytest.fixture(scope="session")
def attacks_scenario() -> Scenario:
    return load("attacks")


@pytest.fixture(scope="session")
def bench_scenario() -> Scenario:
    return load("bench")


@pytest.fixture(scope="session")
def fuzz_scenario() -> Scenario:
    return load("fuzz")


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
