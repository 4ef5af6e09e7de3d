"""Assemble a runnable simulation instance from a :class:`Scenario`.

One :class:`Simulation` owns its memory, hypervisor, kernel and monitor; nothing
is shared between instances, so bench cells can run independently.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional

from .agents import POLICY_IMAGE_PATH, SecurityAgent
from .fs import Mount, Storage
from .hypervisor import FILE_SYSCALLS, Hypervisor, Site
from .introspection import ContainerRuntimeConfig, Introspector
from .kernel import INIT_NS, IoDirection, Kernel, NamespaceSet, OpenMode, Process, SyscallInstance
from .memory import GuestMemory, LayoutProfile, Placement, SlabAllocator
from .monitor import Monitor, MonitorConfig
from .policy import PolicySet
from .scenario import Scenario


class Strategy(Enum):
    NONE = "none"
    INTERCEPT = "intercept"
    SHARED = "sharedpage"
    ISOLATED = "isolated"

    @property
    def label(self) -> str:
        return {
            Strategy.NONE: "NoMonitoring",
            Strategy.INTERCEPT: "InterceptAllSyscalls",
            Strategy.SHARED: "SharedPageWatch",
            Strategy.ISOLATED: "IsolatedPageWatch",
        }[self]

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        for s in cls:
            if text in (s.value, s.label, s.name.lower()):
                return s
        raise ValueError(f"unknown strategy {text!r}")


class InterceptAll:
    """In-guest style interception: a breakpoint on every file syscall entry."""

    def __init__(self, hv: Hypervisor):
        self.hv = hv
        self.seen = 0
        for name in FILE_SYSCALLS:
            hv.arm_breakpoint(Site.entry(name))
        hv.on_breakpoint = self._on_breakpoint

    def _on_breakpoint(self, ev) -> None:
        self.seen += 1
        return None


@dataclass
class Simulation:
    scenario: Scenario
    strategy: Strategy
    memory: GuestMemory
    profile: LayoutProfile
    allocator: SlabAllocator
    hv: Hypervisor
    storage: Storage
    kernel: Kernel
    intro: Introspector
    procs: dict[str, Process] = field(default_factory=dict)
    containers: dict[str, NamespaceSet] = field(default_factory=dict)
    monitor: Optional[Monitor] = None
    agent: Optional[SecurityAgent] = None
    interceptor: Optional[InterceptAll] = None
    agent_reports: list = field(default_factory=list)
    setup_mseq: int = 0
    setup_counters: Any = None
    labels: dict[str, int] = field(default_factory=dict)
    rng: random.Random = field(default_factory=random.Random)

    # ------------------------------------------------------------------
    @classmethod
    def build(
        cls,
        scenario: Scenario,
        strategy: Strategy = Strategy.ISOLATED,
        seed: Optional[int] = None,
        monitoring: bool = True,
    ) -> "Simulation":
        seed = scenario.seed if seed is None else seed
        ms = scenario.memory
        memory = GuestMemory(ms.pages, ms.page_size)
        if scenario.profile_path:
            profile = LayoutProfile.load(scenario.base_dir / scenario.profile_path)
        else:
            profile = LayoutProfile.default()
        allocator = SlabAllocator(memory, profile, ms.isolated_pages)
        hv = Hypervisor(memory, scenario.cost())
        storage = Storage()
        for spec in scenario.layers:
            layer = storage.layer(spec.id, writable=spec.id == scenario.host_layer)
            for d in spec.dirs:
                layer.mkdirs(d)
            for f in spec.files:
                layer.add_file(f.path, f.content, f.mode, f.uid)
        for c in scenario.containers:
            storage.layer(c.upper, writable=True)
        for fs in scenario.filesets.values():
            layer = storage.layer(fs.layer)
            layer.mkdirs(fs.dir)
            for i, path in enumerate(fs.paths()):
                layer.add_file(path, bytes([i % 251]) * fs.size, fs.mode, fs.uid)
        host = storage.layers[scenario.host_layer]
        # Policies travel inside the guest image, where the security agent reads them.
        host.add_file(POLICY_IMAGE_PATH, scenario.policy_document().encode(), 0o600, 0)
        kernel = Kernel(memory, allocator, hv, profile, storage, ms.hash_buckets)
        init = kernel.boot(host)
        procs = {"host/init": init}
        for p in scenario.host_processes:
            procs[f"host/{p.name}"] = kernel.spawn_process(p.name, p.uid, INIT_NS)
        containers: dict[str, NamespaceSet] = {}
        runtime = []
        for c in scenario.containers:
            ns = kernel.new_namespaces()
            lower = [storage.layers[lid] for lid in c.layers]
            mount = Mount.overlay(lower, storage.layers[c.upper], c.id)
            kernel.add_mount(ns.mnt_ns, mount)
            containers[c.id] = ns
            runtime.append(ContainerRuntimeConfig(c.id, list(c.layers), c.upper, mount))
            for p in c.processes:
                procs[f"{c.id}/{p.name}"] = kernel.spawn_process(p.name, p.uid, ns, container_id=c.id)
        intro = Introspector(hv, profile, kernel.symbols, runtime)
        for cid, ns in containers.items():
            # The engine reports each container's init pid, hence its pid namespace.
            intro.name_container(ns.pid_ns, cid)
        sim = cls(
            scenario, strategy, memory, profile, allocator, hv, storage, kernel, intro,
            procs, containers, rng=random.Random(seed),
        )
        sim.warm_up(seed)
        if monitoring:
            sim.start_monitoring()
        return sim

    # ------------------------------------------------------------------
    def warm_up(self, seed: Optional[int] = None) -> None:
        """Open and close a shuffled sample of files so their dentries are cached."""
        w = self.scenario.warmup
        if w is None:
            return
        proc = self.procs[w.process]
        for path in self.scenario.warmup_paths(seed):
            fd = self.kernel.syscall_open(proc, path)
            if fd >= 0:
                self.kernel.syscall_close(proc, fd)

    def start_monitoring(self) -> None:
        s = self.strategy
        if s is Strategy.INTERCEPT:
            self.interceptor = InterceptAll(self.hv)
        elif s in (Strategy.SHARED, Strategy.ISOLATED):
            isolated = s is Strategy.ISOLATED
            cfg = MonitorConfig(
                placement=Placement.ISOLATED if isolated else Placement.DEFAULT,
                migrate=isolated,
            )
            self.monitor = Monitor(self.hv, self.intro, self.allocator, PolicySet(self.scenario.policies()), cfg)
            self.monitor.attach()
            self.agent = SecurityAgent(self.kernel)
            self.procs["host/secagent"] = self.agent.proc
            wanted = {c.id: self.containers[c.id] for c in self.scenario.containers if c.hidden_agent}
            self.agent_reports = self.agent.start(wanted, cfg.placement)
            for cid, a in self.agent.hidden.items():
                self.procs[f"{cid}/hagent"] = a.proc
            self.monitor.protect_static_regions()
            self.monitor.arm_watchpoints()
        self.setup_mseq = self.kernel.mseq
        self.setup_counters = self.hv.snapshot()

    # ------------------------------------------------------------------
    def proc(self, ref: str) -> Process:
        try:
            return self.procs[ref]
        except KeyError:
            raise KeyError(f"unknown process {ref!r}") from None

    def resolve_pid(self, target: Any) -> int:
        if isinstance(target, int):
            return target
        if target == "secagent" and self.agent:
            return self.agent.proc.pid
        if isinstance(target, str) and target.startswith("agent:") and self.agent:
            return self.agent.hidden[target.split(":", 1)[1]].proc.pid
        return self.proc(target).pid

    def file_content(self, scope: str, path: str) -> Optional[bytes]:
        mnt_ns = INIT_NS.mnt_ns if scope in ("host", "Host") else self.containers[scope].mnt_ns
        hit = self.kernel.mounts[mnt_ns].resolve(path)
        return bytes(hit[1].content) if hit else None

    def _fd(self, step: dict) -> int:
        fd = step.get("fd")
        if isinstance(fd, str):
            return self.labels.get(fd.lstrip("$"), -1)
        return int(fd)

    def start_step(self, step: dict) -> Optional[SyscallInstance]:
        """Begin one trace step; returns the syscall instance (None for non-syscalls)."""
        op = step["op"]
        k = self.kernel
        if op == "prune":
            k.dcache_prune()
            return None
        proc = self.proc(step["proc"])
        if op == "open":
            return k.start(
                proc,
                "open",
                path=step["path"],
                mode=OpenMode.parse(step.get("mode", "r")),
                placement=Placement(step.get("placement", "Default")),
                create=bool(step.get("create", False)),
            )
        if op == "close":
            return k.start(proc, "close", fd=self._fd(step))
        if op in ("read", "write"):
            data = step.get("data")
            data = data.encode() if isinstance(data, str) else data
            nbytes = int(step.get("nbytes", len(data) if data else 0))
            return k.start(proc, op, fd=self._fd(step), nbytes=nbytes, block_size=int(step.get("block_size", 4096)), data=data)
        if op == "link":
            return k.start(proc, "link", existing=step["existing"], newpath=step["newpath"])
        if op == "unlink":
            return k.start(proc, "unlink", path=step["path"])
        if op == "kill":
            return k.start(proc, "kill", pid=self.resolve_pid(step["target"]), sig=int(step.get("sig", 9)))
        if op == "getdents":
            return k.start(proc, "getdents", path=step["path"])
        if op == "kernel_write":
            return None
        raise ValueError(f"unknown op {op!r}")

    def run_step(self, step: dict) -> Any:
        if step["op"] == "kernel_write":
            addr = self.kernel.symbols[step["symbol"]] if step["symbol"] in self.kernel.symbols else int(step["symbol"], 0)
            data = step.get("bytes", "00")
            return self.kernel.raw_kernel_write(self.proc(step["proc"]), addr, bytes.fromhex(data))
        inst = self.start_step(step)
        if inst is None:
            return None
        result = self.kernel.run(inst)
        if step["op"] == "open" and "as" in step:
            self.labels[step["as"]] = result
        return result

    def run_trace(self, trace: Optional[list[dict]] = None) -> list[dict]:
        out = []
        for i, step in enumerate(self.scenario.trace if trace is None else trace):
            result = self.run_step(step)
            rec = {"step": i, "op": step["op"], "proc": step.get("proc", "kernel"), "result": result}
            if "expect" in step:
                rec["expect"] = step["expect"]
                rec["ok"] = _matches(result, step["expect"])
            out.append(rec)
        return out

    def self_check(self) -> list[str]:
        """Invariant checks run after a simulation (exit status depends on them)."""
        problems = []
        holds = dict(self.monitor.holds) if self.monitor else {}
        expected = self.kernel.recount(holds)
        actual = self.kernel.actual_refcounts()
        for serial in sorted(set(expected) | set(actual)):
            if expected.get(serial) != actual.get(serial):
                problems.append(f"dentry serial {serial}: refcount {actual.get(serial)} != recount {expected.get(serial)}")
        if self.monitor:
            problems += self.monitor.check_liveness()
            problems += self.monitor.check_alias_closure()
        roster = {(p.pid, p.name) for p in self.intro.walk_process_list()}
        truth = {(p.pid, p.name[:15]) for p in self.kernel.alive_processes()}
        if roster != truth:
            problems.append("introspected roster differs from the guest's process table")
        return problems


def _matches(result: Any, expect: Any) -> bool:
    if expect == "ok":
        return isinstance(result, int) and result >= 0 or isinstance(result, list)
    if expect == "error":
        return isinstance(result, int) and result < 0
    return result == expect


def io_direction(name: str) -> IoDirection:
    return IoDirection.READ if name == "read" else IoDirection.WRITE
