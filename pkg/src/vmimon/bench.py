"""Benchmarks and attack scripts.

Every cell (workload × strategy) runs in a fresh :class:`Simulation`, so cells
share nothing.  Costs are modeled: event counts are multiplied by the cost
model and overhead is reported relative to the unmonitored run of the same
workload on the same seed.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .hypervisor import CpuContext, MetricsReport
from .introspection import HOST
from .kernel import IoDirection, OpenMode
from .memory import PageKind
from .scenario import Scenario, WorkloadSpec
from .sim import Simulation, Strategy

ATTACKS = (
    "TamperRunc",
    "TamperWebPage",
    "ReplaceLogin",
    "KillAgent",
    "HardlinkBypass",
    "GuessFdBypass",
    "KernelPatch",
)

DEFAULT_ATTACK_PARAMS: dict[str, dict] = {
    "TamperRunc": {"attacker": "host/exploit", "path": "/usr/bin/runc"},
    "TamperWebPage": {"attacker": "web/sh", "reader": "web/httpd", "path": "/www/target.html"},
    "ReplaceLogin": {"attacker": "web/sh", "path": "/bin/login"},
    "KillAgent": {"attacker": "web/sh", "host_attacker": "host/exploit"},
    "HardlinkBypass": {"attacker": "host/exploit", "path": "/usr/bin/runc", "link": "/tmp/rl"},
    "GuessFdBypass": {"attacker": "host/exploit", "path": "/usr/bin/runc"},
    "KernelPatch": {"attacker": "web/sh"},
}

PAYLOAD = b"#!/bin/sh\n# overwritten\n"
GUESSED_FDS = 16


# ----------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------
@dataclass
class StrategyResult:
    strategy: Strategy
    counts: dict[str, int]
    cycles: float
    overhead_pct: float = 0.0
    false_traps: int = 0
    syscalls: int = 0

    @property
    def ept_violations(self) -> int:
        return self.counts.get("ept_violation", 0)

    @property
    def breakpoints(self) -> int:
        return self.counts.get("breakpoint", 0)

    def metrics(self) -> dict[str, float]:
        return {
            "breakpoints": self.breakpoints,
            "cycles": round(self.cycles, 1),
            "ept_violations": self.ept_violations,
            "false_traps": self.false_traps,
            "overhead_pct": round(self.overhead_pct, 4),
            "single_steps": self.counts.get("single_step", 0),
            "syscalls": self.syscalls,
        }


@dataclass
class StartupRow:
    n_files: int
    cache_creations: int
    base_cycles: float
    extra_cycles: float
    overhead_pct: float
    cfwatcher_pct: float

    def metrics(self) -> dict[str, float]:
        return {
            "base_cycles": round(self.base_cycles, 1),
            "cache_creations": self.cache_creations,
            "cfwatcher_overhead_pct": round(self.cfwatcher_pct, 4),
            "extra_cycles": round(self.extra_cycles, 1),
            "overhead_pct": round(self.overhead_pct, 4),
        }


@dataclass
class BenchReport:
    scenario: str
    seed: int
    workload: str
    kind: str
    rows: list[StrategyResult] = field(default_factory=list)
    startup: list[StartupRow] = field(default_factory=list)

    def row(self, strategy: Strategy) -> StrategyResult:
        return next(r for r in self.rows if r.strategy is strategy)

    def records(self) -> list[str]:
        out = []
        for r in self.rows:
            for k, v in r.metrics().items():
                out.append(f"{self.workload}.{r.strategy.value}.{k} {_fmt(v)}")
        for s in self.startup:
            for k, v in s.metrics().items():
                out.append(f"{self.workload}.files{s.n_files}.{k} {_fmt(v)}")
        return out

    def table(self) -> str:
        lines = [f"# {self.scenario} seed={self.seed} workload={self.workload} ({self.kind})"]
        if self.rows:
            head = f"{'strategy':<22}{'ept':>9}{'false':>9}{'bkpt':>9}{'cycles':>16}{'overhead%':>11}"
            lines += [head, "-" * len(head)]
            for r in self.rows:
                lines.append(
                    f"{r.strategy.label:<22}{r.ept_violations:>9}{r.false_traps:>9}{r.breakpoints:>9}"
                    f"{r.cycles:>16.0f}{r.overhead_pct:>11.3f}"
                )
        if self.startup:
            head = f"{'files':>6}{'caches':>8}{'overhead%':>11}{'cfwatcher%':>12}"
            lines += [head, "-" * len(head)]
            for s in self.startup:
                lines.append(f"{s.n_files:>6}{s.cache_creations:>8}{s.overhead_pct:>11.3f}{s.cfwatcher_pct:>12.2f}")
        return "\n".join(lines) + "\n"


def _fmt(v: float) -> str:
    return str(v) if isinstance(v, int) else f"{v:.4f}"


# ----------------------------------------------------------------------
# workloads
# ----------------------------------------------------------------------
def _measure(sim: Simulation, before, syscalls: int, false_before: int = 0) -> StrategyResult:
    rep: MetricsReport = sim.hv.account(before)
    false = (sim.monitor.false_traps - false_before) if sim.monitor else 0
    return StrategyResult(sim.strategy, rep.counts, rep.cycles, false_traps=false, syscalls=syscalls)


def run_file_io(sim: Simulation, spec: WorkloadSpec) -> StrategyResult:
    """Write then read (per ``spec.phases``) every file of the set, one block per syscall."""
    if spec.block_size <= 0 or spec.total_bytes % spec.block_size:
        raise ValueError("total_bytes must be a multiple of block_size")
    k = sim.kernel
    proc = sim.proc(spec.process)
    paths = sim.scenario.filesets[spec.fileset].paths()
    blocks = spec.total_bytes // spec.block_size
    share = [blocks // len(paths) + (1 if i < blocks % len(paths) else 0) for i in range(len(paths))]
    before = sim.hv.snapshot()
    false_before = sim.monitor.false_traps if sim.monitor else 0
    calls = 0
    for phase in spec.phases:
        direction = IoDirection.READ if phase == "read" else IoDirection.WRITE
        mode = OpenMode.READ_ONLY if phase == "read" else OpenMode.WRITE_ONLY
        for path, n in zip(paths, share):
            fd = k.syscall_open(proc, path, mode)
            if fd < 0:
                raise RuntimeError(f"workload open of {path} failed with {fd}")
            for _ in range(n):
                k.syscall_io(proc, fd, direction, spec.block_size, spec.block_size)
            k.syscall_close(proc, fd)
            calls += n + 2
    return _measure(sim, before, calls, false_before)


def run_mem_copy(sim: Simulation, spec: WorkloadSpec, ring_pages: int = 16) -> StrategyResult:
    """Copy ``spec.bytes`` between two rings of user data pages, page by page."""
    ps = sim.memory.page_size
    src = [sim.memory.claim_page(PageKind.DATA) for _ in range(ring_pages)]
    dst = [sim.memory.claim_page(PageKind.DATA) for _ in range(ring_pages)]
    proc = sim.proc(spec.process) if spec.process else sim.procs["host/init"]
    ctx = CpuContext(proc.pid, proc.address_space_id, proc.stack_id, None)
    before = sim.hv.snapshot()
    false_before = sim.monitor.false_traps if sim.monitor else 0
    done = 0
    i = 0
    while done < spec.bytes:
        n = min(ps, spec.bytes - done)
        chunk = sim.hv.guest_read(ctx, src[i % ring_pages] * ps, n)
        sim.hv.guest_write(ctx, dst[i % ring_pages] * ps, chunk)
        done += n
        i += 1
    sim.hv.charge(f"memcopy_byte.{spec.mode}", spec.bytes)
    return _measure(sim, before, 0, false_before)


def run_workload(sim: Simulation, spec: WorkloadSpec) -> StrategyResult:
    if spec.kind == "fileio":
        return run_file_io(sim, spec)
    if spec.kind == "memcopy":
        return run_mem_copy(sim, spec)
    raise ValueError(f"workload kind {spec.kind!r} is not a per-strategy workload")


def compare_strategies(
    scenario: Scenario,
    workload: str,
    strategies: Iterable[Strategy] = tuple(Strategy),
    seed: Optional[int] = None,
) -> BenchReport:
    spec = scenario.workloads[workload]
    seed = scenario.seed if seed is None else seed
    report = BenchReport(scenario.name, seed, workload, spec.kind)
    if spec.kind == "startup":
        report.startup = run_startup(scenario, spec, seed)
        return report
    wanted = list(strategies)
    results = {}
    for s in [Strategy.NONE] + [s for s in wanted if s is not Strategy.NONE]:
        sim = Simulation.build(scenario, s, seed)
        results[s] = run_workload(sim, spec)
    base = results[Strategy.NONE].cycles
    for s in Strategy:
        if s in wanted:
            r = results[s]
            r.overhead_pct = 100.0 * (r.cycles - base) / base if base else 0.0
            report.rows.append(r)
    return report


def run_startup(scenario: Scenario, spec: WorkloadSpec, seed: Optional[int] = None) -> list[StartupRow]:
    """Cache-creation cost at container start for each requested number of watched files."""
    rows = []
    for n in spec.files:
        scn = _with_policy_count(scenario, n)
        sim = Simulation.build(scn, Strategy.ISOLATED, seed)
        cm = sim.hv.cost_model
        created = sim.hv.counters["cache_creation"]
        base = cm.base_startup_cycles
        extra = created * cm.cache_creation_per_file
        rows.append(
            StartupRow(
                n_files=n,
                cache_creations=created,
                base_cycles=base,
                extra_cycles=extra,
                overhead_pct=100.0 * extra / base,
                cfwatcher_pct=100.0 * n * cm.cfwatcher_injection_per_file / base,
            )
        )
    return rows


def _with_policy_count(scenario: Scenario, n: int) -> Scenario:
    """Copy of ``scenario`` whose generated policies cover the first ``n`` files in total."""
    gens = []
    left = n
    for g in scenario.generated_policies:
        size = scenario.filesets[g.fileset].count if g.count is None else g.count
        take = min(size, left)
        left -= take
        gens.append(dataclasses.replace(g, count=take))
    if left > 0:
        raise ValueError(f"scenario only defines {n - left} generated policy targets, {n} requested")
    return dataclasses.replace(scenario, generated_policies=gens, policy_docs=[], warmup=None)


# ----------------------------------------------------------------------
# attacks
# ----------------------------------------------------------------------
@dataclass
class AttackOutcome:
    name: str
    blocked: bool
    content_unchanged: bool
    guest_results: dict
    legit_ok: bool = True
    events: list[str] = field(default_factory=list)

    @property
    def verdict(self) -> str:
        return "Blocked" if self.blocked else "Succeeded"

    def to_record(self) -> dict:
        return {
            "attack": self.name,
            "verdict": self.verdict,
            "content_unchanged": self.content_unchanged,
            "legit_ok": self.legit_ok,
            "results": self.guest_results,
        }


def _scope(ref: str) -> str:
    scope = ref.split("/", 1)[0]
    return HOST if scope == "host" else scope


def _tamper(sim: Simulation, attacker: str, path: str) -> tuple[dict, bool, bool]:
    k = sim.kernel
    proc = sim.proc(attacker)
    before = sim.file_content(_scope(attacker), path)
    fd = k.syscall_open(proc, path, OpenMode.WRITE_ONLY)
    res = {"open": fd}
    if fd >= 0:
        res["write"] = k.syscall_io(proc, fd, IoDirection.WRITE, len(PAYLOAD), len(PAYLOAD), PAYLOAD)
    unchanged = sim.file_content(_scope(attacker), path) == before
    return res, fd < 0 and unchanged, unchanged


def _attack_tamper_runc(sim: Simulation, p: dict) -> AttackOutcome:
    res, blocked, same = _tamper(sim, p["attacker"], p["path"])
    return AttackOutcome("TamperRunc", blocked, same, res)


def _attack_tamper_web(sim: Simulation, p: dict) -> AttackOutcome:
    res, blocked, same = _tamper(sim, p["attacker"], p["path"])
    reader = sim.proc(p["reader"])
    k = sim.kernel
    fd = k.syscall_open(reader, p["path"], OpenMode.READ_ONLY)
    res["reader_open"] = fd
    legit = fd >= 0
    if legit:
        res["reader_read"] = k.syscall_io(reader, fd, IoDirection.READ, 64, 64)
        res["reader_close"] = k.syscall_close(reader, fd)
        legit = res["reader_read"] >= 0
    return AttackOutcome("TamperWebPage", blocked, same, res, legit)


def _attack_replace_login(sim: Simulation, p: dict) -> AttackOutcome:
    res, blocked, same = _tamper(sim, p["attacker"], p["path"])
    return AttackOutcome("ReplaceLogin", blocked, same, res)


def _agent_code(sim: Simulation) -> dict[int, bytes]:
    ps = sim.memory.page_size
    return {
        pid: sim.memory.read(sim.kernel.symbols[f"agent_text:{pid}"], ps)
        for pid in sim.agent.pids
    }


def _attack_kill_agent(sim: Simulation, p: dict) -> AttackOutcome:
    k = sim.kernel
    code = _agent_code(sim)
    res = {}
    for cid, agent in sorted(sim.agent.hidden.items()):
        if p.get("attacker") and _scope(p["attacker"]) == cid:
            res[f"container_kill_{cid}"] = k.syscall_kill(sim.proc(p["attacker"]), agent.proc.pid)
    host = sim.proc(p["host_attacker"])
    for pid in sim.agent.pids:
        res[f"host_kill_{pid}"] = k.syscall_kill(host, pid)
    alive = all(k.procs[pid].alive for pid in sim.agent.pids)
    same = _agent_code(sim) == code
    live = not sim.monitor.check_liveness()
    res["agents_alive"] = alive
    blocked = alive and same and live and all(v < 0 for v in res.values() if not isinstance(v, bool))
    return AttackOutcome("KillAgent", blocked, same, res)


def _attack_hardlink(sim: Simulation, p: dict) -> AttackOutcome:
    k = sim.kernel
    proc = sim.proc(p["attacker"])
    scope = _scope(p["attacker"])
    before = sim.file_content(scope, p["path"])
    res = {"link": k.syscall_link(proc, p["path"], p["link"])}
    fd = k.syscall_open(proc, p["link"], OpenMode.WRITE_ONLY)
    res["open_alias"] = fd
    if fd >= 0:
        res["write"] = k.syscall_io(proc, fd, IoDirection.WRITE, len(PAYLOAD), len(PAYLOAD), PAYLOAD)
    same = sim.file_content(scope, p["path"]) == before
    return AttackOutcome("HardlinkBypass", fd < 0 and same, same, res)


def _attack_guess_fd(sim: Simulation, p: dict) -> AttackOutcome:
    k = sim.kernel
    proc = sim.proc(p["attacker"])
    scope = _scope(p["attacker"])
    before = sim.file_content(scope, p["path"])
    legit = set(k.fd_table(proc))
    fd = k.syscall_open(proc, p["path"], OpenMode.WRITE_ONLY)
    res = {"open": fd}
    guesses = {}
    for guess in range(GUESSED_FDS):
        if guess in legit:
            continue
        guesses[guess] = k.syscall_io(proc, guess, IoDirection.WRITE, len(PAYLOAD), len(PAYLOAD), PAYLOAD)
    res["guesses"] = guesses
    same = sim.file_content(scope, p["path"]) == before
    blocked = fd < 0 and same and all(r < 0 for r in guesses.values())
    return AttackOutcome("GuessFdBypass", blocked, same, res)


def _attack_kernel_patch(sim: Simulation, p: dict) -> AttackOutcome:
    k = sim.kernel
    proc = sim.proc(p["attacker"])
    flt = k.symbols["getdents_filter"]
    hidden = next(iter(sim.agent.hidden.values()), None)
    text_before = sim.memory.read(k.symbols["kernel_text"], sim.memory.page_size)
    code_before = _agent_code(sim)
    res = {"patch_filter": k.raw_kernel_write(proc, flt, b"\x00")}
    if hidden is not None:
        res["patch_agent"] = k.raw_kernel_write(proc, k.symbols[f"agent_text:{hidden.proc.pid}"], b"\xc3")
    listing = k.syscall_getdents(proc, "/proc")
    still_hidden = hidden is None or str(hidden.proc.pid) not in listing
    same = sim.memory.read(k.symbols["kernel_text"], sim.memory.page_size) == text_before and _agent_code(sim) == code_before
    res["agent_hidden"] = still_hidden
    blocked = same and still_hidden and all(v < 0 for v in res.values() if not isinstance(v, bool))
    return AttackOutcome("KernelPatch", blocked, same, res)


_ATTACK_FUNCS = {
    "TamperRunc": _attack_tamper_runc,
    "TamperWebPage": _attack_tamper_web,
    "ReplaceLogin": _attack_replace_login,
    "KillAgent": _attack_kill_agent,
    "HardlinkBypass": _attack_hardlink,
    "GuessFdBypass": _attack_guess_fd,
    "KernelPatch": _attack_kernel_patch,
}


def run_attack(scenario: Scenario, name: str, seed: Optional[int] = None) -> AttackOutcome:
    if name not in _ATTACK_FUNCS:
        raise ValueError(f"unknown attack {name!r}; choose from {list(ATTACKS)}")
    params = {**DEFAULT_ATTACK_PARAMS[name], **scenario.attacks.get(name, {})}
    sim = Simulation.build(scenario, Strategy.ISOLATED, seed)
    mark = len(sim.monitor.events)
    outcome = _ATTACK_FUNCS[name](sim, params)
    outcome.events = [e.to_line() for e in sim.monitor.events[mark:]]
    return outcome


def run_attacks(scenario: Scenario, names: Iterable[str] | None = None, seed: Optional[int] = None) -> list[AttackOutcome]:
    names = list(names) if names is not None else [n for n in ATTACKS if n in scenario.attacks] or list(ATTACKS)
    return [run_attack(scenario, n, seed) for n in names]
