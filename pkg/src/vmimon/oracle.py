"""Ground-truth oracles and the seeded interleaving fuzzer.

Everything here reads the guest's own bookkeeping (the kernel syscall log and
the raw fd tables) rather than anything the monitor computed, so agreement
between the two is evidence rather than tautology.  Policy decisions are
re-evaluated from the scenario's raw rule mappings with a separate matcher.
"""

from __future__ import annotations

import fnmatch
import random
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .fs import normpath
from .introspection import HOST
from .kernel import OpenMode, Process, Scheduler, SyscallInstance
from .memory import Placement
from .monitor import EventKind
from .scenario import Scenario
from .sim import Simulation, Strategy

OPENED, CLOSED = "open", "close"


# ----------------------------------------------------------------------
# independent policy evaluation
# ----------------------------------------------------------------------
def _rule_allows(rule: dict, name: str, uid: int, container: Optional[str], op: str) -> bool:
    if op not in rule.get("ops", ["read", "write"]):
        return False
    if rule.get("container") not in (None, container):
        return False
    if rule.get("uid", "*") not in ("*", uid):
        return False
    return fnmatch.fnmatchcase(name, rule.get("process", "*"))


def raw_policy_table(scenario: Scenario) -> dict[tuple[str, str], list[dict]]:
    """(scope, path) → raw allow rules, straight from the scenario mappings."""
    table: dict[tuple[str, str], list[dict]] = {}
    for doc in scenario.policy_docs:
        table[(doc["scope"], normpath(doc["path"]))] = list(doc.get("allow", []))
    for g in scenario.generated_policies:
        scope = "host" if g.scope == "Host" else f"container:{g.scope}"
        paths = scenario.filesets[g.fileset].paths()
        for path in paths[: g.count] if g.count is not None else paths:
            table[(scope, path)] = list(g.allow)
    return table


def expected_allow(rules: list[dict], proc: Process, mode: OpenMode) -> bool:
    ops = [op for op, on in (("read", mode.reads), ("write", mode.writes)) if on]
    return all(any(_rule_allows(r, proc.name, proc.uid, proc.container_id, op) for r in rules) for op in ops)


# ----------------------------------------------------------------------
# per-run verdict
# ----------------------------------------------------------------------
@dataclass
class RunVerdict:
    seed: int
    ops: int = 0
    prunes: int = 0
    sequence_mismatches: list[str] = field(default_factory=list)
    watch_set_mismatch: str = ""
    fd_leaks: list[str] = field(default_factory=list)
    liveness: list[str] = field(default_factory=list)
    false_positives: list[str] = field(default_factory=list)
    missed_blocks: list[str] = field(default_factory=list)
    recount: list[str] = field(default_factory=list)
    opens_checked: int = 0
    blocked: int = 0
    events_compared: int = 0

    @property
    def equivalent(self) -> bool:
        return not (self.sequence_mismatches or self.watch_set_mismatch or self.fd_leaks)

    @property
    def ok(self) -> bool:
        return (
            self.equivalent
            and not self.liveness
            and not self.false_positives
            and not self.missed_blocks
            and not self.recount
        )


@dataclass
class FuzzReport:
    runs: list[RunVerdict]

    def _failing(self, pred) -> list[int]:
        return [r.seed for r in self.runs if pred(r)]

    @property
    def equivalence_failures(self) -> list[int]:
        return self._failing(lambda r: not r.equivalent)

    @property
    def liveness_failures(self) -> list[int]:
        return self._failing(lambda r: bool(r.liveness))

    @property
    def precision_failures(self) -> list[int]:
        return self._failing(lambda r: bool(r.false_positives))

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.runs)

    def summary(self) -> dict:
        return {
            "runs": len(self.runs),
            "ops": sum(r.ops for r in self.runs),
            "prunes": sum(r.prunes for r in self.runs),
            "opens_checked": sum(r.opens_checked for r in self.runs),
            "blocked": sum(r.blocked for r in self.runs),
            "events_compared": sum(r.events_compared for r in self.runs),
            "equivalence_failures": len(self.equivalence_failures),
            "liveness_failures": len(self.liveness_failures),
            "false_positives": sum(len(r.false_positives) for r in self.runs),
            "missed_blocks": sum(len(r.missed_blocks) for r in self.runs),
            "recount_failures": sum(1 for r in self.runs if r.recount),
        }


# ----------------------------------------------------------------------
# ground truth from the kernel log
# ----------------------------------------------------------------------
def truth_sequences(sim: Simulation, watched: dict[int, Optional[int]]) -> dict[int, list[str]]:
    """Per watched serial, the open/close sequence the guest actually performed.

    ``watched`` maps serial → seq of the syscall that created the dentry while
    already aliased to a watched file (None for dentries watched from setup);
    that creating syscall's own mutations precede the watch and are skipped.
    """
    muts = []
    for entry in sim.kernel.log:
        for m in entry.refs:
            if m.mseq <= sim.setup_mseq or m.serial not in watched or m.delta == 0:
                continue
            if watched[m.serial] is not None and entry.seq == watched[m.serial]:
                continue
            muts.append(m)
    out: dict[int, list[str]] = {s: [] for s in watched}
    for m in sorted(muts, key=lambda m: m.mseq):
        out[m.serial].append(OPENED if m.delta > 0 else CLOSED)
    return out


def observed_sequences(sim: Simulation, first_event: int) -> dict[int, list[str]]:
    out: dict[int, list[str]] = {}
    for e in sim.monitor.events[first_event:]:
        if e.kind is EventKind.FILE_OPENED:
            out.setdefault(e.serial, []).append(OPENED)
        elif e.kind is EventKind.FILE_CLOSED:
            out.setdefault(e.serial, []).append(CLOSED)
    return out


def fd_table_origins(sim: Simulation) -> set[int]:
    """Seqs of the opens whose file objects are currently installed in some fd table."""
    return {sim.kernel.file_origin(file) for _, _, file in sim.kernel.open_handles()}


# ----------------------------------------------------------------------
# the fuzzer
# ----------------------------------------------------------------------
class _Fuzzer:
    def __init__(self, scenario: Scenario, seed: int, n_ops: int, prune_every: int):
        self.sim = Simulation.build(scenario, Strategy.ISOLATED, seed)
        self.rng = random.Random(seed)
        self.n_ops = n_ops
        self.prune_every = prune_every
        self.v = RunVerdict(seed)
        k = self.sim.kernel
        self.cid = next(c.id for c in scenario.containers)
        self.ns = self.sim.containers[self.cid]
        self.scope = f"container:{self.cid}"
        rules = raw_policy_table(scenario)
        self.rules = {p: r for (s, p), r in rules.items() if s == self.scope}
        fileset = next(iter(scenario.filesets.values()))
        self.paths = fileset.paths()
        self.link_dir = fileset.dir
        self.actors = [p for ref, p in self.sim.procs.items() if ref.startswith(f"{self.cid}/") and not p.is_agent]
        self.victims = list(self.actors) + [self.sim.agent.proc] + [a.proc for a in self.sim.agent.hidden.values()]
        # serial → creating syscall seq (None: watched since setup)
        self.watched: dict[int, Optional[int]] = {
            k.raw_u(k.lookup(self.ns.mnt_ns, p), "dentry", "serial"): None for p in self.rules
        }
        self.first_event = len(self.sim.monitor.events)
        self.links = 0
        self.blocked: list[int] = []  # seqs of patched opens

    # -- op generation ------------------------------------------------
    def _submit(self, sched: Scheduler) -> None:
        k, rng = self.sim.kernel, self.rng
        proc = rng.choice(self.actors)
        r = rng.random()
        if r < 0.5:
            path = rng.choice(self.paths)
            mode = rng.choice([OpenMode.READ_ONLY, OpenMode.READ_ONLY, OpenMode.WRITE_ONLY, OpenMode.READ_WRITE])
            sched.submit(k.start(proc, "open", path=path, mode=mode, placement=Placement.DEFAULT, create=False))
        elif r < 0.8:
            fds = sorted(k.fd_table(proc)) if proc.alive else []
            fd = rng.choice(fds) if fds and rng.random() < 0.9 else rng.randrange(8)
            sched.submit(k.start(proc, "close", fd=fd))
        elif r < 0.9:
            self.links += 1
            newpath = f"{self.link_dir}/l{self.sim.rng.randrange(10**6):06d}x{self.links}"
            sched.submit(k.start(proc, "link", existing=rng.choice(self.paths), newpath=newpath))
        else:
            target = rng.choice(self.victims)
            sched.submit(k.start(proc, "kill", pid=target.pid, sig=9))
        self.v.ops += 1

    # -- per-completion checks ------------------------------------------
    def _completed(self, inst: SyscallInstance) -> None:
        entry = inst.entry
        if inst.name == "link" and entry.raw_result == 0:
            existing = normpath(inst.args["existing"])
            if existing in self.rules:
                self.rules[normpath(inst.args["newpath"])] = self.rules[existing]
                self.watched[entry.target_serial] = entry.seq
        if inst.name != "open":
            return
        path = normpath(inst.args["path"])
        rules = self.rules.get(path)
        if rules is None or entry.raw_result is None or entry.raw_result < 0:
            return
        self.v.opens_checked += 1
        allowed = expected_allow(rules, inst.proc, inst.args["mode"])
        patched = entry.result < 0
        where = f"seq {entry.seq} {inst.proc.name} open {path} {inst.args['mode'].value}"
        if patched:
            self.v.blocked += 1
            self.blocked.append(entry.seq)
            if entry.seq in fd_table_origins(self.sim):
                self.v.fd_leaks.append(f"{where}: blocked file object still in an fd table")
        if allowed and patched:
            self.v.false_positives.append(where)
        if not allowed and not patched and inst.proc.alive:
            self.v.missed_blocks.append(where)

    def _prune(self) -> None:
        self.sim.kernel.dcache_prune()
        self.v.prunes += 1
        self.v.liveness += self.sim.monitor.check_liveness()
        k = self.sim.kernel
        for s in self.watched:
            d = k.dentry_by_serial(s)
            if not d:
                self.v.liveness.append(f"after prune {self.v.prunes}: watched serial {s} missing")
            elif k.refcount(d) < 1:
                self.v.liveness.append(f"after prune {self.v.prunes}: watched serial {s} refcount {k.refcount(d)}")

    # -- main loop -------------------------------------------------------
    def run(self) -> RunVerdict:
        sched = Scheduler(self.sim.kernel, self.rng.randrange(2**32))
        done = 0
        while self.v.ops < self.n_ops or sched.inflight:
            if self.v.ops < self.n_ops and (not sched.inflight or self.rng.random() < 0.4):
                self._submit(sched)
                continue
            inst = sched.tick()
            if inst is None:
                continue
            self._completed(inst)
            done += 1
            if done % self.prune_every == 0:
                self._prune()
        self._prune()
        self._final_checks()
        return self.v

    def _final_checks(self) -> None:
        sim = self.sim
        truth = truth_sequences(sim, self.watched)
        seen = observed_sequences(sim, self.first_event)
        for s in sorted(set(truth) | set(seen)):
            t, o = truth.get(s, []), seen.get(s, [])
            self.v.events_compared += len(t)
            if t != o:
                self.v.sequence_mismatches.append(f"serial {s}: guest {t} vs monitor {o}")
        if set(self.watched) != sim.monitor.watched_serials():
            self.v.watch_set_mismatch = (
                f"guest-derived {sorted(self.watched)} vs monitor {sorted(sim.monitor.watched_serials())}"
            )
        live = fd_table_origins(sim)
        for seq in self.blocked:
            if seq in live:
                self.v.fd_leaks.append(f"blocked open seq {seq} reappeared in an fd table")
        self.v.recount = sim.self_check()


def fuzz_run(scenario: Scenario, seed: int, n_ops: int = 30, prune_every: int = 8) -> RunVerdict:
    return _Fuzzer(scenario, seed, n_ops, prune_every).run()


def fuzz(
    scenario: Scenario,
    runs: int = 1000,
    base_seed: int = 0,
    n_ops: int = 30,
    prune_every: int = 8,
) -> FuzzReport:
    return FuzzReport([fuzz_run(scenario, base_seed + i, n_ops, prune_every) for i in range(runs)])


def first_failures(report: FuzzReport, limit: int = 5) -> Iterable[str]:
    for r in report.runs:
        if r.ok:
            continue
        for label, items in (
            ("sequence", r.sequence_mismatches),
            ("watch-set", [r.watch_set_mismatch] if r.watch_set_mismatch else []),
            ("fd", r.fd_leaks),
            ("liveness", r.liveness),
            ("false-positive", r.false_positives),
            ("missed", r.missed_blocks),
            ("recount", r.recount),
        ):
            for item in items:
                yield f"seed {r.seed} {label}: {item}"
                limit -= 1
                if limit <= 0:
                    return


# ----------------------------------------------------------------------
# introspection fidelity
# ----------------------------------------------------------------------
TRAP_COUNTERS = ("ept_violation", "single_step", "breakpoint")


def introspection_fidelity(sim: Simulation) -> list[str]:
    """Compare the out-of-band process/container view with the guest's own tables.

    Also asserts the reconstruction itself raised no trap of any kind.
    """
    problems = []
    before = sim.hv.snapshot()
    forward = sim.intro.walk_process_list()
    backward = sim.intro.walk_process_list(reverse=True)
    groups = sim.intro.group_containers(forward)
    after = sim.hv.snapshot()
    for c in TRAP_COUNTERS:
        if after[c] != before[c]:
            problems.append(f"introspection raised {after[c] - before[c]} {c} event(s)")
    # Both walks start at init_task, then traverse the ring in opposite directions.
    if [p.pid for p in backward] != [p.pid for p in forward[:1] + forward[:0:-1]]:
        problems.append("reverse task walk disagrees with forward walk")
    width = sim.profile.width("process", "name")
    truth = {
        p.pid: (
            p.name[: width - 1],
            p.uid,
            p.container_id or HOST,
            p.namespaces.pid_ns,
            p.namespaces.mnt_ns,
            p.address_space_id,
            p.is_hidden_agent,
            p.is_agent,
        )
        for p in sim.kernel.alive_processes()
    }
    seen = {
        p.pid: (
            p.name,
            p.uid,
            p.container_id,
            p.pid_namespace_id,
            p.mnt_namespace_id,
            p.address_space_id,
            p.hidden,
            p.agent,
        )
        for p in forward
    }
    for pid in sorted(set(truth) | set(seen)):
        if truth.get(pid) != seen.get(pid):
            problems.append(f"pid {pid}: guest {truth.get(pid)} vs introspected {seen.get(pid)}")
    want: dict[str, list[int]] = {}
    for p in sim.kernel.alive_processes():
        if p.container_id:
            want.setdefault(p.container_id, []).append(p.pid)
    got = {cid: sorted(info.member_pids) for cid, info in groups.items()}
    if got != {cid: sorted(pids) for cid, pids in want.items()}:
        problems.append(f"container grouping {got} vs guest {want}")
    for cid, info in groups.items():
        ns = sim.containers.get(cid)
        if ns is None or (info.pid_namespace_id, info.mnt_namespace_id) != (ns.pid_ns, ns.mnt_ns):
            problems.append(f"container {cid}: namespaces do not match the guest's")
    return problems
