"""Hypervisor-side file monitor.

Watches the refcount field of each protected file's dentry.  A refcount
increment means somebody is opening the file: the monitor attributes the access
through introspection, checks the policy, and if the open must fail it records
a pending block keyed by (address_space_id, stack_id).  When that syscall
instance reaches the shared return site, the result is patched to -1 and the
transient kernel state the open created is scrubbed.

Watched dentries live in isolated pages (allocated there by the agents, or
migrated there after the fact) so that page-granular traps fire only for them.
"""

from __future__ import annotations

import bisect
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Optional

from .hypervisor import (
    ALLOW,
    DENY,
    FILE_SYSCALLS,
    MONITOR_SYSCALL_ENTRY,
    SYSCALL_RETURN,
    Access,
    CpuContext,
    Hypervisor,
    Site,
    Verdict,
    VmExitEvent,
)
from .introspection import HOST, UNKNOWN_PROCESS, Introspector, IntrospectionFault, ProcessInfo
from .kernel import DENTRY_HASHED, OpenMode
from .memory import GuestMemory, LayoutProfile, PageKind, Placement, SlabAllocator
from .policy import Policy, PolicySet

log = logging.getLogger(__name__)

# Guest contexts that may legitimately read cached metadata of protected files.
_KERNEL_READERS = frozenset(FILE_SYSCALLS) | {"prune", "kthread", "kill"}


class EventKind(Enum):
    FILE_OPENED = "FileOpened"
    FILE_CLOSED = "FileClosed"
    ACCESS_BLOCKED = "AccessBlocked"
    REFCOUNT_RESCUED = "RefcountRescued"
    AGENT_KILL_BLOCKED = "AgentKillBlocked"
    HARDLINK_TRACKED = "HardlinkTracked"
    UNAUTHORIZED_READ_BLOCKED = "UnauthorizedReadBlocked"
    STATIC_WRITE_BLOCKED = "StaticWriteBlocked"


@dataclass(frozen=True)
class MonitorEvent:
    seq: int
    kind: EventKind
    subject: ProcessInfo
    path: str
    serial: Optional[int] = None
    detail: str = ""

    def to_record(self) -> dict:
        # Fixed key order keeps the line-delimited log diff-friendly.
        return {
            "seq": self.seq,
            "kind": self.kind.value,
            "pid": self.subject.pid,
            "process": self.subject.name,
            "uid": self.subject.uid,
            "container": self.subject.container_id,
            "path": self.path,
            "serial": self.serial,
            "detail": self.detail,
        }

    def to_line(self) -> str:
        return json.dumps(self.to_record(), separators=(",", ":"))


@dataclass
class WatchedDentry:
    addr: int
    serial: int
    policy: Policy
    path: str
    mnt_ns: int
    refcount_addr: int = 0
    pages: tuple[int, ...] = ()
    alias_peers: list[int] = field(default_factory=list)

    @property
    def page(self) -> int:
        return self.pages[0]


@dataclass
class PendingBlock:
    serial: int
    subject: ProcessInfo
    path: str
    ops: tuple[str, ...]


@dataclass
class MonitorConfig:
    placement: Placement = Placement.ISOLATED
    migrate: bool = True
    protect_static: bool = True
    protect_agents: bool = True
    track_links: bool = True


def open_ops(mode: Any) -> tuple[str, ...]:
    if isinstance(mode, str):
        mode = OpenMode.parse(mode)
    ops = []
    if mode.reads:
        ops.append("read")
    if mode.writes:
        ops.append("write")
    return tuple(ops)


class Monitor:
    def __init__(
        self,
        hv: Hypervisor,
        intro: Introspector,
        allocator: SlabAllocator,
        policies: PolicySet,
        config: MonitorConfig | None = None,
    ):
        self.hv = hv
        self.intro = intro
        self.allocator = allocator
        self.memory: GuestMemory = hv.memory
        self.profile: LayoutProfile = intro.profile
        self.policies = policies
        self.config = config or MonitorConfig()
        self.watch: dict[int, WatchedDentry] = {}
        self._by_refaddr: dict[int, int] = {}
        self._by_addr: dict[int, int] = {}
        self._starts: list[int] = []
        self._write_armed: Counter[int] = Counter()
        self._read_armed: Counter[int] = Counter()
        self.static_pages: set[int] = set()
        self.agent_pids: set[int] = set()
        self.pending_blocks: dict[tuple[int, int], PendingBlock] = {}
        self.pending_aliases: dict[tuple[int, int], set[int]] = {}
        self.pending_links: dict[tuple[int, int], tuple[int, str, int]] = {}
        self.holds: Counter[int] = Counter()
        self.events: list[MonitorEvent] = []
        self.false_traps = 0
        self.metadata_traps = 0
        self.read_checks = 0
        self.failures: list[str] = []
        self.warnings: list[str] = []
        self.migrations = 0
        self._seq = 0
        hv.on_violation = self.on_ept_violation
        hv.on_breakpoint = self.on_breakpoint

    # ------------------------------------------------------------------
    # bookkeeping
    # ------------------------------------------------------------------
    def _emit(self, kind: EventKind, subject: ProcessInfo, path: str, serial=None, detail="") -> None:
        self._seq += 1
        self.events.append(MonitorEvent(self._seq, kind, subject, path, serial, detail))

    def event_lines(self) -> list[str]:
        return [e.to_line() for e in self.events]

    @property
    def armed_pages(self) -> set[int]:
        return set(self._write_armed) | set(self._read_armed) | self.static_pages

    @property
    def watched_pages(self) -> set[int]:
        return set(self._write_armed) | set(self._read_armed)

    def _apply_perms(self, page: int) -> None:
        writable = not (self._write_armed[page] or page in self.static_pages)
        readable = not self._read_armed[page]
        self.hv.set_page_perms(page, readable, writable)

    def _arm(self, w: WatchedDentry) -> None:
        for p in w.pages:
            self._write_armed[p] += 1
            if w.policy.protect_read:
                self._read_armed[p] += 1
            self._apply_perms(p)

    def _disarm(self, w: WatchedDentry) -> None:
        for p in w.pages:
            self._write_armed[p] -= 1
            if self._write_armed[p] <= 0:
                del self._write_armed[p]
            if w.policy.protect_read:
                self._read_armed[p] -= 1
                if self._read_armed[p] <= 0:
                    del self._read_armed[p]
            self._apply_perms(p)

    def _pages_of(self, d: int) -> tuple[int, ...]:
        ps = self.memory.page_size
        size = self.profile.size("dentry")
        return tuple(range(d // ps, (d + size - 1) // ps + 1))

    def _index(self, w: WatchedDentry) -> None:
        self.watch[w.serial] = w
        self._by_refaddr[w.refcount_addr] = w.serial
        self._by_addr[w.addr] = w.serial
        bisect.insort(self._starts, w.addr)

    def _unindex(self, w: WatchedDentry) -> None:
        self._by_refaddr.pop(w.refcount_addr, None)
        self._by_addr.pop(w.addr, None)
        i = bisect.bisect_left(self._starts, w.addr)
        if i < len(self._starts) and self._starts[i] == w.addr:
            del self._starts[i]

    def _object_at(self, addr: int) -> Optional[WatchedDentry]:
        i = bisect.bisect_right(self._starts, addr) - 1
        if i < 0:
            return None
        start = self._starts[i]
        if addr < start + self.profile.size("dentry"):
            return self.watch[self._by_addr[start]]
        return None

    def is_watched_addr(self, d: int) -> bool:
        return d in self._by_addr

    # ------------------------------------------------------------------
    # watch set construction
    # ------------------------------------------------------------------
    def watch_dentry(
        self,
        d: int,
        policy: Policy,
        mnt_ns: int,
        migrate: Optional[bool] = None,
        closure: bool = True,
    ) -> WatchedDentry:
        """Add ``d`` (and, with ``closure``, its whole alias ring) to the watch set."""
        if d in self._by_addr:
            return self.watch[self._by_addr[d]]
        migrate = self.config.migrate if migrate is None else migrate
        if migrate and self.config.placement is Placement.ISOLATED and not self.allocator.in_isolated_region(d):
            d = self.migrate_dentry(d)
            if d in self._by_addr:
                return self.watch[self._by_addr[d]]
        view = self.intro.dentry(d)
        w = WatchedDentry(
            addr=d,
            serial=view.serial,
            policy=policy,
            path=self.intro.dentry_path(d),
            mnt_ns=mnt_ns,
            refcount_addr=self.profile.field_addr(d, "dentry", "refcount"),
            pages=self._pages_of(d),
        )
        self._index(w)
        self._arm(w)
        if closure:
            self._close_aliases(w, migrate)
        if self.intro.dentry(w.addr).refcount == 0:
            # Nothing holds a fresh alias yet; pin it so prune cannot drop it.
            self.intro.put(w.addr, "dentry", "refcount", 1)
            self.holds[w.serial] += 1
        return w

    def _close_aliases(self, w: WatchedDentry, migrate: Optional[bool] = None) -> None:
        """Alias closure: every dentry of the same inode is watched too."""
        for peer in self.intro.alias_ring(w.addr):
            if peer != w.addr and peer not in self._by_addr:
                self.watch_dentry(peer, w.policy, w.mnt_ns, migrate)
        self._refresh_peers(w.addr)

    def _refresh_peers(self, d: int) -> None:
        ring = self.intro.alias_ring(d)
        for member in ring:
            s = self._by_addr.get(member)
            if s is not None:
                self.watch[s].alias_peers = [m for m in ring if m != member]

    def migrate_dentry(self, old: int) -> int:
        """Move a dentry into the isolated region, rewriting every reference via VMI."""
        view = self.intro.dentry(old)
        inode_mode = self.intro.u(view.inode, "inode", "mode") if view.inode else 0
        if inode_mode & 0o040000:
            self._abort_migration(old, "directory dentries pin children by address")
            return old
        slot = self.intro.hash_link_slot(old) if view.flags & DENTRY_HASHED else 0
        if view.flags & DENTRY_HASHED and not slot:
            self._abort_migration(old, "dentry flagged hashed but not reachable from its bucket")
            return old
        size = self.profile.size("dentry")
        new = self.allocator.alloc("dentry", Placement.ISOLATED)
        self.hv.vmi_write(new, self.hv.vmi_read(old, size))
        if slot:
            self.hv.vmi_write(slot, new.to_bytes(8, "little"))
        if view.alias_next == old:
            self.intro.put(new, "dentry", "alias_next", new)
            self.intro.put(new, "dentry", "alias_prev", new)
        else:
            self.intro.put(view.alias_prev, "dentry", "alias_next", new)
            self.intro.put(view.alias_next, "dentry", "alias_prev", new)
        if view.inode and self.intro.u(view.inode, "inode", "alias") == old:
            self.intro.put(view.inode, "inode", "alias", new)
        for proc in self.intro.walk_process_list():
            for fd, file in self.intro.fd_table(proc.files_addr).items():
                if self.intro.u(file, "file", "dentry") == old:
                    self.intro.put(file, "file", "dentry", new)
        s = self._by_addr.get(old)
        if s is not None:
            w = self.watch[s]
            self._disarm(w)
            self._unindex(w)
            w.addr = new
            w.refcount_addr = self.profile.field_addr(new, "dentry", "refcount")
            w.pages = self._pages_of(new)
            self._index(w)
            self._arm(w)
        self.allocator.free(old)
        self.migrations += 1
        return new

    def _abort_migration(self, d: int, why: str) -> None:
        msg = f"migration of dentry {d:#x} aborted ({why}); watching in place, unrelated traps will occur"
        self.warnings.append(msg)
        log.warning(msg)

    def register_agent(self, pid: int) -> None:
        self.agent_pids.add(pid)
        if self.config.protect_agents:
            self.hv.arm_breakpoint(Site.entry("kill"))

    def enable_link_tracking(self) -> None:
        if self.config.track_links:
            self.hv.arm_breakpoint(Site.entry("link"))

    def attach(self) -> None:
        """Arm the Monitor_Syscall channel."""
        self.hv.arm_breakpoint(MONITOR_SYSCALL_ENTRY)

    def protect_static_regions(self) -> int:
        kinds = (PageKind.KERNEL_CODE, PageKind.AGENT_CODE)
        pages = [i for i, k in enumerate(self.memory.kinds) if k in kinds]
        for p in pages:
            self.static_pages.add(p)
            self._apply_perms(p)
        return len(pages)

    def arm_watchpoints(self, watch_set: Iterable[WatchedDentry] | None = None) -> int:
        """Re-apply permissions for the watch set; returns the number of watched pages."""
        for w in watch_set if watch_set is not None else self.watch.values():
            for p in w.pages:
                self._apply_perms(p)
        return len(self.watched_pages)

    # ------------------------------------------------------------------
    # Monitor_Syscall channel
    # ------------------------------------------------------------------
    def _handle_monitor_syscall(self, ctx: CpuContext, payload: bytes) -> bytes:
        try:
            msg = json.loads(payload.decode() or "{}")
        except (UnicodeDecodeError, json.JSONDecodeError):
            return b'{"error":"bad payload"}'
        op = msg.get("op")
        if op == "poll":
            scope = msg.get("container") or HOST
            files = [p.path for p in self.policies.for_scope(scope)]
            return json.dumps({"files": files}).encode()
        if op == "register":
            return json.dumps(self._register(msg)).encode()
        return b'{"error":"unknown op"}'

    def _register(self, msg: dict) -> dict:
        pid = int(msg["pid"])
        agent = self.intro.task_of_pid(pid)
        if agent is None:
            return {"error": f"no such task {pid}"}
        scope = msg.get("container") or HOST
        if scope != HOST:
            self.intro.name_container(agent.pid_namespace_id, scope)
        self.register_agent(pid)
        table = self.intro.fd_table(agent.files_addr)
        watched = 0
        for fd, path in msg.get("files", []):
            policy = self.policies.get(scope, path)
            file = table.get(int(fd))
            if policy is None or not file:
                self.failures.append(f"{scope}:{path}: no open handle reported")
                continue
            d = self.intro.u(file, "file", "dentry")
            self.watch_dentry(d, policy, agent.mnt_namespace_id)
            watched += 1
        for failed in msg.get("failed", []):
            self.failures.append(f"{scope}:{failed}: agent could not open")
        self.enable_link_tracking()
        return {"watched": watched}

    # ------------------------------------------------------------------
    # trap handlers
    # ------------------------------------------------------------------
    def on_ept_violation(self, ev: VmExitEvent) -> Verdict:
        kind = ev.kind
        page = kind.addr // self.memory.page_size
        if kind.access is Access.WRITE and page in self.static_pages:
            self._emit(
                EventKind.STATIC_WRITE_BLOCKED,
                self.intro.attribute_access(ev.ctx),
                f"{self.memory.kinds[page].value}@{kind.addr:#x}",
            )
            return DENY
        if kind.access is Access.READ:
            return self._on_read(ev)
        serial = self._by_refaddr.get(kind.addr)
        if serial is not None and kind.size == self.profile.width("dentry", "refcount"):
            return self._on_refcount_write(ev, self.watch[serial])
        w = self._object_at(kind.addr)
        if w is None:
            self.false_traps += 1
            return ALLOW
        self.metadata_traps += 1
        for fname in ("alias_next", "alias_prev"):
            if kind.addr == self.profile.field_addr(w.addr, "dentry", fname):
                ptr = int.from_bytes(kind.new_value, "little")
                if ptr and ptr != w.addr and ptr not in self._by_addr:
                    # A new alias is joining a watched ring (link or copy-up).
                    # The ring is mid-update here, so closure waits for the return.
                    self.watch_dentry(ptr, w.policy, w.mnt_ns, migrate=False, closure=False)
                    self.pending_aliases.setdefault(ev.ctx.key, set()).add(ptr)
                    self._arm_return()
        return ALLOW

    def _on_read(self, ev: VmExitEvent) -> Verdict:
        self.read_checks += 1
        w = self._object_at(ev.kind.addr)
        if w is None:
            self.false_traps += 1
            return ALLOW
        if ev.ctx.syscall in _KERNEL_READERS:
            return ALLOW
        self._emit(
            EventKind.UNAUTHORIZED_READ_BLOCKED, self.intro.attribute_access(ev.ctx), w.path, w.serial
        )
        return DENY

    def _on_refcount_write(self, ev: VmExitEvent, w: WatchedDentry) -> Verdict:
        width = self.profile.width("dentry", "refcount")
        old = self.hv.vmi_u(w.refcount_addr, width)
        new = int.from_bytes(ev.kind.new_value, "little")
        delta = new - old
        if delta > 0:
            self._on_open(ev, w)
        elif delta < 0:
            self._emit(EventKind.FILE_CLOSED, self.intro.attribute_access(ev.ctx), w.path, w.serial)
        if new == 0:
            self.holds[w.serial] += 1
            self._emit(EventKind.REFCOUNT_RESCUED, self.intro.attribute_access(ev.ctx), w.path, w.serial)
            return Verdict.rewrite((1).to_bytes(width, "little"))
        return ALLOW

    def _on_open(self, ev: VmExitEvent, w: WatchedDentry) -> None:
        subject = self.intro.attribute_access(ev.ctx)
        inflight = self.hv.syscall_args(ev.ctx)
        name = inflight[0] if inflight else None
        self._emit(EventKind.FILE_OPENED, subject, w.path, w.serial, name or "")
        if name != "open":
            return
        if subject.pid in self.agent_pids:
            return
        ops = open_ops(inflight[1]["mode"])
        if w.policy.permits_all(subject, ops):
            return
        self._expire_stale()
        self.pending_blocks[ev.ctx.key] = PendingBlock(w.serial, subject, w.path, ops)
        self._arm_return()

    def _expire_stale(self) -> None:
        live = {p.address_space_id for p in self.intro.walk_process_list()}
        for table in (self.pending_blocks, self.pending_aliases, self.pending_links):
            for key in [k for k in table if k[0] not in live]:
                del table[key]

    def _arm_return(self) -> None:
        self.hv.arm_breakpoint(SYSCALL_RETURN)

    def _maybe_disarm_return(self) -> None:
        if not (self.pending_blocks or self.pending_aliases or self.pending_links):
            self.hv.disarm_breakpoint(SYSCALL_RETURN)

    def on_breakpoint(self, ev: VmExitEvent) -> Any:
        site = ev.kind.site
        if site == MONITOR_SYSCALL_ENTRY:
            return self._handle_monitor_syscall(ev.ctx, ev.kind.args.get("payload", b""))
        if site == SYSCALL_RETURN:
            self._on_return(ev)
            return None
        if site.kind == "entry" and site.name == "kill":
            target = ev.kind.args.get("pid")
            if target in self.agent_pids:
                ev.kind.args["pid"] = -1
                self._emit(
                    EventKind.AGENT_KILL_BLOCKED,
                    self.intro.attribute_access(ev.ctx),
                    f"/proc/{target}",
                    detail=f"target={target}",
                )
            return None
        if site.kind == "entry" and site.name == "link":
            self._on_link_entry(ev)
        return None

    def _on_link_entry(self, ev: VmExitEvent) -> None:
        subject = self.intro.attribute_access(ev.ctx)
        if subject is UNKNOWN_PROCESS:
            return
        src = self.intro.lookup(subject.mnt_namespace_id, ev.kind.args["existing"])
        s = self._by_addr.get(src)
        if s is not None:
            self.pending_links[ev.ctx.key] = (s, ev.kind.args["newpath"], subject.mnt_namespace_id)
            self._arm_return()

    def _on_return(self, ev: VmExitEvent) -> None:
        key = ev.ctx.key
        result = ev.kind.result
        block = self.pending_blocks.pop(key, None)
        if block is not None:
            if isinstance(result, int) and result >= 0:
                self._scrub(ev.ctx, result, block)
                self.hv.patch_syscall_result(key, -1)
            self._emit(
                EventKind.ACCESS_BLOCKED,
                block.subject,
                block.path,
                block.serial,
                "+".join(block.ops),
            )
        aliases = self.pending_aliases.pop(key, set())
        link = self.pending_links.pop(key, None)
        if link is not None and result == 0:
            serial, newpath, mnt_ns = link
            d = self.intro.lookup(mnt_ns, newpath)
            if d:
                if d not in self._by_addr:
                    src = self.watch[serial]
                    self.watch_dentry(d, src.policy, mnt_ns, migrate=False, closure=False)
                aliases.add(d)
        for d in sorted(aliases):
            s = self._by_addr.get(d)
            if s is None:
                continue
            w = self.watch[s]
            if self.config.migrate and self.config.placement is Placement.ISOLATED:
                self.migrate_dentry(w.addr)
            self._close_aliases(w)
            self._emit(
                EventKind.HARDLINK_TRACKED, self.intro.attribute_access(ev.ctx), w.path, w.serial
            )
        self._maybe_disarm_return()

    def _scrub(self, ctx: CpuContext, fd: int, block: PendingBlock) -> None:
        """Undo what a blocked open left behind: the fd slot, the file object, the reference."""
        proc = self.intro.attribute_access(ctx)
        if proc is UNKNOWN_PROCESS:
            return
        slot = self.intro.fd_slot_addr(proc.files_addr, fd)
        file = self.hv.vmi_u(slot, 8)
        if not file:
            return
        d = self.intro.u(file, "file", "dentry")
        self.hv.vmi_write(slot, bytes(8))
        # The file object is zeroed but not returned to the allocator: the guest
        # never learns it was freed, and a zeroed object cannot be reused by fd guessing.
        self.hv.vmi_write(file, bytes(self.profile.size("file")))
        if d:
            rc = self.intro.u(d, "dentry", "refcount") - 1
            s = self._by_addr.get(d)
            if rc < 1 and s is not None:
                self.holds[s] += 1
                rc = 1
            self.intro.put(d, "dentry", "refcount", max(rc, 0))

    # ------------------------------------------------------------------
    # queries
    # ------------------------------------------------------------------
    def watched_serials(self) -> set[int]:
        return set(self.watch)

    def watch_set(self) -> list[WatchedDentry]:
        return sorted(self.watch.values(), key=lambda w: w.serial)

    def check_liveness(self) -> list[str]:
        """Problems with the watch set: missing dentries or refcount below 1."""
        problems = []
        for w in self.watch.values():
            try:
                v = self.intro.dentry(w.addr)
            except IntrospectionFault as e:  # pragma: no cover - defensive
                problems.append(str(e))
                continue
            if v.serial != w.serial:
                problems.append(f"{w.path}: dentry {w.addr:#x} no longer holds serial {w.serial}")
            elif v.refcount < 1:
                problems.append(f"{w.path}: refcount {v.refcount}")
            elif w.addr not in self.allocator.live:
                problems.append(f"{w.path}: dentry {w.addr:#x} was freed")
        return problems

    def check_alias_closure(self) -> list[str]:
        problems = []
        for w in self.watch.values():
            for peer in self.intro.alias_ring(w.addr):
                if peer not in self._by_addr:
                    problems.append(f"{w.path}: alias {peer:#x} not watched")
        return problems
