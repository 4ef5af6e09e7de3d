"""Out-of-guest semantic reconstruction over raw memory reads.

Everything here goes through :meth:`Hypervisor.vmi_read`, so introspection never
raises a trap event.  The only inputs besides memory are the layout profile and
a handful of symbol addresses (task-list head, dcache hash table), the same
knowledge a memory-forensics profile provides.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

from .fs import Mount, components, normpath
from .hypervisor import CpuContext, Hypervisor
from .kernel import INIT_NS, TASK_ALIVE, TASK_AGENT, TASK_HIDDEN, dentry_hash
from .memory import LayoutProfile

HOST = "Host"
UNKNOWN = "Unknown"


class IntrospectionFault(Exception):
    """Guest structures are inconsistent (e.g. a task list that never closes)."""


@dataclass(frozen=True)
class ProcessInfo:
    pid: int
    name: str
    uid: int
    container_id: str
    pid_namespace_id: int
    mnt_namespace_id: int = 0
    address_space_id: int = 0
    task_addr: int = 0
    files_addr: int = 0
    hidden: bool = False
    agent: bool = False

    @property
    def is_host(self) -> bool:
        return self.container_id == HOST

    def to_record(self) -> dict:
        return {"pid": self.pid, "name": self.name, "uid": self.uid, "container": self.container_id}


UNKNOWN_PROCESS = ProcessInfo(-1, "?", -1, UNKNOWN, 0)


@dataclass
class ContainerInfo:
    container_id: str
    pid_namespace_id: int
    mnt_namespace_id: int = 0
    layer_ids: list[str] = field(default_factory=list)
    upper_layer_id: Optional[str] = None
    member_pids: list[int] = field(default_factory=list)


ContainerMap = dict[str, ContainerInfo]


@dataclass(frozen=True)
class DentryView:
    addr: int
    refcount: int
    serial: int
    parent: int
    inode: int
    hash_next: int
    alias_next: int
    alias_prev: int
    flags: int
    name: str


@dataclass(frozen=True)
class ContainerRuntimeConfig:
    """What the container engine tells the host about one container."""

    container_id: str
    layer_ids: list[str]
    upper_layer_id: str
    mount: Optional[Mount] = None


class Introspector:
    def __init__(
        self,
        hv: Hypervisor,
        profile: LayoutProfile,
        symbols: dict[str, int],
        runtime: Iterable[ContainerRuntimeConfig] = (),
    ):
        self.hv = hv
        self.profile = profile
        self.symbols = symbols
        self.runtime = {c.container_id: c for c in runtime}
        # pid_ns → container id is learned from the first member seen; the engine
        # names containers, the guest only knows namespace ids.
        self.ns_names: dict[int, str] = {}

    # -- primitive reads --------------------------------------------------
    def u(self, obj: int, kind: str, name: str) -> int:
        f = self.profile.field(kind, name)
        return self.hv.vmi_u(obj + f.offset, f.width)

    def raw(self, obj: int, kind: str, name: str) -> bytes:
        f = self.profile.field(kind, name)
        return self.hv.vmi_read(obj + f.offset, f.width)

    def put(self, obj: int, kind: str, name: str, value: int) -> None:
        f = self.profile.field(kind, name)
        self.hv.vmi_write(obj + f.offset, value.to_bytes(f.width, "little"))

    # -- processes --------------------------------------------------------
    def name_container(self, pid_ns: int, container_id: str) -> None:
        self.ns_names[pid_ns] = container_id

    def _container_of(self, pid_ns: int) -> str:
        if pid_ns == INIT_NS.pid_ns:
            return HOST
        return self.ns_names.get(pid_ns, f"ns:{pid_ns}")

    def read_task(self, task: int) -> ProcessInfo:
        raw = self.hv.vmi_read(task, self.profile.size("process"))

        def fld(name: str) -> int:
            f = self.profile.field("process", name)
            return int.from_bytes(raw[f.offset : f.offset + f.width], "little")

        nf = self.profile.field("process", "name")
        name = raw[nf.offset : nf.offset + nf.width].split(b"\0", 1)[0].decode(errors="replace")
        pid_ns = fld("pid_namespace_id")
        flags = fld("flags")
        return ProcessInfo(
            pid=fld("pid"),
            name=name,
            uid=fld("uid"),
            container_id=self._container_of(pid_ns),
            pid_namespace_id=pid_ns,
            mnt_namespace_id=fld("mnt_namespace_id"),
            address_space_id=fld("address_space_id"),
            task_addr=task,
            files_addr=fld("fd_table"),
            hidden=bool(flags & TASK_HIDDEN),
            agent=bool(flags & TASK_AGENT),
        )

    def _walk(self, link: str, limit: int = 1 << 16) -> list[int]:
        head = self.symbols["init_task"]
        out = [head]
        cur = self.u(head, "process", link)
        while cur != head:
            if cur == 0 or len(out) > limit:
                raise IntrospectionFault(f"task list via {link} does not close at the initial task")
            out.append(cur)
            cur = self.u(cur, "process", link)
        return out

    def walk_process_list(self, reverse: bool = False) -> list[ProcessInfo]:
        tasks = self._walk("tasks_prev" if reverse else "tasks_next")
        infos = []
        for t in tasks:
            if self.u(t, "process", "flags") & TASK_ALIVE:
                infos.append(self.read_task(t))
        return infos

    def group_containers(self, procs: Iterable[ProcessInfo]) -> ContainerMap:
        out: ContainerMap = {}
        for p in procs:
            if p.pid_namespace_id == INIT_NS.pid_ns:
                continue
            cid = p.container_id
            info = out.get(cid)
            if info is None:
                rt = self.runtime.get(cid)
                info = ContainerInfo(
                    cid,
                    p.pid_namespace_id,
                    p.mnt_namespace_id,
                    list(rt.layer_ids) if rt else [],
                    rt.upper_layer_id if rt else None,
                )
                out[cid] = info
            info.member_pids.append(p.pid)
        return out

    def resolve_container_path(self, container_id: str, path: str) -> tuple[str, str]:
        """(host-side merged path, id of the topmost layer holding ``path``)."""
        rt = self.runtime.get(container_id)
        if rt is None or rt.mount is None:
            raise KeyError(f"unknown container {container_id!r}")
        path = normpath(path)
        hit = rt.mount.resolve(path)
        if hit is None:
            raise FileNotFoundError(path)
        merged = f"/var/lib/containers/{container_id}/merged{path}"
        return merged, hit[0].layer_id

    def attribute_access(self, ctx: CpuContext) -> ProcessInfo:
        """Accessing process for a trap context, matched on the address-space id."""
        try:
            tasks = self._walk("tasks_next")
        except IntrospectionFault:
            return UNKNOWN_PROCESS
        f = self.profile.field("process", "address_space_id")
        for t in tasks:
            if self.hv.vmi_u(t + f.offset, f.width) == ctx.address_space_id:
                if self.u(t, "process", "flags") & TASK_ALIVE:
                    return self.read_task(t)
        return UNKNOWN_PROCESS

    def task_of_pid(self, pid: int) -> Optional[ProcessInfo]:
        for p in self.walk_process_list():
            if p.pid == pid:
                return p
        return None

    # -- files ------------------------------------------------------------
    def fd_table(self, files_addr: int) -> dict[int, int]:
        f = self.profile.field("files", "fd_array")
        raw = self.hv.vmi_read(files_addr + f.offset, f.width)
        out = {}
        for fd in range(f.width // 8):
            addr = int.from_bytes(raw[8 * fd : 8 * fd + 8], "little")
            if addr:
                out[fd] = addr
        return out

    def fd_slot_addr(self, files_addr: int, fd: int) -> int:
        return self.profile.field_addr(files_addr, "files", "fd_array") + 8 * fd

    def dentry(self, d: int) -> DentryView:
        raw = self.hv.vmi_read(d, self.profile.size("dentry"))

        def fld(name: str) -> int:
            f = self.profile.field("dentry", name)
            return int.from_bytes(raw[f.offset : f.offset + f.width], "little")

        nf = self.profile.field("dentry", "name")
        n = min(fld("name_len"), nf.width)
        return DentryView(
            addr=d,
            refcount=fld("refcount"),
            serial=fld("serial"),
            parent=fld("parent"),
            inode=fld("inode"),
            hash_next=fld("hash_next"),
            alias_next=fld("alias_next"),
            alias_prev=fld("alias_prev"),
            flags=fld("flags"),
            name=raw[nf.offset : nf.offset + n].decode(errors="replace"),
        )

    def dentry_path(self, d: int) -> str:
        parts = []
        for _ in range(4096):
            v = self.dentry(d)
            if not v.parent:
                return "/" + "/".join(reversed(parts))
            parts.append(v.name)
            d = v.parent
        raise IntrospectionFault("dentry parent chain does not terminate")

    def alias_ring(self, d: int, limit: int = 1 << 16) -> list[int]:
        ring = [d]
        cur = self.u(d, "dentry", "alias_next")
        while cur != d:
            if cur == 0 or len(ring) > limit:
                raise IntrospectionFault(f"alias ring of {d:#x} does not close")
            ring.append(cur)
            cur = self.u(cur, "dentry", "alias_next")
        return ring

    def bucket_addr(self, parent: int, name: str) -> int:
        return self.symbols["dentry_hashtable"] + 8 * dentry_hash(
            parent, name, self.symbols["d_hash_buckets"]
        )

    def hash_link_slot(self, d: int) -> int:
        """Address of the pointer that links ``d`` into its hash chain (0 if unhashed)."""
        v = self.dentry(d)
        slot = self.bucket_addr(v.parent, v.name)
        cur = self.hv.vmi_u(slot, 8)
        nxt = self.profile.field("dentry", "hash_next")
        while cur:
            if cur == d:
                return slot
            slot = cur + nxt.offset
            cur = self.hv.vmi_u(slot, 8)
        return 0

    def lookup(self, mnt_ns: int, path: str) -> int:
        d = self.symbols.get(f"mnt_root:{mnt_ns}", 0)
        for comp in components(path):
            if not d:
                return 0
            cur = self.hv.vmi_u(self.bucket_addr(d, comp), 8)
            while cur:
                v = self.dentry(cur)
                if v.parent == d and v.name == comp:
                    break
                cur = v.hash_next
            d = cur
        return d

    def children_of(self, d: int) -> list[int]:
        """Hashed dentries whose parent is ``d`` (full table scan)."""
        n = self.symbols["d_hash_buckets"]
        raw = self.hv.vmi_read(self.symbols["dentry_hashtable"], 8 * n)
        out = []
        for i in range(n):
            cur = int.from_bytes(raw[8 * i : 8 * i + 8], "little")
            while cur:
                v = self.dentry(cur)
                if v.parent == d:
                    out.append(cur)
                cur = v.hash_next
        return out
