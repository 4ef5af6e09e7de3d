"""Miniature guest kernel: tasks, namespaces, dcache, overlay mounts and syscalls.

All kernel objects live in :class:`~vmimon.memory.GuestMemory` and every field
access the kernel performs on behalf of a process goes through the hypervisor
(``guest_read``/``guest_write``), so page permissions can trap it.  Python-side
state is limited to what never moves: task and mount bookkeeping, the inode
cache and open-file cursor positions.  Dentry addresses are never cached here,
because the monitor may migrate dentries underneath the kernel.

Syscalls run as small generators with three phases (entry, body, return) so a
seeded scheduler can interleave in-flight instances; the body is atomic.
"""

from __future__ import annotations

import itertools
import posixpath
import random
import zlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Generator, Iterable, Optional

from .fs import FsError, Layer, Mount, Storage, components, normpath, parent_path
from .hypervisor import CpuContext, Hypervisor
from .memory import GuestMemory, LayoutProfile, PageKind, Placement, SlabAllocator

EPERM, ENOENT, ESRCH, EBADF, EACCES, EEXIST, EXDEV = 1, 2, 3, 9, 13, 17, 18
ENOTDIR, EISDIR, EINVAL, EMFILE, ENAMETOOLONG = 20, 21, 22, 24, 36

TASK_ALIVE, TASK_HIDDEN, TASK_AGENT = 1, 2, 4
DENTRY_HASHED = 1
KERNEL_PID = 0

GETDENTS_FILTER_ON = 0x01


class KernelError(Exception):
    def __init__(self, errno: int):
        super().__init__(errno)
        self.errno = errno


class OpenMode(Enum):
    READ_ONLY = "r"
    WRITE_ONLY = "w"
    READ_WRITE = "rw"

    @property
    def reads(self) -> bool:
        return self is not OpenMode.WRITE_ONLY

    @property
    def writes(self) -> bool:
        return self is not OpenMode.READ_ONLY

    @classmethod
    def parse(cls, text: str) -> "OpenMode":
        for m in cls:
            if text in (m.value, m.name, m.name.lower()):
                return m
        raise ValueError(f"bad open mode {text!r}")


_MODE_CODE = {OpenMode.READ_ONLY: 0, OpenMode.WRITE_ONLY: 1, OpenMode.READ_WRITE: 2}
_CODE_MODE = {v: k for k, v in _MODE_CODE.items()}


class IoDirection(Enum):
    READ = "read"
    WRITE = "write"


@dataclass(frozen=True)
class NamespaceSet:
    pid_ns: int
    mnt_ns: int
    uts_ns: int
    ipc_ns: int
    net_ns: int
    user_ns: int


# Same inode numbers a stock Linux boot hands the initial namespaces.
INIT_NS = NamespaceSet(
    pid_ns=4026531836,
    mnt_ns=4026531840,
    uts_ns=4026531838,
    ipc_ns=4026531839,
    net_ns=4026531992,
    user_ns=4026531837,
)


@dataclass(eq=False)
class Process:
    pid: int
    name: str
    uid: int
    address_space_id: int
    namespaces: NamespaceSet
    task_addr: int
    files_addr: int
    is_hidden_agent: bool = False
    is_agent: bool = False
    alive: bool = True
    stack_id: int = 0
    container_id: Optional[str] = None

    def __repr__(self) -> str:
        return f"Process({self.pid}, {self.name!r})"


@dataclass(frozen=True)
class RefMutation:
    mseq: int
    serial: int
    delta: int


@dataclass
class SyscallLogEntry:
    seq: int
    pid: int
    name: str
    args: dict
    result: Any = None
    raw_result: Any = None
    refs: list[RefMutation] = field(default_factory=list)
    file_addr: Optional[int] = None
    target_serial: Optional[int] = None


@dataclass(eq=False)
class SyscallInstance:
    proc: Process
    name: str
    args: dict
    ctx: CpuContext
    entry: SyscallLogEntry
    result: Any = None
    done: bool = False
    gen: Optional[Generator] = None


@dataclass
class _OpenFile:
    mode: OpenMode
    pos: int = 0
    origin: int = 0  # seq of the open that created it


def dentry_hash(parent: int, name: str, nbuckets: int) -> int:
    """Deterministic bucket index for (parent dentry, component name)."""
    return (zlib.crc32(name.encode()) ^ ((parent >> 6) * 2654435761)) % nbuckets


class Kernel:
    def __init__(
        self,
        memory: GuestMemory,
        allocator: SlabAllocator,
        hv: Hypervisor,
        profile: LayoutProfile,
        storage: Storage,
        hash_buckets: int = 1024,
    ):
        self.memory = memory
        self.allocator = allocator
        self.hv = hv
        self.profile = profile
        self.storage = storage
        self.hash_buckets = hash_buckets
        self.symbols: dict[str, int] = {}
        self.procs: dict[int, Process] = {}
        self.mounts: dict[int, Mount] = {}
        self.roots: dict[int, int] = {}
        self.log: list[SyscallLogEntry] = []
        self.clock = 0
        self._icache: dict[tuple[int, int], int] = {}
        self._page_cache: dict[int, int] = {}
        self._files: dict[int, _OpenFile] = {}
        self._pid = itertools.count(1)
        self._serial = itertools.count(1)
        self._seq = itertools.count(1)
        self._mseq = itertools.count(1)
        self._stack = itertools.count(0x7FF0_0000, 0x40)
        self._ns = itertools.count(4026532000)
        self.mseq = 0
        self.booted = False

    # ------------------------------------------------------------------
    # boot
    # ------------------------------------------------------------------
    def boot(self, host_layer: Layer) -> Process:
        ps = self.memory.page_size
        text = self.memory.claim_page(PageKind.KERNEL_CODE)
        base = text * ps
        # Monitor_Syscall body: a NOP sled that returns immediately.
        self.memory.write(base, b"\x90" * 64 + b"\xc3")
        self.memory.write(base + 0x80, b"\x0f\x07")  # sysret site
        self.memory.write(base + 0x100, bytes([GETDENTS_FILTER_ON]) + b"\x90" * 15)
        self.symbols.update(
            kernel_text=base,
            monitor_syscall=base,
            syscall_return=base + 0x80,
            getdents_filter=base + 0x100,
        )
        n_pages = -(-self.hash_buckets * 8 // ps)
        first = self.memory.claim_page(PageKind.DATA)
        for i in range(1, n_pages):
            if self.memory.claim_page(PageKind.DATA) != first + i:
                raise RuntimeError("dcache hash table must be contiguous")
        self.symbols["dentry_hashtable"] = first * ps
        self.symbols["d_hash_buckets"] = self.hash_buckets
        self.add_mount(INIT_NS.mnt_ns, Mount([host_layer], host_layer))
        init = self.spawn_process("init", 0, INIT_NS)
        self.symbols["init_task"] = init.task_addr
        self.booted = True
        return init

    @property
    def kctx(self) -> CpuContext:
        return CpuContext(KERNEL_PID, 0, next(self._stack), "kthread")

    def add_mount(self, mnt_ns: int, mount: Mount) -> int:
        self.mounts[mnt_ns] = mount
        ctx = self.kctx
        root_node = mount.resolve("/")[1]
        entry = SyscallLogEntry(next(self._seq), KERNEL_PID, "mount", {"mnt_ns": mnt_ns})
        self.log.append(entry)
        root = self._d_alloc(ctx, 0, "/", root_node, Placement.DEFAULT, entry, mnt_ns)
        self._dref(ctx, root, +1, entry)  # the mount's own hold
        self.roots[mnt_ns] = root
        entry.result = entry.raw_result = 0
        self.symbols[f"mnt_root:{mnt_ns}"] = root
        return root

    def new_namespaces(self, share_user: bool = True) -> NamespaceSet:
        return NamespaceSet(
            pid_ns=next(self._ns),
            mnt_ns=next(self._ns),
            uts_ns=next(self._ns),
            ipc_ns=next(self._ns),
            net_ns=next(self._ns),
            user_ns=INIT_NS.user_ns if share_user else next(self._ns),
        )

    # ------------------------------------------------------------------
    # typed field access through the hypervisor
    # ------------------------------------------------------------------
    def _rd(self, ctx: CpuContext, obj: int, kind: str, name: str) -> int:
        f = self.profile.field(kind, name)
        return int.from_bytes(self.hv.guest_read(ctx, obj + f.offset, f.width), "little")

    def _wr(self, ctx: CpuContext, obj: int, kind: str, name: str, value: int) -> bool:
        f = self.profile.field(kind, name)
        return self.hv.guest_write(ctx, obj + f.offset, value.to_bytes(f.width, "little"))

    def _pack(self, kind: str, img: bytearray, name: str, value: int | bytes) -> None:
        f = self.profile.field(kind, name)
        if isinstance(value, int):
            value = value.to_bytes(f.width, "little")
        img[f.offset : f.offset + len(value)] = value[: f.width]

    def raw_u(self, obj: int, kind: str, name: str) -> int:
        """Ground-truth field read, bypassing every trap (test oracles only)."""
        f = self.profile.field(kind, name)
        return int.from_bytes(self.memory.data[obj + f.offset : obj + f.offset + f.width], "little")

    def _parse_dentry(self, raw: bytes) -> tuple[int, str]:
        p = self.profile.field("dentry", "parent")
        nl = self.profile.field("dentry", "name_len")
        nm = self.profile.field("dentry", "name")
        parent = int.from_bytes(raw[p.offset : p.offset + p.width], "little")
        n = int.from_bytes(raw[nl.offset : nl.offset + nl.width], "little")
        name = raw[nm.offset : nm.offset + min(n, nm.width)].decode(errors="replace")
        return parent, name

    # ------------------------------------------------------------------
    # processes
    # ------------------------------------------------------------------
    def spawn_process(
        self,
        name: str,
        uid: int = 0,
        namespaces: NamespaceSet = INIT_NS,
        hidden: bool = False,
        agent: bool = False,
        container_id: Optional[str] = None,
    ) -> Process:
        ctx = self.kctx
        pid = next(self._pid)
        task = self.allocator.alloc("process", Placement.DEFAULT)
        files = self.allocator.alloc("files", Placement.DEFAULT)
        asid = 0x1000_0000 + pid * 0x1000
        flags = TASK_ALIVE | (TASK_HIDDEN if hidden else 0) | (TASK_AGENT if agent else 0)
        img = bytearray(self.profile.size("process"))
        for fname, value in (
            ("pid", pid),
            ("uid", uid),
            ("address_space_id", asid),
            ("pid_namespace_id", namespaces.pid_ns),
            ("mnt_namespace_id", namespaces.mnt_ns),
            ("uts_namespace_id", namespaces.uts_ns),
            ("ipc_namespace_id", namespaces.ipc_ns),
            ("net_namespace_id", namespaces.net_ns),
            ("user_namespace_id", namespaces.user_ns),
            ("fd_table", files),
            ("flags", flags),
            ("name", name.encode()[:15]),
        ):
            self._pack("process", img, fname, value)
        head = self.symbols.get("init_task")
        if head is None:
            self._pack("process", img, "tasks_next", task)
            self._pack("process", img, "tasks_prev", task)
            self.hv.guest_write(ctx, task, bytes(img))
        else:
            prev = self._rd(ctx, head, "process", "tasks_prev")
            self._pack("process", img, "tasks_next", head)
            self._pack("process", img, "tasks_prev", prev)
            self.hv.guest_write(ctx, task, bytes(img))
            self._wr(ctx, prev, "process", "tasks_next", task)
            self._wr(ctx, head, "process", "tasks_prev", task)
        if agent:
            page = self.memory.claim_page(PageKind.AGENT_CODE)
            self.memory.write(page * self.memory.page_size, b"\x55\x48\x89\xe5" + name.encode()[:60])
            self.symbols[f"agent_text:{pid}"] = page * self.memory.page_size
        if container_id is None and namespaces.mnt_ns != INIT_NS.mnt_ns:
            container_id = self.mounts[namespaces.mnt_ns].container_id
        proc = Process(pid, name, uid, asid, namespaces, task, files, hidden, agent, True, 0, container_id)
        self.procs[pid] = proc
        return proc

    def alive_processes(self) -> list[Process]:
        return [p for p in self.procs.values() if p.alive]

    def _exit(self, ctx: CpuContext, proc: Process, entry: SyscallLogEntry) -> None:
        for fd in sorted(self.fd_table(proc)):
            self._close_fd(ctx, proc, fd, entry)
        nxt = self._rd(ctx, proc.task_addr, "process", "tasks_next")
        prv = self._rd(ctx, proc.task_addr, "process", "tasks_prev")
        self._wr(ctx, prv, "process", "tasks_next", nxt)
        self._wr(ctx, nxt, "process", "tasks_prev", prv)
        self._wr(ctx, proc.task_addr, "process", "flags", 0)
        self.allocator.free(proc.task_addr)
        self.allocator.free(proc.files_addr)
        proc.alive = False

    # ------------------------------------------------------------------
    # fd table
    # ------------------------------------------------------------------
    @property
    def max_fds(self) -> int:
        return self.profile.width("files", "fd_array") // 8

    def _slot(self, proc: Process, fd: int) -> int:
        return self.profile.field_addr(proc.files_addr, "files", "fd_array") + 8 * fd

    def fd_table(self, proc: Process) -> dict[int, int]:
        """fd → file object address, read straight from memory."""
        if not proc.alive:
            return {}
        base = self._slot(proc, 0)
        raw = self.memory.data[base : base + 8 * self.max_fds]
        out = {}
        for fd in range(self.max_fds):
            addr = int.from_bytes(raw[8 * fd : 8 * fd + 8], "little")
            if addr:
                out[fd] = addr
        return out

    def _read_fd(self, ctx: CpuContext, proc: Process, fd: int) -> int:
        if not 0 <= fd < self.max_fds:
            return 0
        return int.from_bytes(self.hv.guest_read(ctx, self._slot(proc, fd), 8), "little")

    def _close_fd(self, ctx: CpuContext, proc: Process, fd: int, entry: SyscallLogEntry) -> int:
        file = self._read_fd(ctx, proc, fd)
        if not file:
            return -EBADF
        d = self._rd(ctx, file, "file", "dentry")
        self.hv.guest_write(ctx, self._slot(proc, fd), bytes(8))
        if d:
            self._dref(ctx, d, -1, entry)
        self.allocator.free(file)
        self._files.pop(file, None)
        return 0

    # ------------------------------------------------------------------
    # dcache
    # ------------------------------------------------------------------
    def _bucket(self, parent: int, name: str) -> int:
        return self.symbols["dentry_hashtable"] + 8 * dentry_hash(parent, name, self.hash_buckets)

    def _d_lookup(self, ctx: CpuContext, parent: int, name: str) -> int:
        addr = int.from_bytes(self.hv.guest_read(ctx, self._bucket(parent, name), 8), "little")
        hdr = self.profile.offset("dentry", "name") + self.profile.width("dentry", "name")
        nxt = self.profile.field("dentry", "hash_next")
        while addr:
            raw = self.hv.guest_read(ctx, addr, hdr)
            p, n = self._parse_dentry(raw)
            if p == parent and n == name:
                return addr
            addr = int.from_bytes(raw[nxt.offset : nxt.offset + nxt.width], "little")
        return 0

    def _iget(self, ctx: CpuContext, mnt_ns: int, node) -> int:
        key = (mnt_ns, node.nid)
        inode = self._icache.get(key)
        if inode:
            return inode
        mount = self.mounts[mnt_ns]
        owner = next((layer.index for layer in mount.layers if node in layer.entries.values()), 0)
        inode = self.allocator.alloc("inode", Placement.DEFAULT)
        img = bytearray(self.profile.size("inode"))
        for fname, value in (
            ("ino", node.nid),
            ("link_count", node.nlink),
            ("mode", node.mode | (0o040000 if node.is_dir else 0o100000)),
            ("uid", node.uid),
            ("owner_layer", owner),
            ("data", node.nid),
        ):
            self._pack("inode", img, fname, value)
        self.hv.guest_write(ctx, inode, bytes(img))
        self._icache[key] = inode
        return inode

    def _d_alloc(
        self,
        ctx: CpuContext,
        parent: int,
        name: str,
        node,
        placement: Placement,
        entry: SyscallLogEntry,
        mnt_ns: int,
    ) -> int:
        if len(name.encode()) > self.profile.width("dentry", "name"):
            raise KernelError(ENAMETOOLONG)
        inode = self._iget(ctx, mnt_ns, node)
        addr = self.allocator.alloc("dentry", placement)
        bucket = self._bucket(parent, name)
        head = int.from_bytes(self.hv.guest_read(ctx, bucket, 8), "little")
        img = bytearray(self.profile.size("dentry"))
        for fname, value in (
            ("serial", next(self._serial)),
            ("parent", parent),
            ("inode", inode),
            ("hash_next", head),
            ("alias_next", addr),
            ("alias_prev", addr),
            ("flags", DENTRY_HASHED),
            ("name_len", len(name.encode())),
            ("name", name.encode()),
        ):
            self._pack("dentry", img, fname, value)
        self.hv.guest_write(ctx, addr, bytes(img))
        self.hv.guest_write(ctx, bucket, addr.to_bytes(8, "little"))
        self._alias_add(ctx, addr, inode)
        if parent:
            self._dref(ctx, parent, +1, entry)
        return addr

    def _alias_add(self, ctx: CpuContext, d: int, inode: int) -> None:
        head = self._rd(ctx, inode, "inode", "alias")
        if not head:
            self._wr(ctx, inode, "inode", "alias", d)
            return
        nxt = self._rd(ctx, head, "dentry", "alias_next")
        self._wr(ctx, d, "dentry", "alias_next", nxt)
        self._wr(ctx, d, "dentry", "alias_prev", head)
        self._wr(ctx, head, "dentry", "alias_next", d)
        self._wr(ctx, nxt, "dentry", "alias_prev", d)

    def _alias_del(self, ctx: CpuContext, d: int, inode: int) -> None:
        nxt = self._rd(ctx, d, "dentry", "alias_next")
        prv = self._rd(ctx, d, "dentry", "alias_prev")
        if nxt == d:
            if self._rd(ctx, inode, "inode", "alias") == d:
                self._wr(ctx, inode, "inode", "alias", 0)
        else:
            self._wr(ctx, prv, "dentry", "alias_next", nxt)
            self._wr(ctx, nxt, "dentry", "alias_prev", prv)
            if self._rd(ctx, inode, "inode", "alias") == d:
                self._wr(ctx, inode, "inode", "alias", nxt)
        self._wr(ctx, d, "dentry", "alias_next", d)
        self._wr(ctx, d, "dentry", "alias_prev", d)

    def _hash_del(self, ctx: CpuContext, d: int) -> None:
        hdr = self.profile.offset("dentry", "name") + self.profile.width("dentry", "name")
        parent, name = self._parse_dentry(self.hv.guest_read(ctx, d, hdr))
        bucket = self._bucket(parent, name)
        nxt = self._rd(ctx, d, "dentry", "hash_next")
        cur = int.from_bytes(self.hv.guest_read(ctx, bucket, 8), "little")
        if cur == d:
            self.hv.guest_write(ctx, bucket, nxt.to_bytes(8, "little"))
        else:
            while cur:
                after = self._rd(ctx, cur, "dentry", "hash_next")
                if after == d:
                    self._wr(ctx, cur, "dentry", "hash_next", nxt)
                    break
                cur = after
        self._wr(ctx, d, "dentry", "hash_next", 0)
        flags = self._rd(ctx, d, "dentry", "flags")
        self._wr(ctx, d, "dentry", "flags", flags & ~DENTRY_HASHED)

    def _dref(self, ctx: CpuContext, d: int, delta: int, entry: SyscallLogEntry) -> int:
        """Adjust a dentry refcount with a guest read-modify-write; returns the stored value."""
        rc = self._rd(ctx, d, "dentry", "refcount")
        self._wr(ctx, d, "dentry", "refcount", max(rc + delta, 0))
        self.mseq = next(self._mseq)
        entry.refs.append(RefMutation(self.mseq, self.raw_u(d, "dentry", "serial"), delta))
        stored = self._rd(ctx, d, "dentry", "refcount")
        if delta < 0 and stored == 0 and not self._rd(ctx, d, "dentry", "flags") & DENTRY_HASHED:
            self._d_free(ctx, d, entry, unpin_parent=False)
        return stored

    def _d_free(self, ctx: CpuContext, d: int, entry: SyscallLogEntry, unpin_parent: bool = True) -> None:
        if self._rd(ctx, d, "dentry", "flags") & DENTRY_HASHED:
            self._hash_del(ctx, d)
        inode = self._rd(ctx, d, "dentry", "inode")
        self._alias_del(ctx, d, inode)
        parent = self._rd(ctx, d, "dentry", "parent")
        self.allocator.free(d)
        if unpin_parent and parent:
            self._dref(ctx, parent, -1, entry)

    def _node_of(self, ctx: CpuContext, d: int):
        inode = self._rd(ctx, d, "dentry", "inode")
        return self.storage.nodes[self._rd(ctx, inode, "inode", "data")]

    def _walk(
        self,
        ctx: CpuContext,
        proc: Process,
        path: str,
        entry: SyscallLogEntry,
        placement: Placement = Placement.DEFAULT,
    ) -> int:
        mnt_ns = proc.namespaces.mnt_ns
        mount = self.mounts[mnt_ns]
        try:
            comps = components(path)
        except ValueError:
            raise KernelError(EINVAL) from None
        d = self.roots[mnt_ns]
        cur = "/"
        for i, comp in enumerate(comps):
            last = i == len(comps) - 1
            if not self._node_of(ctx, d).is_dir:
                raise KernelError(ENOTDIR)
            cur = posixpath.join(cur, comp)
            child = self._d_lookup(ctx, d, comp)
            if not child:
                hit = mount.resolve(cur)
                if hit is None:
                    raise KernelError(ENOENT)
                child = self._d_alloc(
                    ctx, d, comp, hit[1], placement if last else Placement.DEFAULT, entry, mnt_ns
                )
            d = child
        return d

    # ------------------------------------------------------------------
    # syscall plumbing
    # ------------------------------------------------------------------
    def start(self, proc: Process, name: str, **args: Any) -> SyscallInstance:
        proc.stack_id = next(self._stack)
        ctx = CpuContext(proc.pid, proc.address_space_id, proc.stack_id, name)
        entry = SyscallLogEntry(next(self._seq), proc.pid, name, dict(args))
        self.log.append(entry)
        inst = SyscallInstance(proc, name, args, ctx, entry)
        inst.gen = self._frame(inst)
        return inst

    def step(self, inst: SyscallInstance) -> bool:
        """Advance one phase; returns True once the instance has completed."""
        if inst.done:
            return True
        try:
            next(inst.gen)
        except StopIteration:
            pass
        return inst.done

    def run(self, inst: SyscallInstance) -> Any:
        while not self.step(inst):
            pass
        return inst.result

    def _frame(self, inst: SyscallInstance):
        body = getattr(self, f"_sys_{inst.name}")
        self.clock += 1
        self.hv.charge("syscall")
        if inst.name != "monitor" and inst.proc.alive:
            self.hv.syscall_entry(inst.ctx, inst.name, inst.args)
        yield
        if not inst.proc.alive:
            inst.result = -ESRCH
        else:
            try:
                inst.result = body(inst)
            except KernelError as e:
                inst.result = -e.errno
            except FsError as e:
                inst.result = -e.errno
        inst.entry.raw_result = inst.result
        yield
        self.hv.syscall_return(inst.ctx, inst)
        inst.entry.result = inst.result
        inst.done = True

    # -- public wrappers ------------------------------------------------
    def syscall_open(
        self,
        proc: Process,
        path: str,
        mode: OpenMode = OpenMode.READ_ONLY,
        placement: Placement = Placement.DEFAULT,
        create: bool = False,
    ) -> int:
        return self.run(self.start(proc, "open", path=path, mode=mode, placement=placement, create=create))

    def syscall_close(self, proc: Process, fd: int) -> int:
        return self.run(self.start(proc, "close", fd=fd))

    def syscall_io(
        self,
        proc: Process,
        fd: int,
        direction: IoDirection,
        nbytes: int,
        block_size: int,
        data: Optional[bytes] = None,
    ) -> int:
        name = "read" if direction is IoDirection.READ else "write"
        return self.run(self.start(proc, name, fd=fd, nbytes=nbytes, block_size=block_size, data=data))

    def syscall_link(self, proc: Process, existing: str, newpath: str) -> int:
        return self.run(self.start(proc, "link", existing=existing, newpath=newpath))

    def syscall_unlink(self, proc: Process, path: str) -> int:
        return self.run(self.start(proc, "unlink", path=path))

    def syscall_kill(self, proc: Process, target_pid: int, sig: int = 9) -> int:
        return self.run(self.start(proc, "kill", pid=target_pid, sig=sig))

    def syscall_getdents(self, proc: Process, dirpath: str):
        return self.run(self.start(proc, "getdents", path=dirpath))

    def monitor_syscall(self, proc: Process, payload: bytes) -> bytes:
        return self.run(self.start(proc, "monitor", payload=payload))

    # -- bodies ---------------------------------------------------------
    def _permitted(self, proc: Process, node, mode: OpenMode) -> bool:
        if proc.uid == 0:
            return True
        bits = (node.mode >> 6) & 7 if node.uid == proc.uid else node.mode & 7
        return (not mode.reads or bits & 4) and (not mode.writes or bits & 2)

    def _sys_open(self, inst: SyscallInstance) -> int:
        a, proc, ctx, entry = inst.args, inst.proc, inst.ctx, inst.entry
        mode: OpenMode = a["mode"]
        mount = self.mounts[proc.namespaces.mnt_ns]
        path = a["path"]
        try:
            d = self._walk(ctx, proc, path, entry, a.get("placement", Placement.DEFAULT))
        except KernelError as e:
            if e.errno != ENOENT or not (a.get("create") and mode.writes):
                raise
            parent = self._walk(ctx, proc, parent_path(path), entry)
            if not self._node_of(ctx, parent).is_dir:
                raise KernelError(ENOTDIR) from None
            mount.create(normpath(path), 0o644, proc.uid)
            d = self._walk(ctx, proc, path, entry, a.get("placement", Placement.DEFAULT))
        node = self._node_of(ctx, d)
        if node.is_dir and mode.writes:
            raise KernelError(EISDIR)
        if not self._permitted(proc, node, mode):
            raise KernelError(EACCES)
        self._dref(ctx, d, +1, entry)
        entry.target_serial = self.raw_u(d, "dentry", "serial")
        if mode.writes and not node.is_dir:
            layer, _ = mount.resolve(path)
            if layer is not mount.upper:
                self._copy_up(ctx, proc, d, path)
        fd = next((i for i in range(self.max_fds) if not self._read_fd(ctx, proc, i)), None)
        if fd is None:
            self._dref(ctx, d, -1, entry)
            raise KernelError(EMFILE)
        file = self.allocator.alloc("file", Placement.DEFAULT)
        img = bytearray(self.profile.size("file"))
        self._pack("file", img, "dentry", d)
        self._pack("file", img, "mode", _MODE_CODE[mode])
        self.hv.guest_write(ctx, file, bytes(img))
        self.hv.guest_write(ctx, self._slot(proc, fd), file.to_bytes(8, "little"))
        self._files[file] = _OpenFile(mode, origin=entry.seq)
        entry.file_addr = file
        if a.get("placement") is Placement.ISOLATED:
            self.hv.charge("cache_creation")
        return fd

    def _copy_up(self, ctx: CpuContext, proc: Process, d: int, path: str) -> None:
        mnt_ns = proc.namespaces.mnt_ns
        node = self.mounts[mnt_ns].copy_up(path)
        old = self._rd(ctx, d, "dentry", "inode")
        new = self._iget(ctx, mnt_ns, node)
        self._alias_del(ctx, d, old)
        self._wr(ctx, d, "dentry", "inode", new)
        self._alias_add(ctx, d, new)

    def _sys_close(self, inst: SyscallInstance) -> int:
        return self._close_fd(inst.ctx, inst.proc, inst.args["fd"], inst.entry)

    def _io(self, inst: SyscallInstance, direction: IoDirection) -> int:
        a, proc, ctx = inst.args, inst.proc, inst.ctx
        file = self._read_fd(ctx, proc, a["fd"])
        if not file:
            raise KernelError(EBADF)
        mode = _CODE_MODE.get(self._rd(ctx, file, "file", "mode"))
        d = self._rd(ctx, file, "file", "dentry")
        if mode is None or not d:
            raise KernelError(EBADF)
        if (direction is IoDirection.READ and not mode.reads) or (
            direction is IoDirection.WRITE and not mode.writes
        ):
            raise KernelError(EBADF)
        nbytes, bs = int(a["nbytes"]), int(a["block_size"])
        if nbytes < 0 or bs <= 0:
            raise KernelError(EINVAL)
        inode = self._rd(ctx, d, "dentry", "inode")
        nid = self._rd(ctx, inode, "inode", "data")
        node = self.storage.nodes[nid]
        page = self._page_cache.get(nid)
        if page is None:
            page = self.memory.claim_page(PageKind.DATA) * self.memory.page_size
            self._page_cache[nid] = page
        blocks = -(-nbytes // bs)
        for b in range(blocks):
            slot = page + (b % (self.memory.page_size // 8)) * 8
            if direction is IoDirection.READ:
                self.hv.guest_read(ctx, slot, 8)
            else:
                self.hv.guest_write(ctx, slot, b.to_bytes(8, "little"))
        self.hv.charge("io_block", blocks)
        self.hv.charge("io_byte", nbytes)
        of = self._files.setdefault(file, _OpenFile(mode))
        if direction is IoDirection.WRITE:
            data = a.get("data")
            if data is not None:
                node.content[of.pos : of.pos + len(data)] = data
                node.size = len(node.content)
            else:
                node.size = max(node.size, of.pos + nbytes)
            of.pos += nbytes
            self._wr(ctx, inode, "inode", "mtime", self.clock)
        else:
            of.pos += nbytes
            # relatime: only refresh atime when it is not newer than mtime
            if self._rd(ctx, inode, "inode", "atime") <= self._rd(ctx, inode, "inode", "mtime"):
                self._wr(ctx, inode, "inode", "atime", self.clock)
        return nbytes

    def _sys_read(self, inst: SyscallInstance) -> int:
        return self._io(inst, IoDirection.READ)

    def _sys_write(self, inst: SyscallInstance) -> int:
        return self._io(inst, IoDirection.WRITE)

    def _sys_link(self, inst: SyscallInstance) -> int:
        a, proc, ctx, entry = inst.args, inst.proc, inst.ctx, inst.entry
        mount = self.mounts[proc.namespaces.mnt_ns]
        src = self._walk(ctx, proc, a["existing"], entry)
        node = self._node_of(ctx, src)
        if node.is_dir:
            raise KernelError(EPERM)
        newpath = normpath(a["newpath"])
        parent = self._walk(ctx, proc, parent_path(newpath), entry)
        if not self._node_of(ctx, parent).is_dir:
            raise KernelError(ENOTDIR)
        if mount.resolve(newpath) is not None:
            raise KernelError(EEXIST)
        layer, _ = mount.resolve(a["existing"])
        if layer is not mount.upper:
            raise KernelError(EXDEV)
        mount.upper.add_link(newpath, node)
        inode = self._rd(ctx, src, "dentry", "inode")
        self._wr(ctx, inode, "inode", "link_count", node.nlink)
        d = self._d_alloc(
            ctx, parent, posixpath.basename(newpath), node, Placement.DEFAULT, entry, proc.namespaces.mnt_ns
        )
        entry.target_serial = self.raw_u(d, "dentry", "serial")
        return 0

    def _sys_unlink(self, inst: SyscallInstance) -> int:
        a, proc, ctx, entry = inst.args, inst.proc, inst.ctx, inst.entry
        mount = self.mounts[proc.namespaces.mnt_ns]
        d = self._walk(ctx, proc, a["path"], entry)
        node = self._node_of(ctx, d)
        if node.is_dir:
            raise KernelError(EISDIR)
        if proc.uid != 0 and not self._permitted(proc, node, OpenMode.WRITE_ONLY):
            raise KernelError(EACCES)
        mount.unlink(a["path"])
        inode = self._rd(ctx, d, "dentry", "inode")
        self._wr(ctx, inode, "inode", "link_count", node.nlink)
        self._hash_del(ctx, d)
        parent = self._rd(ctx, d, "dentry", "parent")
        if self._rd(ctx, d, "dentry", "refcount") == 0:
            self._d_free(ctx, d, entry, unpin_parent=False)
        self._dref(ctx, parent, -1, entry)
        return 0

    def _sys_kill(self, inst: SyscallInstance) -> int:
        target = self.procs.get(inst.args["pid"])
        if target is None or not target.alive:
            raise KernelError(ESRCH)
        if target.pid == 1:
            raise KernelError(EPERM)
        self._exit(inst.ctx, target, inst.entry)
        return 0

    def _sys_getdents(self, inst: SyscallInstance):
        proc, ctx = inst.proc, inst.ctx
        path = normpath(inst.args["path"])
        if path == "/proc":
            visible = self.alive_processes()
            if proc.namespaces.pid_ns != INIT_NS.pid_ns:
                visible = [p for p in visible if p.namespaces.pid_ns == proc.namespaces.pid_ns]
                flt = self.hv.guest_read(ctx, self.symbols["getdents_filter"], 1)[0]
                if flt == GETDENTS_FILTER_ON:
                    visible = [p for p in visible if not p.is_hidden_agent]
            return [str(p.pid) for p in sorted(visible, key=lambda p: p.pid)]
        return self.mounts[proc.namespaces.mnt_ns].list_dir(path)

    def _sys_monitor(self, inst: SyscallInstance) -> bytes:
        return self.hv.monitor_syscall(inst.ctx, bytes(inst.args.get("payload", b"")))

    # ------------------------------------------------------------------
    # kernel housekeeping
    # ------------------------------------------------------------------
    def _hash_chain_heads(self, ctx: CpuContext) -> list[int]:
        raw = self.hv.guest_read(ctx, self.symbols["dentry_hashtable"], 8 * self.hash_buckets)
        return [int.from_bytes(raw[i : i + 8], "little") for i in range(0, len(raw), 8)]

    def dcache_prune(self) -> int:
        """Free every dentry whose refcount is 0, touching each candidate first."""
        ctx = CpuContext(KERNEL_PID, 0, next(self._stack), "prune")
        entry = SyscallLogEntry(next(self._seq), KERNEL_PID, "prune", {})
        self.log.append(entry)
        freed = 0
        while True:
            candidates = []
            for head in self._hash_chain_heads(ctx):
                d = head
                while d:
                    if self._rd(ctx, d, "dentry", "refcount") == 0:
                        candidates.append(d)
                    d = self._rd(ctx, d, "dentry", "hash_next")
            progress = False
            for d in candidates:
                self._wr(ctx, d, "dentry", "refcount", 0)
                if self._rd(ctx, d, "dentry", "refcount") == 0:
                    self._d_free(ctx, d, entry)
                    freed += 1
                    progress = True
            if not progress:
                break
        entry.result = entry.raw_result = freed
        return freed

    def raw_kernel_write(self, proc: Process, addr: int, data: bytes) -> int:
        """Arbitrary kernel-memory write primitive (attack modeling)."""
        ctx = CpuContext(proc.pid, proc.address_space_id, next(self._stack), None)
        return 0 if self.hv.guest_write(ctx, addr, data) else -EACCES

    def raw_kernel_read(self, proc: Process, addr: int, n: int) -> bytes:
        ctx = CpuContext(proc.pid, proc.address_space_id, next(self._stack), None)
        return self.hv.guest_read(ctx, addr, n)

    # ------------------------------------------------------------------
    # ground truth (no traps) for oracles and tests
    # ------------------------------------------------------------------
    def all_dentries(self) -> list[int]:
        base = self.symbols["dentry_hashtable"]
        out = []
        for i in range(self.hash_buckets):
            d = int.from_bytes(self.memory.data[base + 8 * i : base + 8 * i + 8], "little")
            while d:
                out.append(d)
                d = self.raw_u(d, "dentry", "hash_next")
        return out

    def dentry_name(self, d: int) -> str:
        hdr = self.profile.offset("dentry", "name") + self.profile.width("dentry", "name")
        return self._parse_dentry(bytes(self.memory.data[d : d + hdr]))[1]

    def dentry_path(self, d: int) -> str:
        parts = []
        while True:
            parent = self.raw_u(d, "dentry", "parent")
            if not parent:
                break
            parts.append(self.dentry_name(d))
            d = parent
        return "/" + "/".join(reversed(parts))

    def refcount(self, d: int) -> int:
        return self.raw_u(d, "dentry", "refcount")

    def lookup(self, proc_or_ns: Process | int, path: str) -> int:
        """Cached dentry for ``path`` (0 if not cached); never allocates."""
        mnt_ns = proc_or_ns.namespaces.mnt_ns if isinstance(proc_or_ns, Process) else proc_or_ns
        d = self.roots[mnt_ns]
        hdr = self.profile.offset("dentry", "name") + self.profile.width("dentry", "name")
        for comp in components(path):
            addr = int.from_bytes(self.memory.read(self._bucket(d, comp), 8), "little")
            while addr:
                p, n = self._parse_dentry(bytes(self.memory.data[addr : addr + hdr]))
                if p == d and n == comp:
                    break
                addr = self.raw_u(addr, "dentry", "hash_next")
            if not addr:
                return 0
            d = addr
        return d

    def alias_ring(self, d: int) -> list[int]:
        ring = [d]
        cur = self.raw_u(d, "dentry", "alias_next")
        while cur != d:
            ring.append(cur)
            cur = self.raw_u(cur, "dentry", "alias_next")
            if len(ring) > 1_000_000:
                raise RuntimeError("alias ring does not close")
        return ring

    def file_dentry(self, file: int) -> int:
        return self.raw_u(file, "file", "dentry")

    def recount(self, extra_holds: Optional[dict[int, int]] = None) -> dict[int, int]:
        """Expected refcount of every live dentry, keyed by serial.

        open handles + hashed child pins + mount holds + ``extra_holds`` (serial →
        count, e.g. monitor pins).
        """
        expected: dict[int, int] = {}
        serial_of: dict[int, int] = {}
        live = set(self.all_dentries())
        for d in live:
            s = self.raw_u(d, "dentry", "serial")
            serial_of[d] = s
            expected[s] = 0
        for proc in self.alive_processes():
            for file in self.fd_table(proc).values():
                d = self.file_dentry(file)
                if d not in serial_of:  # unhashed but still open
                    s = self.raw_u(d, "dentry", "serial")
                    serial_of[d] = s
                    expected.setdefault(s, 0)
                expected[serial_of[d]] += 1
        for d in live:
            parent = self.raw_u(d, "dentry", "parent")
            if parent:
                expected[serial_of[parent]] += 1
        for root in self.roots.values():
            expected[serial_of[root]] += 1
        for s, n in (extra_holds or {}).items():
            if s in expected:
                expected[s] += n
        return expected

    def actual_refcounts(self) -> dict[int, int]:
        out = {}
        seen = set(self.all_dentries())
        for proc in self.alive_processes():
            seen.update(self.file_dentry(f) for f in self.fd_table(proc).values())
        for d in seen:
            out[self.raw_u(d, "dentry", "serial")] = self.refcount(d)
        return out

    def dentry_by_serial(self, serial: int) -> int:
        for d in self.all_dentries():
            if self.raw_u(d, "dentry", "serial") == serial:
                return d
        for proc in self.alive_processes():
            for f in self.fd_table(proc).values():
                d = self.file_dentry(f)
                if self.raw_u(d, "dentry", "serial") == serial:
                    return d
        return 0

    def file_origin(self, file: int) -> int:
        """Seq of the open syscall that created the live file object at ``file`` (0 if unknown)."""
        f = self._files.get(file)
        return f.origin if f else 0

    def open_handles(self) -> Iterable[tuple[Process, int, int]]:
        for proc in self.alive_processes():
            for fd, file in self.fd_table(proc).items():
                yield proc, fd, file


class Scheduler:
    """Seeded interleaving of in-flight syscall instances (one phase per tick)."""

    def __init__(self, kernel: Kernel, seed: int = 0):
        self.kernel = kernel
        self.rng = random.Random(seed)
        self.inflight: list[SyscallInstance] = []

    def submit(self, inst: SyscallInstance) -> SyscallInstance:
        self.inflight.append(inst)
        return inst

    def tick(self) -> Optional[SyscallInstance]:
        """Advance one randomly chosen instance; returns it if it just completed."""
        if not self.inflight:
            return None
        inst = self.rng.choice(self.inflight)
        if self.kernel.step(inst):
            self.inflight.remove(inst)
            return inst
        return None

    def drain(self) -> list[SyscallInstance]:
        done = []
        while self.inflight:
            inst = self.tick()
            if inst is not None:
                done.append(inst)
        return done
