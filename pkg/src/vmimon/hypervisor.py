"""Trap substrate: per-page permissions, breakpoints, out-of-band access, accounting.

Guest accesses that violate a page's permission entry produce an
``EptViolation`` for the registered handler, then the access is completed in a
single-step window (or skipped/rewritten, per the handler's verdict) and a
``SingleStepDone`` follows.  Breakpoint sites model INT3 patches at syscall
entries, the shared syscall-return instruction and the Monitor_Syscall body.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, fields
from enum import Enum
from typing import Any, Callable, Mapping, Optional, Union

from .memory import GuestMemory, MemoryFault

log = logging.getLogger(__name__)

SYSCALL_NAMES = frozenset(
    {"open", "close", "read", "write", "link", "unlink", "kill", "getdents", "monitor"}
)
FILE_SYSCALLS = ("open", "close", "read", "write", "link", "unlink", "getdents")


class Access(Enum):
    READ = "read"
    WRITE = "write"


@dataclass(frozen=True)
class CpuContext:
    """vCPU state captured at trap time: pid plus CR3/RSP analogues."""

    pid: int
    address_space_id: int
    stack_id: int
    syscall: Optional[str] = None

    @property
    def key(self) -> tuple[int, int]:
        return (self.address_space_id, self.stack_id)


@dataclass(frozen=True)
class Site:
    kind: str  # "entry" | "return" | "monitor"
    name: Optional[str] = None

    @classmethod
    def entry(cls, name: str) -> "Site":
        return cls("entry", name)

    def __str__(self) -> str:
        return f"entry:{self.name}" if self.kind == "entry" else self.kind


SYSCALL_RETURN = Site("return")
MONITOR_SYSCALL_ENTRY = Site("monitor")


@dataclass
class EptEntry:
    page: int
    readable: bool = True
    writable: bool = True


@dataclass(frozen=True)
class EptViolation:
    addr: int
    access: Access
    size: int
    new_value: Optional[bytes] = None


@dataclass(frozen=True)
class BreakpointHit:
    site: Site
    args: dict
    result: Any = None


@dataclass(frozen=True)
class SingleStepDone:
    addr: int
    performed: bool = True


@dataclass(frozen=True)
class VmExitEvent:
    seq: int
    kind: Union[EptViolation, BreakpointHit, SingleStepDone]
    ctx: CpuContext


@dataclass(frozen=True)
class Verdict:
    action: str  # "allow" | "deny" | "rewrite"
    value: Optional[bytes] = None

    @classmethod
    def rewrite(cls, value: bytes) -> "Verdict":
        return cls("rewrite", value)


ALLOW = Verdict("allow")
DENY = Verdict("deny")


@dataclass
class CostModel:
    """Cycle costs per counted event.  Every value is a calibration knob."""

    vmexit: float = 6000
    single_step: float = 1000
    breakpoint: float = 3000
    syscall_base: float = 300
    per_block_io: float = 2000
    per_byte_memcopy: float = 1.0
    per_byte_dump: float = 1.8
    per_byte_mcblock: float = 1.45
    cache_creation_per_file: float = 34000
    cfwatcher_injection_per_file: float = 4_000_000
    clock_hz: float = 2.0e9
    base_startup_ms: float = 550.0

    def __post_init__(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"cost {f.name} must be >= 0")

    @classmethod
    def from_mapping(cls, doc: Mapping[str, Any] | None) -> "CostModel":
        doc = dict(doc or {})
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown cost keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in doc.items()})

    @property
    def base_startup_cycles(self) -> float:
        return self.base_startup_ms * 1e-3 * self.clock_hz

    def unit_costs(self) -> dict[str, float]:
        return {
            "ept_violation": self.vmexit,
            "single_step": self.single_step,
            "breakpoint": self.breakpoint,
            "syscall": self.syscall_base,
            "io_block": self.per_block_io,
            "io_byte": self.per_byte_memcopy,
            "memcopy_byte.MEMCPY": self.per_byte_memcopy,
            "memcopy_byte.DUMP": self.per_byte_dump,
            "memcopy_byte.MCBLOCK": self.per_byte_mcblock,
            "cache_creation": self.cache_creation_per_file,
            "cfwatcher_injection": self.cfwatcher_injection_per_file,
        }

    def cycles(self, counts: Mapping[str, int]) -> float:
        unit = self.unit_costs()
        return sum(n * unit[k] for k, n in counts.items() if k in unit)


@dataclass
class MetricsReport:
    counts: dict[str, int]
    cycles: float

    def to_text(self) -> str:
        lines = [f"{k} {v}" for k, v in sorted(self.counts.items())]
        lines.append(f"cycles {self.cycles:.1f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        counts: dict[str, int] = {}
        cycles = 0.0
        for line in text.splitlines():
            if not line.strip():
                continue
            key, value = line.split()
            if key == "cycles":
                cycles = float(value)
            else:
                counts[key] = int(value)
        return cls(counts, cycles)


class BreakpointTable:
    def __init__(self) -> None:
        self.armed: set[Site] = set()

    @staticmethod
    def validate(site: Site) -> None:
        if site.kind == "entry":
            if site.name not in SYSCALL_NAMES or site.name == "monitor":
                raise ValueError(f"unknown instrumentation point {site}")
        elif site.kind not in ("return", "monitor"):
            raise ValueError(f"unknown instrumentation point {site}")

    def arm(self, site: Site) -> None:
        self.validate(site)
        self.armed.add(site)

    def disarm(self, site: Site) -> None:
        self.validate(site)
        self.armed.discard(site)

    def __contains__(self, site: Site) -> bool:
        return site in self.armed


class Hypervisor:
    """Single-vCPU trap layer over a :class:`GuestMemory`."""

    def __init__(self, memory: GuestMemory, cost_model: CostModel | None = None):
        self.memory = memory
        self.cost_model = cost_model or CostModel()
        self.ept: dict[int, EptEntry] = {}
        self.breakpoints = BreakpointTable()
        self.counters: Counter[str] = Counter()
        self.vmi_ops = 0
        self.events: list[VmExitEvent] = []
        self.diagnostics: list[str] = []
        self.on_violation: Optional[Callable[[VmExitEvent], Verdict]] = None
        self.on_single_step: Optional[Callable[[VmExitEvent], None]] = None
        self.on_breakpoint: Optional[Callable[[VmExitEvent], Any]] = None
        self._seq = 0
        self._in_single_step = False
        self._returning: Optional[tuple[tuple[int, int], Any]] = None
        self._inflight: dict[tuple[int, int], tuple[str, dict]] = {}

    # -- permission entries ---------------------------------------------
    def set_page_perms(self, page: int, readable: bool, writable: bool) -> None:
        if not 0 <= page < self.memory.n_pages:
            raise MemoryFault(f"page {page} does not exist")
        if readable and writable:
            self.ept.pop(page, None)
        else:
            self.ept[page] = EptEntry(page, readable, writable)

    def page_perms(self, page: int) -> EptEntry:
        return self.ept.get(page) or EptEntry(page)

    # -- guest accesses ---------------------------------------------------
    def _emit(self, kind, ctx: CpuContext) -> VmExitEvent:
        self._seq += 1
        ev = VmExitEvent(self._seq, kind, ctx)
        self.events.append(ev)
        return ev

    def _chunks(self, addr: int, n: int):
        ps = self.memory.page_size
        end = addr + n
        while addr < end:
            stop = min(end, (addr // ps + 1) * ps)
            yield addr, stop - addr
            addr = stop

    def guest_read(self, ctx: CpuContext, addr: int, n: int) -> bytes:
        self.memory.check(addr, n)
        out = bytearray()
        for a, size in self._chunks(addr, n):
            entry = self.ept.get(a // self.memory.page_size)
            if entry is None or entry.readable or self._in_single_step:
                out += self.memory.data[a : a + size]
                continue
            verdict = self._violation(ctx, EptViolation(a, Access.READ, size))
            if verdict.action == "deny":
                chunk = bytes(size)
            elif verdict.action == "rewrite":
                chunk = verdict.value
            else:
                chunk = bytes(self.memory.data[a : a + size])
            out += chunk
            self._step_done(ctx, a, verdict.action != "deny")
        return bytes(out)

    def guest_write(self, ctx: CpuContext, addr: int, data: bytes) -> bool:
        """Write on behalf of the guest; returns False if any chunk was denied."""
        self.memory.check(addr, len(data))
        ok = True
        pos = 0
        for a, size in self._chunks(addr, len(data)):
            chunk = bytes(data[pos : pos + size])
            pos += size
            entry = self.ept.get(a // self.memory.page_size)
            if entry is None or entry.writable or self._in_single_step:
                self.memory.data[a : a + size] = chunk
                continue
            verdict = self._violation(ctx, EptViolation(a, Access.WRITE, size, chunk))
            if verdict.action == "deny":
                ok = False
            else:
                if verdict.action == "rewrite":
                    chunk = verdict.value
                self._in_single_step = True
                try:
                    self.memory.data[a : a + size] = chunk
                finally:
                    self._in_single_step = False
            self._step_done(ctx, a, verdict.action != "deny")
        return ok

    def guest_access(self, ctx: CpuContext, addr: int, access: Access, data: bytes | int | None = None):
        if access is Access.READ:
            return self.guest_read(ctx, addr, data if isinstance(data, int) else 8)
        return self.guest_write(ctx, addr, data)

    def _violation(self, ctx: CpuContext, kind: EptViolation) -> Verdict:
        self.counters["ept_violation"] += 1
        ev = self._emit(kind, ctx)
        verdict = self.on_violation(ev) if self.on_violation else ALLOW
        if verdict.action == "rewrite" and len(verdict.value) != kind.size:
            raise ValueError("rewritten value must match access size")
        return verdict

    def _step_done(self, ctx: CpuContext, addr: int, performed: bool) -> None:
        self.counters["single_step"] += 1
        ev = self._emit(SingleStepDone(addr, performed), ctx)
        if self.on_single_step:
            self.on_single_step(ev)

    # -- out-of-band access ----------------------------------------------
    def vmi_read(self, addr: int, n: int) -> bytes:
        self.vmi_ops += 1
        return self.memory.read(addr, n)

    def vmi_write(self, addr: int, data: bytes) -> None:
        self.vmi_ops += 1
        self.memory.write(addr, data)

    def vmi_access(self, addr: int, access: Access, data: bytes | int | None = None):
        if access is Access.READ:
            return self.vmi_read(addr, data if isinstance(data, int) else 8)
        self.vmi_write(addr, data)
        return None

    def vmi_u(self, addr: int, width: int) -> int:
        return int.from_bytes(self.vmi_read(addr, width), "little")

    # -- breakpoints ------------------------------------------------------
    def arm_breakpoint(self, site: Site) -> None:
        self.breakpoints.arm(site)

    def disarm_breakpoint(self, site: Site) -> None:
        self.breakpoints.disarm(site)

    def _hit(self, ctx: CpuContext, site: Site, args: dict, result: Any = None) -> Any:
        self.counters["breakpoint"] += 1
        ev = self._emit(BreakpointHit(site, args, result), ctx)
        return self.on_breakpoint(ev) if self.on_breakpoint else None

    def syscall_entry(self, ctx: CpuContext, name: str, args: dict) -> None:
        """Called by the guest at a syscall's first instruction; args may be rewritten."""
        self._inflight[ctx.key] = (name, args)
        site = Site.entry(name)
        if site in self.breakpoints:
            self._hit(ctx, site, args)

    def syscall_args(self, ctx: CpuContext) -> Optional[tuple[str, dict]]:
        """Register-level view of the syscall in flight for ``ctx``."""
        return self._inflight.get(ctx.key)

    def syscall_return(self, ctx: CpuContext, instance: Any) -> None:
        """Called at the shared return instruction; handler may patch the result."""
        try:
            if SYSCALL_RETURN in self.breakpoints:
                self._returning = (ctx.key, instance)
                try:
                    name, args = self._inflight.get(ctx.key, (None, {}))
                    self._hit(ctx, SYSCALL_RETURN, {"syscall": name, **args}, instance.result)
                finally:
                    self._returning = None
        finally:
            self._inflight.pop(ctx.key, None)

    def patch_syscall_result(self, key: tuple[int, int], value: Any) -> bool:
        if self._returning is None or self._returning[0] != key:
            msg = f"patch for {key} ignored: returning instance is " + (
                str(self._returning[0]) if self._returning else "none"
            )
            self.diagnostics.append(msg)
            log.warning(msg)
            return False
        self._returning[1].result = value
        return True

    def monitor_syscall(self, ctx: CpuContext, payload: bytes) -> bytes:
        self._inflight[ctx.key] = ("monitor", {"payload": payload})
        try:
            if MONITOR_SYSCALL_ENTRY not in self.breakpoints:
                return b""
            reply = self._hit(ctx, MONITOR_SYSCALL_ENTRY, {"payload": payload})
            return bytes(reply or b"")
        finally:
            self._inflight.pop(ctx.key, None)

    def forget_inflight(self, ctx: CpuContext) -> None:
        self._inflight.pop(ctx.key, None)

    # -- accounting -------------------------------------------------------
    def charge(self, kind: str, n: int = 1) -> None:
        self.counters[kind] += n

    def snapshot(self) -> Counter:
        return Counter(self.counters)

    def account(self, since: Mapping[str, int] | None = None) -> MetricsReport:
        counts = Counter(self.counters)
        if since:
            counts.subtract(since)
        counts = {k: v for k, v in counts.items() if v}
        return MetricsReport(dict(sorted(counts.items())), self.cost_model.cycles(counts))
